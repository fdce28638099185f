//! The task-incremental loop. Each epoch of a task trains one model per seen
//! task from the current base model, fuses them with weights derived from
//! their pairwise Manhattan distances, and blends the fused model into the
//! base. After the last epoch the rehearsal memory is rebalanced and the base
//! model is fine-tuned on it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attack::{associative_epoch, AttackConfig, Batch, NoPenalty, Regularizer};
pub use crate::data::TaskSpec;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::bce_loss;
use crate::nn::{ArchSpec, Model, ModelSnapshot};
use crate::optim::{LrSchedule, Sgd};
use crate::rng;
use crate::tensor::Tensor;

const STREAM_EPOCH: u64 = 0x4550_4f43;
const STREAM_MEMORY: u64 = 0x4d45_4d4f;
const STREAM_META: u64 = 0x4d45_5441;
const STREAM_SAMPLE: u64 = 0x5341_4d50;
const EVAL_CHUNK: usize = 1000;

/// Class-balanced exemplar store with a fixed total budget.
#[derive(Clone, Debug, PartialEq)]
pub struct RehearsalMemory {
    budget: usize,
    side: usize,
    entries: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl RehearsalMemory {
    pub fn new(budget: usize, side: usize) -> Self {
        Self {
            budget,
            side,
            entries: BTreeMap::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.entries.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    /// Stored exemplars as a dataset, ordered by class then insertion.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let mut images = Vec::with_capacity(self.len() * self.side * self.side);
        let mut labels = Vec::with_capacity(self.len());
        for (&c, list) in &self.entries {
            for img in list {
                images.extend_from_slice(img);
                labels.push(c);
            }
        }
        Dataset::new(self.side, images, labels, Split::Train)
    }
}

/// Rebalances the memory to cover `classes` from `d_n` as well as the classes
/// already stored. Every class gets the same quota,
/// `floor(budget / classes seen)`, lowered to the smallest number of samples
/// any new class can provide. Old classes keep their earliest exemplars.
pub fn update_memory(
    memory: &RehearsalMemory,
    d_n: &Dataset,
    classes: &[usize],
    seed: u64,
) -> Result<RehearsalMemory> {
    if d_n.side() != memory.side {
        return Err(Error::Shape(format!(
            "memory holds {0}x{0} images, dataset has {1}x{1}",
            memory.side,
            d_n.side()
        )));
    }
    let mut per_class: BTreeMap<usize, Vec<usize>> =
        classes.iter().map(|&c| (c, Vec::new())).collect();
    for (i, &y) in d_n.labels().iter().enumerate() {
        if let Some(list) = per_class.get_mut(&y) {
            list.push(i);
        }
    }
    if let Some((c, _)) = per_class.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Ingestion(format!(
            "class {c} has no samples in the task data"
        )));
    }
    let seen = memory
        .entries
        .keys()
        .chain(per_class.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let mut quota = memory.budget / seen;
    if let Some(min_new) = per_class.values().map(Vec::len).min() {
        quota = quota.min(min_new);
    }
    if let Some(min_old) = memory.entries.values().map(Vec::len).min() {
        quota = quota.min(min_old);
    }
    let mut entries: BTreeMap<usize, Vec<Vec<f64>>> = memory
        .entries
        .iter()
        .map(|(&c, v)| (c, v[..quota].to_vec()))
        .collect();
    for (&c, idx) in &per_class {
        let mut r = rng::rng(seed, &[STREAM_MEMORY, c as u64]);
        let picked: Vec<Vec<f64>> = idx
            .choose_multiple(&mut r, quota)
            .map(|&i| d_n.image(i).to_vec())
            .collect();
        entries.insert(c, picked);
    }
    Ok(RehearsalMemory {
        budget: memory.budget,
        side: memory.side,
        entries,
    })
}

/// `D_n ∪ M_{n-1}`: the task's data followed by the stored exemplars.
pub fn training_union(d_n: &Dataset, memory: &RehearsalMemory) -> Result<Dataset> {
    if memory.is_empty() {
        return Ok(d_n.clone());
    }
    let mem = memory.to_dataset()?;
    if mem.side() != d_n.side() {
        return Err(Error::Shape("memory and task images differ in size".into()));
    }
    let mut images = d_n.pixels().to_vec();
    images.extend_from_slice(mem.pixels());
    let mut labels = d_n.labels().to_vec();
    labels.extend_from_slice(mem.labels());
    Dataset::new(d_n.side(), images, labels, Split::Train)
}

/// A uniform draw of `k` distinct samples from `D_n ∪ M_{n-1}`.
pub fn sample_batch(d_n: &Dataset, m_prev: &RehearsalMemory, k: usize, seed: u64) -> Result<Batch> {
    if d_n.is_empty() {
        return Err(Error::Precondition("task dataset is empty".into()));
    }
    let union = training_union(d_n, m_prev)?;
    if k == 0 || k > union.len() {
        return Err(Error::Sampling(format!(
            "cannot draw {k} samples from a pool of {}",
            union.len()
        )));
    }
    let mut r = rng::rng(seed, &[STREAM_SAMPLE]);
    let idx: Vec<usize> = rand::seq::index::sample(&mut r, union.len(), k).into_vec();
    make_batch(&union, &idx)
}

fn make_batch(ds: &Dataset, idx: &[usize]) -> Result<Batch> {
    Ok(Batch {
        images: ds.batch(idx)?,
        labels: idx.iter().map(|&i| ds.labels()[i]).collect(),
    })
}

/// One shuffled sweep over `pool` in mini-batches of `k`, with every batch
/// split by task. Entry `i` holds task `i`'s sub-batches in order.
pub fn task_sub_batches(
    pool: &Dataset,
    tasks: &[TaskSpec],
    k: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<Vec<Batch>>> {
    if k == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let owner: BTreeMap<usize, usize> = tasks
        .iter()
        .enumerate()
        .flat_map(|(i, t)| t.classes.iter().map(move |&c| (c, i)))
        .collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<Batch>> = vec![Vec::new(); tasks.len()];
    for chunk in order.chunks(k) {
        let mut split: Vec<Vec<usize>> = vec![Vec::new(); tasks.len()];
        for &i in chunk {
            let y = pool.labels()[i];
            let t = *owner.get(&y).ok_or_else(|| {
                Error::Precondition(format!("sample of class {y} belongs to no seen task"))
            })?;
            split[t].push(i);
        }
        for (t, idx) in split.into_iter().enumerate() {
            if !idx.is_empty() {
                out[t].push(make_batch(pool, &idx)?);
            }
        }
    }
    Ok(out)
}

fn shuffled_batches(pool: &Dataset, k: usize, rng: &mut impl rand::Rng) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    order
        .chunks(k.max(1))
        .map(|c| make_batch(pool, c))
        .collect()
}

/// Pairwise Manhattan distances between models. Rows `0..n` are the
/// task-specific models, the last row is the base model.
#[derive(Clone, Debug, PartialEq)]
pub struct DifMatrix {
    size: usize,
    values: Vec<f64>,
}

impl DifMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let size = rows.len();
        let mut values = Vec::with_capacity(size * size);
        for (a, row) in rows.iter().enumerate() {
            if row.len() != size {
                return Err(Error::Shape(format!(
                    "row {a} has {} entries, expected {size}",
                    row.len()
                )));
            }
            values.extend_from_slice(row);
        }
        for a in 0..size {
            for b in 0..size {
                let v = values[a * size + b];
                if !(v >= 0.0) || (a == b && v != 0.0) || v != values[b * size + a] {
                    return Err(Error::Domain(format!(
                        "not a distance matrix at ({a}, {b}): {v}"
                    )));
                }
            }
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.size + b]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.values[a * self.size..(a + 1) * self.size]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.size).map(|a| self.row(a).to_vec()).collect()
    }

    pub fn max_offdiag(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

pub fn manhattan(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn check_same_arch(models: &[ModelSnapshot]) -> Result<()> {
    if let Some(first) = models.first() {
        if let Some(bad) = models.iter().find(|m| !m.same_arch(first)) {
            return Err(Error::Config(format!(
                "cannot mix architectures {} and {}",
                first.arch_id(),
                bad.arch_id()
            )));
        }
    }
    Ok(())
}

pub fn compute_dif(models: &[ModelSnapshot]) -> Result<DifMatrix> {
    check_same_arch(models)?;
    let size = models.len();
    let mut values = vec![0.0; size * size];
    for a in 0..size {
        for b in a + 1..size {
            let d = manhattan(models[a].params(), models[b].params());
            values[a * size + b] = d;
            values[b * size + a] = d;
        }
    }
    Ok(DifMatrix { size, values })
}

/// `sum_{a,b in 0..=active+1} d_ab^2`, the penalty attached to task model
/// `active` (0-based) when it is trained.
pub fn dif_penalty(dif: &DifMatrix, active: usize) -> Result<f64> {
    let upto = active + 2;
    if upto > dif.size() {
        return Err(Error::Config(format!(
            "model {active} needs a {upto}x{upto} distance matrix, got {}",
            dif.size()
        )));
    }
    let mut total = 0.0;
    for a in 0..upto {
        for b in 0..upto {
            total += dif.get(a, b).powi(2);
        }
    }
    Ok(total)
}

/// BCE on the scores plus `weight` times [`dif_penalty`].
pub fn regularized_task_loss(
    scores: &Tensor,
    labels: &[usize],
    dif: &DifMatrix,
    active: usize,
    weight: f64,
) -> Result<f64> {
    Ok(bce_loss(scores, labels)? + weight * dif_penalty(dif, active)?)
}

/// Gradient of the double-sum penalty with respect to `theta`, the other
/// models held fixed: `4 * sum_b d(theta, ref_b) * sgn(theta - ref_b)`, with
/// `sgn(0) = 0`.
pub fn dif_penalty_grad(theta: &[f64], refs: &[Vec<f64>]) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    for r in refs {
        let d = manhattan(theta, r);
        for ((gv, t), rv) in g.iter_mut().zip(theta).zip(r) {
            let s = if t > rv {
                1.0
            } else if t < rv {
                -1.0
            } else {
                0.0
            };
            *gv += 4.0 * d * s;
        }
    }
    g
}

/// The training-time form of the penalty for one task-specific model.
pub struct DifRegularizer {
    refs: Vec<Vec<f64>>,
    weight: f64,
    /// Penalty among the reference models themselves.
    constant: f64,
    flat: Vec<f64>,
}

impl DifRegularizer {
    pub fn new(refs: Vec<Vec<f64>>, weight: f64) -> Self {
        let mut constant = 0.0;
        for a in 0..refs.len() {
            for b in a + 1..refs.len() {
                constant += 2.0 * manhattan(&refs[a], &refs[b]).powi(2);
            }
        }
        Self {
            refs,
            weight,
            constant,
            flat: Vec::new(),
        }
    }
}

impl Regularizer for DifRegularizer {
    fn apply(&mut self, params: &[Tensor], grads: &mut [Vec<f64>]) -> Result<f64> {
        if self.weight == 0.0 || self.refs.is_empty() {
            return Ok(0.0);
        }
        self.flat.clear();
        for p in params {
            self.flat.extend_from_slice(p.data());
        }
        if let Some(r) = self.refs.iter().find(|r| r.len() != self.flat.len()) {
            return Err(Error::Shape(format!(
                "reference model has {} parameters, active model {}",
                r.len(),
                self.flat.len()
            )));
        }
        let mut value = self.constant;
        for r in &self.refs {
            value += 2.0 * manhattan(&self.flat, r).powi(2);
        }
        let g = dif_penalty_grad(&self.flat, &self.refs);
        let mut offset = 0;
        for grad in grads.iter_mut() {
            for (gv, pv) in grad.iter_mut().zip(&g[offset..]) {
                *gv += self.weight * pv;
            }
            offset += grad.len();
        }
        Ok(self.weight * value)
    }
}

/// How each distance row is scaled before the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DifScale {
    /// Divide by the row maximum; an all-zero row stays zero.
    RowMax,
    Raw,
}

impl FromStr for DifScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "row-max" => Ok(Self::RowMax),
            "raw" => Ok(Self::Raw),
            other => Err(Error::Config(format!(
                "unknown dif scale {other:?} (row-max or raw)"
            ))),
        }
    }
}

impl fmt::Display for DifScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DifScale::RowMax => "row-max",
            DifScale::Raw => "raw",
        })
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Row-wise softmax of the (optionally scaled) distance matrix.
pub fn normalize_dif(dif: &DifMatrix, scale: DifScale) -> Vec<Vec<f64>> {
    (0..dif.size())
        .map(|a| {
            let row = dif.row(a);
            match scale {
                DifScale::Raw => softmax(row),
                DifScale::RowMax => {
                    let m = row.iter().copied().fold(0.0, f64::max);
                    if m > 0.0 {
                        softmax(&row.iter().map(|v| v / m).collect::<Vec<_>>())
                    } else {
                        softmax(row)
                    }
                }
            }
        })
        .collect()
}

/// Convex weights over `[task models..., base]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights(Vec<f64>);

impl FusionWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("{weights:?} are not convex weights")));
        }
        Ok(Self(weights))
    }

    /// The last row of a normalized distance matrix.
    pub fn from_normalized(dif_star: &[Vec<f64>]) -> Result<Self> {
        let last = dif_star
            .last()
            .ok_or_else(|| Error::Config("empty normalized matrix".into()))?;
        Self::new(last.clone())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("no models to fuse".into()));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Parameter-wise `sum_i w_i * models[i]`. Models must share one architecture.
pub fn fuse(models: &[ModelSnapshot], weights: &FusionWeights) -> Result<ModelSnapshot> {
    if models.len() != weights.len() || models.is_empty() {
        return Err(Error::Config(format!(
            "{} models but {} fusion weights",
            models.len(),
            weights.len()
        )));
    }
    check_same_arch(models)?;
    // Summing offsets from one member keeps identical inputs exact.
    let anchor = models[models.len() - 1].params();
    let mut offset = vec![0.0; anchor.len()];
    for (m, &w) in models.iter().zip(weights.as_slice()) {
        for ((o, p), a) in offset.iter_mut().zip(m.params()).zip(anchor) {
            *o += w * (p - a);
        }
    }
    let out = anchor.iter().zip(offset).map(|(a, o)| a + o).collect();
    Ok(ModelSnapshot::new(models[0].arch_id(), out))
}

/// `gamma * phi_f + (1 - gamma) * phi_b_prev`, evaluated as
/// `phi_b_prev + gamma * (phi_f - phi_b_prev)`.
pub fn blend_base(
    phi_f: &ModelSnapshot,
    phi_b_prev: &ModelSnapshot,
    gamma: f64,
) -> Result<ModelSnapshot> {
    if !phi_f.same_arch(phi_b_prev) {
        return Err(Error::Config(format!(
            "cannot blend {} into {}",
            phi_f.arch_id(),
            phi_b_prev.arch_id()
        )));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    if gamma == 1.0 {
        return Ok(phi_f.clone());
    }
    let params = phi_f
        .params()
        .iter()
        .zip(phi_b_prev.params())
        .map(|(f, b)| b + gamma * (f - b))
        .collect();
    Ok(ModelSnapshot::new(phi_f.arch_id(), params))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Softmax of the base model's distance row.
    DifWeighted,
    /// Equal weight for every task model and the base.
    UniformAverage,
    /// A single model trained on whole batches replaces the base each epoch.
    NoFusion,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [
        FusionMode::DifWeighted,
        FusionMode::UniformAverage,
        FusionMode::NoFusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::DifWeighted => "dif-weighted",
            FusionMode::UniformAverage => "uniform",
            FusionMode::NoFusion => "none",
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown fusion mode {s:?} (dif-weighted, uniform or none)"
                ))
            })
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub gamma: f64,
    pub epochs_per_task: usize,
    pub meta_epochs: usize,
    /// Learning rate of the meta-training epochs; the schedule's final rate
    /// when `None`.
    pub meta_lr: Option<f64>,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dif_scale: DifScale,
    pub fusion: FusionMode,
    /// Multiplier on the distance penalty.
    pub reg_weight: f64,
    pub memory_budget: usize,
    pub seed: u64,
    /// Train the task-specific models of an epoch on the rayon pool.
    pub parallel: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            epochs_per_task: 20,
            meta_epochs: 2,
            meta_lr: None,
            schedule: LrSchedule {
                initial: 0.1,
                factor: 0.5,
                milestones: vec![5, 10, 15],
            },
            batch_size: 256,
            momentum: 0.9,
            weight_decay: 0.0,
            dif_scale: DifScale::RowMax,
            fusion: FusionMode::DifWeighted,
            reg_weight: 1e-7,
            memory_budget: 2000,
            seed: 0,
            parallel: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.epochs_per_task == 0 {
            return bad("epochs_per_task must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.schedule.initial >= 0.0
            && self.schedule.factor > 0.0
            && self.meta_lr.map_or(true, |r| r >= 0.0))
        {
            return bad(format!(
                "invalid learning-rate schedule {:?}",
                self.schedule
            ));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(self.weight_decay >= 0.0)
            || !(self.reg_weight >= 0.0)
        {
            return bad(
                "momentum must lie in [0, 1); weight decay and penalty weight must be nonnegative"
                    .into(),
            );
        }
        Ok(())
    }
}

/// One line of the distance trace.
#[derive(Clone, Debug, PartialEq)]
pub struct DifTraceRow {
    pub task: usize,
    pub epoch: usize,
    pub max_offdiag_dif: f64,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TaskOutcome {
    /// The meta-trained model that closes the task.
    pub model: Model,
    pub memory: RehearsalMemory,
    pub trace: Vec<DifTraceRow>,
    /// Clean BCE on the memory before meta-training and after each meta epoch.
    pub meta_losses: Vec<f64>,
}

fn check_partition(d_n: &Dataset, memory: &RehearsalMemory, tasks: &[TaskSpec]) -> Result<()> {
    let (current, seen) = tasks
        .split_last()
        .ok_or_else(|| Error::Precondition("no tasks given".into()))?;
    if let Some(&y) = d_n.labels().iter().find(|y| !current.classes.contains(y)) {
        return Err(Error::Precondition(format!(
            "task {} data contains class {y} outside the task",
            current.index
        )));
    }
    for c in memory.classes() {
        if !seen.iter().any(|t| t.classes.contains(&c)) {
            return Err(Error::Precondition(format!(
                "memory holds class {c} which no earlier task owns"
            )));
        }
    }
    Ok(())
}

fn train_one(
    start: &Model,
    batches: &[Batch],
    lr: f64,
    cfg: &EngineConfig,
    attack_cfg: &AttackConfig,
    penalty: &mut dyn Regularizer,
) -> Result<Model> {
    let mut model = start.clone();
    let mut opt = Sgd::new(lr, cfg.momentum, cfg.weight_decay);
    associative_epoch(&mut model, batches, attack_cfg, &mut opt, penalty)?;
    Ok(model)
}

/// Trains task `tasks.last()`. `tasks` lists every task seen so far, with
/// class ids equal to head units; `phi_prev` must already cover them all.
pub fn train_task(
    tasks: &[TaskSpec],
    d_n: &Dataset,
    memory: &RehearsalMemory,
    phi_prev: &Model,
    cfg: &EngineConfig,
    attack_cfg: &AttackConfig,
) -> Result<TaskOutcome> {
    cfg.validate()?;
    attack_cfg.validate()?;
    check_partition(d_n, memory, tasks)?;
    let n = tasks.len();
    let task_index = tasks[n - 1].index;
    if let Some(c) = tasks
        .iter()
        .flat_map(|t| &t.classes)
        .find(|&&c| c >= phi_prev.class_count())
    {
        return Err(Error::Precondition(format!(
            "class {c} has no head unit (head size {})",
            phi_prev.class_count()
        )));
    }
    let union = training_union(d_n, memory)?;
    let mut base = phi_prev.clone();
    // Task models of the previous epoch, used as fixed references by the penalty.
    let mut previous: Vec<Vec<f64>> = vec![base.snapshot().params().to_vec(); n];
    let mut trace = Vec::with_capacity(cfg.epochs_per_task);
    for epoch in 1..=cfg.epochs_per_task {
        let lr = cfg.schedule.at(epoch);
        let mut r = rng::rng(cfg.seed, &[STREAM_EPOCH, task_index as u64, epoch as u64]);
        let base_snap = base.snapshot();
        if cfg.fusion == FusionMode::NoFusion {
            let batches = shuffled_batches(&union, cfg.batch_size, &mut r)?;
            let trained = train_one(&base, &batches, lr, cfg, attack_cfg, &mut NoPenalty)?;
            let dif = compute_dif(&[trained.snapshot(), base_snap])?;
            trace.push(DifTraceRow {
                task: task_index,
                epoch,
                max_offdiag_dif: dif.max_offdiag(),
                weights: Vec::new(),
            });
            base = trained;
            continue;
        }
        let per_task = task_sub_batches(&union, tasks, cfg.batch_size, &mut r)?;
        let refs_for = |i: usize| -> Vec<Vec<f64>> {
            (0..=i + 1)
                .filter(|&j| j != i)
                .map(|j| {
                    if j < n {
                        previous[j].clone()
                    } else {
                        base_snap.params().to_vec()
                    }
                })
                .collect()
        };
        let run = |i: usize| -> Result<Model> {
            let mut penalty = DifRegularizer::new(refs_for(i), cfg.reg_weight);
            train_one(&base, &per_task[i], lr, cfg, attack_cfg, &mut penalty)
        };
        let models: Vec<Model> = if cfg.parallel {
            (0..n).into_par_iter().map(run).collect::<Result<_>>()?
        } else {
            (0..n).map(run).collect::<Result<_>>()?
        };
        let mut snaps: Vec<ModelSnapshot> = models.iter().map(Model::snapshot).collect();
        previous = snaps.iter().map(|s| s.params().to_vec()).collect();
        snaps.push(base_snap.clone());
        let dif = compute_dif(&snaps)?;
        let weights = match cfg.fusion {
            FusionMode::UniformAverage => FusionWeights::uniform(snaps.len())?,
            _ => FusionWeights::from_normalized(&normalize_dif(&dif, cfg.dif_scale))?,
        };
        let fused = fuse(&snaps, &weights)?;
        let blended = blend_base(&fused, &base_snap, cfg.gamma)?;
        base.restore(&blended)?;
        trace.push(DifTraceRow {
            task: task_index,
            epoch,
            max_offdiag_dif: dif.max_offdiag(),
            weights: weights.as_slice().to_vec(),
        });
    }
    let memory = update_memory(
        memory,
        d_n,
        &tasks[n - 1].classes,
        cfg.seed ^ task_index as u64,
    )?;
    let (model, meta_losses) = meta_train(&base, &memory, cfg, attack_cfg, task_index)?;
    Ok(TaskOutcome {
        model,
        memory,
        trace,
        meta_losses,
    })
}

/// Fine-tunes on the balanced memory with the attack active, by default at
/// the schedule's final rate. Returns the model and the clean memory BCE before and
/// after every epoch.
pub fn meta_train(
    phi: &Model,
    memory: &RehearsalMemory,
    cfg: &EngineConfig,
    attack_cfg: &AttackConfig,
    task_index: usize,
) -> Result<(Model, Vec<f64>)> {
    if memory.is_empty() {
        return Err(Error::Config(
            "meta-training needs a non-empty memory".into(),
        ));
    }
    let pool = memory.to_dataset()?;
    let mut model = phi.clone();
    let mut losses = vec![dataset_loss(&model, &pool)?];
    let mut opt = Sgd::new(
        cfg.meta_lr.unwrap_or(cfg.schedule.final_rate()),
        cfg.momentum,
        cfg.weight_decay,
    );
    for e in 0..cfg.meta_epochs {
        let mut r = rng::rng(cfg.seed, &[STREAM_META, task_index as u64, e as u64]);
        let batches = shuffled_batches(&pool, cfg.batch_size, &mut r)?;
        associative_epoch(&mut model, &batches, attack_cfg, &mut opt, &mut NoPenalty)?;
        losses.push(dataset_loss(&model, &pool)?);
    }
    Ok((model, losses))
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

/// Clean BCE over a whole dataset.
pub fn dataset_loss(model: &Model, ds: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for idx in chunks(ds.len()) {
        let scores = model.scores(&ds.batch(&idx)?)?;
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
        total += bce_loss(&scores, &labels)? * idx.len() as f64;
    }
    Ok(total / ds.len().max(1) as f64)
}

/// Fraction of samples whose arg-max over `allowed` head units (all units
/// when `None`) matches the label.
pub fn accuracy(model: &Model, ds: &Dataset, allowed: Option<&[usize]>) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Precondition("accuracy of an empty dataset".into()));
    }
    let units: Vec<usize> = match allowed {
        Some(a) => a.to_vec(),
        None => (0..model.class_count()).collect(),
    };
    if let Some(u) = units.iter().find(|&&u| u >= model.class_count()) {
        return Err(Error::Precondition(format!("head has no unit {u}")));
    }
    let c = model.class_count();
    let mut correct = 0usize;
    for idx in chunks(ds.len()) {
        let scores = model.scores(&ds.batch(&idx)?)?;
        for (row, &i) in scores.data().chunks(c).zip(&idx) {
            let mut best = units[0];
            for &u in &units {
                if row[u] > row[best] {
                    best = u;
                }
            }
            correct += usize::from(best == ds.labels()[i]);
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Drives a whole class-incremental sequence. Global class ids are mapped to
/// head units in the order tasks introduce them.
pub struct Learner {
    spec: ArchSpec,
    cfg: EngineConfig,
    attack: AttackConfig,
    tasks: Vec<TaskSpec>,
    unit_of: BTreeMap<usize, usize>,
    model: Option<Model>,
    memory: RehearsalMemory,
    trace: Vec<DifTraceRow>,
    meta_losses: Vec<Vec<f64>>,
}

impl Learner {
    /// `tasks` uses global class ids, in presentation order.
    pub fn new(
        spec: ArchSpec,
        cfg: EngineConfig,
        attack: AttackConfig,
        tasks: &[TaskSpec],
    ) -> Result<Self> {
        cfg.validate()?;
        attack.validate()?;
        if tasks.is_empty() {
            return Err(Error::Config("no tasks".into()));
        }
        let mut unit_of = BTreeMap::new();
        let mut local = Vec::with_capacity(tasks.len());
        for t in tasks {
            let mut classes = Vec::with_capacity(t.classes.len());
            for &c in &t.classes {
                let u = unit_of.len();
                if unit_of.insert(c, u).is_some() {
                    return Err(Error::Config(format!("class {c} appears in two tasks")));
                }
                classes.push(u);
            }
            local.push(TaskSpec {
                index: t.index,
                classes,
            });
        }
        let memory = RehearsalMemory::new(cfg.memory_budget, spec.side);
        Ok(Self {
            spec,
            cfg,
            attack,
            tasks: local,
            unit_of,
            model: None,
            memory,
            trace: Vec::new(),
            meta_losses: Vec::new(),
        })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks_done(&self) -> usize {
        self.meta_losses.len()
    }

    pub fn model(&self) -> Option<&Model> {
        self.model.as_ref()
    }

    pub fn memory(&self) -> &RehearsalMemory {
        &self.memory
    }

    pub fn trace(&self) -> &[DifTraceRow] {
        &self.trace
    }

    pub fn meta_losses(&self) -> &[Vec<f64>] {
        &self.meta_losses
    }

    fn units_upto(&self, n: usize) -> usize {
        self.tasks[..n].iter().map(|t| t.classes.len()).sum()
    }

    /// Task `n`'s samples (1-based), relabelled to head units.
    pub fn task_data(&self, ds: &Dataset, n: usize) -> Result<Dataset> {
        let mut idx = Vec::new();
        let mut labels = Vec::new();
        for (i, y) in ds.labels().iter().enumerate() {
            if let Some(&u) = self.unit_of.get(y) {
                if self.tasks[n - 1].classes.contains(&u) {
                    idx.push(i);
                    labels.push(u);
                }
            }
        }
        let sub = ds.subset(&idx);
        Dataset::new(sub.side(), sub.pixels().to_vec(), labels, ds.split())
    }

    fn fresh(&self, units: usize) -> Result<Model> {
        Model::build(self.spec.clone(), units, self.cfg.seed)
    }

    /// Trains the next task on its share of `train`.
    pub fn learn_next(&mut self, train: &Dataset) -> Result<TaskOutcome> {
        let n = self.tasks_done() + 1;
        if n > self.tasks.len() {
            return Err(Error::State("every task has been learned".into()));
        }
        let units = self.units_upto(n);
        let start = match &self.model {
            None => self.fresh(units)?,
            Some(m) => m.expand_head(units)?,
        };
        let d_n = self.task_data(train, n)?;
        let outcome = train_task(
            &self.tasks[..n],
            &d_n,
            &self.memory,
            &start,
            &self.cfg,
            &self.attack,
        )?;
        self.trace.extend(outcome.trace.iter().cloned());
        self.meta_losses.push(outcome.meta_losses.clone());
        self.memory = outcome.memory.clone();
        self.model = Some(outcome.model.clone());
        Ok(outcome)
    }

    /// Accuracy on task `j` of `test` (1-based), as `(full head, restricted
    /// to the task's units)`. A future task is scored with a head grown to
    /// reach it, restricted to that task's units in both positions.
    pub fn evaluate_task(&self, test: &Dataset, j: usize) -> Result<(f64, f64)> {
        let data = self.task_data(test, j)?;
        let own = &self.tasks[j - 1].classes;
        match &self.model {
            Some(m) if j <= self.tasks_done() => {
                Ok((accuracy(m, &data, None)?, accuracy(m, &data, Some(own))?))
            }
            Some(m) => {
                let r = accuracy(&m.expand_head(self.units_upto(j))?, &data, Some(own))?;
                Ok((r, r))
            }
            None => {
                let r = self.baseline(test, j)?;
                Ok((r, r))
            }
        }
    }

    /// Restricted accuracy of an untrained model on task `j`.
    pub fn baseline(&self, test: &Dataset, j: usize) -> Result<f64> {
        let data = self.task_data(test, j)?;
        accuracy(
            &self.fresh(self.units_upto(j))?,
            &data,
            Some(&self.tasks[j - 1].classes),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(side: usize, labels: Vec<usize>) -> Dataset {
        let n = labels.len();
        let images = (0..n * side * side).map(|i| (i % 7) as f64 / 7.0).collect();
        Dataset::new(side, images, labels, Split::Train).unwrap()
    }

    fn snap(params: Vec<f64>) -> ModelSnapshot {
        ModelSnapshot::new("t", params)
    }

    #[test]
    fn memory_quota_two_then_ten_classes() {
        let empty = RehearsalMemory::new(2000, 1);
        let d1 = labelled(1, (0..3000).map(|i| i % 2).collect());
        let m = update_memory(&empty, &d1, &[0, 1], 5).unwrap();
        assert_eq!(
            m.class_counts().values().copied().collect::<Vec<_>>(),
            vec![1000, 1000]
        );
        let d2 = labelled(1, (0..4000).map(|i| 2 + i % 8).collect());
        let m = update_memory(&m, &d2, &[2, 3, 4, 5, 6, 7, 8, 9], 5).unwrap();
        assert_eq!(m.len(), 2000);
        assert!(m.class_counts().values().all(|&c| c == 200));
    }

    #[test]
    fn memory_keeps_earliest_old_exemplars_and_is_deterministic() {
        let d1 = labelled(2, (0..40).map(|i| i % 2).collect());
        let m1 = update_memory(&RehearsalMemory::new(20, 2), &d1, &[0, 1], 3).unwrap();
        let d2 = labelled(2, (0..40).map(|i| 2 + i % 2).collect());
        let m2 = update_memory(&m1, &d2, &[2, 3], 3).unwrap();
        assert_eq!(m2.entries[&0][..], m1.entries[&0][..5]);
        assert_eq!(m2, update_memory(&m1, &d2, &[2, 3], 3).unwrap());
    }

    #[test]
    fn memory_rejects_missing_class() {
        let d = labelled(1, vec![0, 0, 0]);
        let err = update_memory(&RehearsalMemory::new(10, 1), &d, &[0, 1], 0).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)));
    }

    #[test]
    fn sample_batch_examples() {
        let d = labelled(1, vec![0, 1, 0, 1, 0]);
        let empty = RehearsalMemory::new(10, 1);
        let b = sample_batch(&d, &empty, 5, 1).unwrap();
        let mut got = b.labels.clone();
        got.sort_unstable();
        assert_eq!(got, vec![0, 0, 0, 1, 1]);
        assert_eq!(
            sample_batch(&d, &empty, 3, 9).unwrap(),
            sample_batch(&d, &empty, 3, 9).unwrap()
        );
        assert!(matches!(
            sample_batch(&d, &empty, 6, 1),
            Err(Error::Sampling(_))
        ));
        let mem = update_memory(&empty, &labelled(1, vec![7, 7, 7]), &[7], 0).unwrap();
        assert!(sample_batch(&d, &mem, 8, 1).is_ok());
        assert!(matches!(
            sample_batch(&d, &mem, 9, 1),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn sub_batches_partition_every_sample_by_task() {
        let pool = labelled(1, (0..50).map(|i| i % 4).collect());
        let tasks = [
            TaskSpec {
                index: 1,
                classes: vec![0, 1],
            },
            TaskSpec {
                index: 2,
                classes: vec![2, 3],
            },
        ];
        let mut r = rng::rng(0, &[]);
        let split = task_sub_batches(&pool, &tasks, 8, &mut r).unwrap();
        for (t, batches) in split.iter().enumerate() {
            for b in batches {
                assert!(b.labels.iter().all(|y| tasks[t].classes.contains(y)));
            }
        }
        let total: usize = split.iter().flatten().map(Batch::len).sum();
        assert_eq!(total, 50);
        let orphan = [TaskSpec {
            index: 1,
            classes: vec![0, 1],
        }];
        assert!(task_sub_batches(&pool, &orphan, 8, &mut r).is_err());
    }

    #[test]
    fn dif_hand_arithmetic_and_validation() {
        let d = compute_dif(&[snap(vec![1.0, 2.0]), snap(vec![3.0, 1.0])]).unwrap();
        assert_eq!(d.get(0, 1), 3.0);
        assert_eq!(d.get(1, 0), 3.0);
        assert_eq!(d.max_offdiag(), 3.0);
        let same =
            compute_dif(&[snap(vec![0.5; 4]), snap(vec![0.5; 4]), snap(vec![0.5; 4])]).unwrap();
        assert!(same.rows().iter().flatten().all(|&v| v == 0.0));
        let mixed = compute_dif(&[snap(vec![0.0]), ModelSnapshot::new("u", vec![0.0])]);
        assert!(matches!(mixed, Err(Error::Config(_))));
        assert!(DifMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]).is_err());
        assert!(DifMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn regularizer_value_and_gradient() {
        let dif = compute_dif(&[snap(vec![0.0]), snap(vec![2.0])]).unwrap();
        assert_eq!(dif_penalty(&dif, 0).unwrap(), 8.0);
        assert_eq!(dif_penalty_grad(&[0.0], &[vec![2.0]]), vec![-8.0]);
        let scores = Tensor::new(vec![1, 2], vec![0.7, 0.2]).unwrap();
        let flat = compute_dif(&[snap(vec![1.0]), snap(vec![1.0])]).unwrap();
        assert_eq!(
            regularized_task_loss(&scores, &[0], &flat, 0, 1.0).unwrap(),
            bce_loss(&scores, &[0]).unwrap()
        );
        let mut reg = DifRegularizer::new(vec![vec![2.0]], 0.5);
        let mut grads = vec![vec![0.0]];
        let value = reg
            .apply(&[Tensor::vector(vec![0.0]).unwrap()], &mut grads)
            .unwrap();
        assert_eq!(value, 4.0);
        assert_eq!(grads[0], vec![-4.0]);
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let theta = vec![0.3, -1.2, 0.8];
        let refs = vec![vec![1.0, 0.5, -0.4], vec![-0.6, 0.2, 2.0]];
        let value = |t: &[f64]| -> f64 {
            let mut all = refs.clone();
            all.insert(0, t.to_vec());
            let snaps: Vec<ModelSnapshot> = all.into_iter().map(snap).collect();
            dif_penalty(&compute_dif(&snaps).unwrap(), 1).unwrap()
        };
        let g = dif_penalty_grad(&theta, &refs);
        let h = 1e-6;
        for k in 0..theta.len() {
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (value(&up) - value(&down)) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-6 * fd.abs().max(1.0),
                "{k}: {fd} vs {}",
                g[k]
            );
        }
    }

    #[test]
    fn softmax_examples() {
        let zero = DifMatrix::from_rows(&[vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]]).unwrap();
        for row in normalize_dif(&zero, DifScale::RowMax) {
            assert!(row.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        }
        let p = softmax(&[0.0, 2.0, 2.0]);
        let z = 1.0 + 2.0 * 2f64.exp();
        let oracle = [1.0 / z, 2f64.exp() / z, 2f64.exp() / z];
        for (a, b) in p.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p[0] - 0.0634).abs() < 5e-5 && (p[1] - 0.4683).abs() < 5e-5);
        let shifted = softmax(&[7.5, 9.5, 9.5]);
        for (a, b) in p.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_examples() {
        let w = FusionWeights::new(vec![0.5, 0.5]).unwrap();
        let f = fuse(&[snap(vec![0.0, 0.0]), snap(vec![2.0, 2.0])], &w).unwrap();
        assert_eq!(f.params(), &[1.0, 1.0]);
        assert!(matches!(
            fuse(&[snap(vec![0.0])], &w),
            Err(Error::Config(_))
        ));
        assert!(FusionWeights::new(vec![0.5, 0.6]).is_err());
        let n1 = DifMatrix::from_rows(&[vec![0.0, 4.0], vec![4.0, 0.0]]).unwrap();
        let w = FusionWeights::from_normalized(&normalize_dif(&n1, DifScale::Raw)).unwrap();
        assert_eq!(w.as_slice(), softmax(&[4.0, 0.0]).as_slice());
    }

    #[test]
    fn blend_examples() {
        let f = snap(vec![1.0]);
        let b = blend_base(&f, &snap(vec![0.0]), 0.1).unwrap();
        assert!((b.params()[0] - 0.1).abs() < 1e-15);
        assert_eq!(blend_base(&f, &snap(vec![-3.0]), 1.0).unwrap(), f);
        assert!(blend_base(&f, &snap(vec![0.0]), 0.0).is_err());
        assert!(blend_base(&f, &snap(vec![0.0]), 1.5).is_err());
        let mut phi = snap(vec![0.0]);
        for t in 1..=30 {
            phi = blend_base(&f, &phi, 0.1).unwrap();
            assert!((phi.params()[0] - (1.0 - 0.9f64.powi(t))).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(EngineConfig::default().validate().is_ok());
        for bad in [
            EngineConfig {
                gamma: 0.0,
                ..EngineConfig::default()
            },
            EngineConfig {
                epochs_per_task: 0,
                ..EngineConfig::default()
            },
            EngineConfig {
                batch_size: 0,
                ..EngineConfig::default()
            },
            EngineConfig {
                momentum: 1.0,
                ..EngineConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        assert_eq!(
            "uniform".parse::<FusionMode>().unwrap(),
            FusionMode::UniformAverage
        );
        assert_eq!("raw".parse::<DifScale>().unwrap(), DifScale::Raw);
        assert!("soft".parse::<FusionMode>().is_err());
    }
}
