//! Model definitions with a spatial attention block, plus flat parameter
//! snapshots used for fusion, distances and checkpoints.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Kernel size of the attention convolution.
pub const ATTENTION_KERNEL: usize = 7;
const CNN_CONV1: usize = 8;
const CNN_CONV2: usize = 16;
/// Seed-path label for head units, so a unit's initial weights depend only
/// on the model seed and its class id.
const HEAD_STREAM: u64 = 0x4845_4144;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    /// image -> attention -> dense(hidden, relu) -> dense(classes, sigmoid)
    Mlp2,
    /// conv3x3(8) -> attention -> relu -> maxpool -> conv3x3(16) -> relu
    /// -> global average pool -> dense(classes, sigmoid)
    SmallCnn,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// Input images are `side x side`, single channel.
    pub side: usize,
    /// Hidden width of the MLP; ignored by the CNN.
    pub hidden: usize,
    pub attention: bool,
}

impl ArchSpec {
    pub fn mlp2() -> Self {
        Self {
            kind: ArchKind::Mlp2,
            side: 28,
            hidden: 256,
            attention: true,
        }
    }

    pub fn small_cnn() -> Self {
        Self {
            kind: ArchKind::SmallCnn,
            side: 28,
            hidden: CNN_CONV2,
            attention: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min_side = match self.kind {
            ArchKind::Mlp2 => 1,
            // two valid 3x3 convolutions around a 2x2 pool
            ArchKind::SmallCnn => 8,
        };
        if self.side < min_side {
            return Err(Error::Config(format!(
                "{} needs images of at least {min_side}x{min_side}",
                self.name()
            )));
        }
        if self.kind == ArchKind::Mlp2 && self.hidden == 0 {
            return Err(Error::Config("mlp2 hidden width must be positive".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ArchKind::Mlp2 => "mlp2",
            ArchKind::SmallCnn => "small-cnn",
        }
    }

    /// Width of the representation feeding the classification head.
    fn feature_dim(&self) -> usize {
        match self.kind {
            ArchKind::Mlp2 => self.hidden,
            ArchKind::SmallCnn => CNN_CONV2,
        }
    }

    pub fn arch_id(&self, class_count: usize) -> String {
        let att = if self.attention { "att" } else { "noatt" };
        match self.kind {
            ArchKind::Mlp2 => format!("mlp2-s{}-h{}-{att}-c{class_count}", self.side, self.hidden),
            ArchKind::SmallCnn => format!("small-cnn-s{}-{att}-c{class_count}", self.side),
        }
    }

    /// Shapes and fan-ins of every parameter tensor before the head.
    fn body_layout(&self) -> Vec<(Vec<usize>, usize)> {
        let att = [
            (
                vec![1, 2, ATTENTION_KERNEL, ATTENTION_KERNEL],
                2 * ATTENTION_KERNEL * ATTENTION_KERNEL,
            ),
            (vec![1], 2 * ATTENTION_KERNEL * ATTENTION_KERNEL),
        ];
        let mut layout = Vec::new();
        match self.kind {
            ArchKind::Mlp2 => {
                if self.attention {
                    layout.extend(att);
                }
                let fan = self.side * self.side;
                layout.push((vec![fan, self.hidden], fan));
                layout.push((vec![self.hidden], fan));
            }
            ArchKind::SmallCnn => {
                layout.push((vec![CNN_CONV1, 1, 3, 3], 9));
                layout.push((vec![CNN_CONV1], 9));
                if self.attention {
                    layout.extend(att);
                }
                layout.push((vec![CNN_CONV2, CNN_CONV1, 3, 3], 9 * CNN_CONV1));
                layout.push((vec![CNN_CONV2], 9 * CNN_CONV1));
            }
        }
        layout
    }
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self::mlp2()
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mlp2" => Ok(Self::mlp2()),
            "small-cnn" => Ok(Self::small_cnn()),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected mlp2 or small-cnn)"
            ))),
        }
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-image attention maps resized to image coordinates, each entry in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionMap {
    batch: usize,
    side: usize,
    values: Vec<f64>,
}

impl SpatialAttentionMap {
    pub fn new(batch: usize, side: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != batch * side * side {
            return Err(Error::Shape(format!(
                "{} values for {batch} maps of {side}x{side}",
                values.len()
            )));
        }
        Ok(Self {
            batch,
            side,
            values,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn image(&self, n: usize) -> &[f64] {
        let p = self.side * self.side;
        &self.values[n * p..(n + 1) * p]
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// Pre-sigmoid head activations, `[N, classes]`.
    pub logits: Var,
    /// Sigmoid scores, `[N, classes]`.
    pub scores: Var,
    /// Attention on the feature plane, `[N, 1, h, w]`.
    pub attention: Option<Var>,
    /// One handle per parameter tensor, in snapshot order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ArchSpec,
    class_count: usize,
    seed: u64,
    params: Vec<Tensor>,
}

fn uniform_tensor(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(shape, data)
}

/// Initial weights and bias of one head unit.
fn head_unit(seed: u64, class: usize, feat: usize) -> (Vec<f64>, f64) {
    let mut r = rng::rng(seed, &[HEAD_STREAM, class as u64]);
    let bound = 1.0 / (feat as f64).sqrt();
    let w = (0..feat).map(|_| r.gen_range(-bound..bound)).collect();
    (w, r.gen_range(-bound..bound))
}

impl Model {
    /// Deterministic construction: weights and biases uniform in
    /// `+-1/sqrt(fan_in)`, drawn from streams derived from `seed`.
    pub fn build(spec: ArchSpec, class_count: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if class_count == 0 {
            return Err(Error::Config("class_count must be at least 1".into()));
        }
        let mut params: Vec<Tensor> = spec
            .body_layout()
            .into_iter()
            .enumerate()
            .map(|(k, (shape, fan))| uniform_tensor(shape, fan, &mut rng::rng(seed, &[k as u64])))
            .collect();
        let feat = spec.feature_dim();
        let mut w = vec![0.0; feat * class_count];
        let mut b = vec![0.0; class_count];
        for c in 0..class_count {
            let (col, bias) = head_unit(seed, c, feat);
            for (f, v) in col.into_iter().enumerate() {
                w[f * class_count + c] = v;
            }
            b[c] = bias;
        }
        params.push(Tensor::from_parts(vec![feat, class_count], w));
        params.push(Tensor::from_parts(vec![class_count], b));
        Ok(Self {
            spec,
            class_count,
            seed,
            params,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn arch_id(&self) -> String {
        self.spec.arch_id(self.class_count)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Grows the head to `new_class_count` units. Existing units keep their
    /// weights; new ones get the same initial weights a freshly built model
    /// of that size would have.
    pub fn expand_head(&self, new_class_count: usize) -> Result<Model> {
        if new_class_count <= self.class_count {
            return Err(Error::Config(format!(
                "head can only grow: {} -> {new_class_count}",
                self.class_count
            )));
        }
        let feat = self.spec.feature_dim();
        let k = self.params.len();
        let (old_w, old_b) = (&self.params[k - 2], &self.params[k - 1]);
        let mut w = vec![0.0; feat * new_class_count];
        for f in 0..feat {
            w[f * new_class_count..f * new_class_count + self.class_count]
                .copy_from_slice(&old_w.data()[f * self.class_count..(f + 1) * self.class_count]);
        }
        let mut b = old_b.data().to_vec();
        for c in self.class_count..new_class_count {
            let (col, bias) = head_unit(self.seed, c, feat);
            for (f, v) in col.into_iter().enumerate() {
                w[f * new_class_count + c] = v;
            }
            b.push(bias);
        }
        let mut params = self.params[..k - 2].to_vec();
        params.push(Tensor::from_parts(vec![feat, new_class_count], w));
        params.push(Tensor::from_parts(vec![new_class_count], b));
        Ok(Model {
            spec: self.spec.clone(),
            class_count: new_class_count,
            seed: self.seed,
            params,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = self.spec.side;
        match *x.shape() {
            [n, 1, h, w] if h == s && w == s => Ok(n),
            ref other => Err(Error::Shape(format!(
                "{} expects [N, 1, {s}, {s}] input, got {other:?}",
                self.spec.name()
            ))),
        }
    }

    fn attention_block(&self, tape: &mut Tape, features: Var, w: Var, b: Var) -> Result<Var> {
        let mx = tape.channel_max_pool(features)?;
        let av = tape.channel_avg_pool(features)?;
        let cat = tape.concat_channels(&[mx, av])?;
        let conv = tape.conv2d(cat, w, Some(b), ATTENTION_KERNEL / 2)?;
        Ok(tape.sigmoid(conv))
    }

    /// Records the forward pass. Parameters are placed on the tape as leaves
    /// that require gradients only when `train_params` is set.
    pub fn forward(&self, tape: &mut Tape, x: Var, train_params: bool) -> Result<ForwardPass> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), train_params))
            .collect();
        self.forward_with(tape, x, params)
    }

    /// Records the forward pass with caller-provided parameter nodes, which
    /// must match [`Model::params`] in number and shape.
    pub fn forward_with(&self, tape: &mut Tape, x: Var, params: Vec<Var>) -> Result<ForwardPass> {
        self.check_input(tape.value(x))?;
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.params)
                .any(|(v, p)| tape.value(*v).shape() != p.shape())
        {
            return Err(Error::Shape(format!(
                "{} expects {} parameter tensors of its own shapes",
                self.arch_id(),
                self.params.len()
            )));
        }
        let k = params.len();
        let (head_w, head_b) = (params[k - 2], params[k - 1]);
        let mut attention = None;
        let features = match self.spec.kind {
            ArchKind::Mlp2 => {
                let mut input = x;
                let mut next = 0;
                if self.spec.attention {
                    let a = self.attention_block(tape, x, params[0], params[1])?;
                    input = tape.mul(x, a)?;
                    attention = Some(a);
                    next = 2;
                }
                let flat = tape.flatten(input)?;
                let z = tape.matmul(flat, params[next])?;
                let z = tape.add(z, params[next + 1])?;
                tape.relu(z)
            }
            ArchKind::SmallCnn => {
                let mut h = tape.conv2d(x, params[0], Some(params[1]), 0)?;
                let mut next = 2;
                if self.spec.attention {
                    let a = self.attention_block(tape, h, params[2], params[3])?;
                    h = tape.mul(h, a)?;
                    attention = Some(a);
                    next = 4;
                }
                let h = tape.relu(h);
                let h = tape.max_pool2(h)?;
                let h = tape.conv2d(h, params[next], Some(params[next + 1]), 0)?;
                let h = tape.relu(h);
                tape.global_avg_pool(h)?
            }
        };
        let z = tape.matmul(features, head_w)?;
        let logits = tape.add(z, head_b)?;
        let scores = tape.sigmoid(logits);
        Ok(ForwardPass {
            logits,
            scores,
            attention,
            params,
        })
    }

    /// Attention maps for a batch `[N, 1, s, s]`, resized to `s x s` by
    /// nearest-neighbour sampling.
    pub fn spatial_attention(&self, x: &Tensor) -> Result<SpatialAttentionMap> {
        if !self.spec.attention {
            return Err(Error::Config(format!(
                "{} has no attention block",
                self.arch_id()
            )));
        }
        let n = self.check_input(x)?;
        let s = self.spec.side;
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let a = match self.spec.kind {
            ArchKind::Mlp2 => {
                let w = tape.constant(self.params[0].clone());
                let b = tape.constant(self.params[1].clone());
                self.attention_block(&mut tape, input, w, b)?
            }
            ArchKind::SmallCnn => {
                let cw = tape.constant(self.params[0].clone());
                let cb = tape.constant(self.params[1].clone());
                let h = tape.conv2d(input, cw, Some(cb), 0)?;
                let w = tape.constant(self.params[2].clone());
                let b = tape.constant(self.params[3].clone());
                self.attention_block(&mut tape, h, w, b)?
            }
        };
        let a = if tape.value(a).shape()[2..] == [s, s] {
            a
        } else {
            tape.upsample_nearest(a, s, s)?
        };
        SpatialAttentionMap::new(n, s, tape.value(a).data().to_vec())
    }

    /// Sigmoid scores `[N, classes]` without recording gradients.
    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let fwd = self.forward(&mut tape, input, false)?;
        Ok(tape.value(fwd.scores).clone())
    }

    /// Arg-max class per image; ties go to the lowest class id.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let scores = self.scores(x)?;
        Ok(argmax_rows(scores.data(), self.class_count))
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        let mut params = Vec::with_capacity(self.param_count());
        for p in &self.params {
            params.extend_from_slice(p.data());
        }
        ModelSnapshot {
            arch_id: self.arch_id(),
            params,
        }
    }

    pub fn restore(&mut self, snap: &ModelSnapshot) -> Result<()> {
        if snap.arch_id != self.arch_id() || snap.params.len() != self.param_count() {
            return Err(Error::Config(format!(
                "snapshot {} ({} params) does not fit model {} ({} params)",
                snap.arch_id,
                snap.params.len(),
                self.arch_id(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.len();
            p.data_mut()
                .copy_from_slice(&snap.params[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// A copy of this model carrying the snapshot's parameters.
    pub fn with_snapshot(&self, snap: &ModelSnapshot) -> Result<Model> {
        let mut m = self.clone();
        m.restore(snap)?;
        Ok(m)
    }
}

pub(crate) fn argmax_rows(data: &[f64], cols: usize) -> Vec<usize> {
    data.chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// All trainable parameters of one model, flattened in a fixed layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    arch_id: String,
    params: Vec<f64>,
}

impl ModelSnapshot {
    pub fn new(arch_id: impl Into<String>, params: Vec<f64>) -> Self {
        Self {
            arch_id: arch_id.into(),
            params,
        }
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn same_arch(&self, other: &ModelSnapshot) -> bool {
        self.arch_id == other.arch_id && self.params.len() == other.params.len()
    }

    /// Layout: `u32` id length, id bytes (UTF-8), `u64` parameter count,
    /// then each parameter as `f64`; all little-endian.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let id = self.arch_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for v in &self.params {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut offset = 0u64;
        let mut read = |buf: &mut [u8], what: &str| -> Result<()> {
            r.read_exact(buf).map_err(|e| Error::Format {
                offset,
                message: format!("reading {what}: {e}"),
            })?;
            offset += buf.len() as u64;
            Ok(())
        };
        let mut b4 = [0u8; 4];
        read(&mut b4, "arch id length")?;
        let id_len = u32::from_le_bytes(b4) as usize;
        if id_len > 4096 {
            return Err(Error::Format {
                offset: 0,
                message: format!("implausible arch id length {id_len}"),
            });
        }
        let mut id = vec![0u8; id_len];
        read(&mut id, "arch id")?;
        let arch_id = String::from_utf8(id).map_err(|e| Error::Format {
            offset: 4,
            message: format!("arch id is not UTF-8: {e}"),
        })?;
        let mut b8 = [0u8; 8];
        read(&mut b8, "parameter count")?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut raw = vec![
            0u8;
            count.checked_mul(8).ok_or_else(|| Error::Format {
                offset: 4 + id_len as u64,
                message: format!("parameter count {count} overflows"),
            })?
        ];
        read(&mut raw, "parameters")?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { arch_id, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_mlp() -> ArchSpec {
        ArchSpec {
            kind: ArchKind::Mlp2,
            side: 6,
            hidden: 5,
            attention: true,
        }
    }

    fn image_batch(n: usize, side: usize, seed: u64) -> Tensor {
        let mut r = rng::rng(seed, &[]);
        let data = (0..n * side * side)
            .map(|_| r.gen_range(0.0..1.0))
            .collect();
        Tensor::new(vec![n, 1, side, side], data).unwrap()
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let a = Model::build(ArchSpec::mlp2(), 10, 7).unwrap().snapshot();
        let b = Model::build(ArchSpec::mlp2(), 10, 7).unwrap().snapshot();
        let c = Model::build(ArchSpec::mlp2(), 10, 8).unwrap().snapshot();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        assert_eq!(a.len(), 2 * 49 + 1 + 784 * 256 + 256 + 256 * 10 + 10);
    }

    #[test]
    fn unknown_arch_and_empty_head_rejected() {
        assert!(matches!(
            "resnet18".parse::<ArchSpec>(),
            Err(Error::Config(_))
        ));
        assert!(Model::build(ArchSpec::mlp2(), 0, 1).is_err());
    }

    #[test]
    fn small_cnn_scores_in_unit_interval() {
        let m = Model::build(ArchSpec::small_cnn(), 2, 1).unwrap();
        let s = m.scores(&image_batch(1, 28, 3)).unwrap();
        assert_eq!(s.shape(), &[1, 2]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_attention_weights_give_half_map() {
        for spec in [ArchSpec::mlp2(), ArchSpec::small_cnn()] {
            let mut m = Model::build(spec.clone(), 3, 2).unwrap();
            let att = if spec.kind == ArchKind::Mlp2 { 0 } else { 2 };
            m.params_mut()[att].data_mut().fill(0.0);
            m.params_mut()[att + 1].data_mut().fill(0.0);
            let a = m.spatial_attention(&image_batch(2, 28, 4)).unwrap();
            assert_eq!(a.values().len(), 2 * 28 * 28);
            assert!(a.values().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn attention_is_deterministic_and_open_interval() {
        let m = Model::build(ArchSpec::small_cnn(), 4, 9).unwrap();
        let x = image_batch(3, 28, 5);
        let a = m.spatial_attention(&x).unwrap();
        assert_eq!(a, m.spatial_attention(&x).unwrap());
        assert!(a.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn missing_attention_is_config_error() {
        let spec = ArchSpec {
            attention: false,
            ..tiny_mlp()
        };
        let m = Model::build(spec, 2, 1).unwrap();
        assert!(matches!(
            m.spatial_attention(&image_batch(1, 6, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn expand_head_preserves_old_scores() {
        let m = Model::build(ArchSpec::mlp2(), 10, 3).unwrap();
        let x = image_batch(4, 28, 11);
        let before = m.scores(&x).unwrap();
        let grown = m.expand_head(20).unwrap();
        let after = grown.scores(&x).unwrap();
        for n in 0..4 {
            assert_eq!(
                &before.data()[n * 10..n * 10 + 10],
                &after.data()[n * 20..n * 20 + 10]
            );
        }
        assert!(matches!(m.expand_head(10), Err(Error::Config(_))));
    }

    #[test]
    fn expand_head_grows_by_two_units() {
        let m = Model::build(ArchSpec::mlp2(), 2, 5).unwrap();
        let grown = m.expand_head(4).unwrap();
        assert_eq!(grown.param_count() - m.param_count(), (256 + 1) * 2);
        // new units match a fresh build of the larger head
        let fresh = Model::build(ArchSpec::mlp2(), 4, 5).unwrap();
        assert_eq!(grown.snapshot(), fresh.snapshot());
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let a = Model::build(tiny_mlp(), 3, 1).unwrap();
        let mut b = Model::build(tiny_mlp(), 3, 2).unwrap();
        let x = image_batch(5, 6, 8);
        b.restore(&a.snapshot()).unwrap();
        assert_eq!(a.scores(&x).unwrap(), b.scores(&x).unwrap());
        let other = Model::build(tiny_mlp(), 4, 2).unwrap();
        assert!(b.restore(&other.snapshot()).is_err());
    }

    #[test]
    fn snapshot_bytes_round_trip() {
        let snap = Model::build(tiny_mlp(), 3, 1).unwrap().snapshot();
        let mut buf = Vec::new();
        snap.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + snap.arch_id().len() + 8 + 8 * snap.len());
        assert_eq!(ModelSnapshot::read_from(&buf[..]).unwrap(), snap);
        let err = ModelSnapshot::read_from(&buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn argmax_ties_take_lowest_class() {
        assert_eq!(argmax_rows(&[0.2, 0.7, 0.7, 0.1, 0.1, 0.1], 3), vec![1, 0]);
    }
}
