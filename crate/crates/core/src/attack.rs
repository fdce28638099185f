//! Background-masked adversarial examples and the two-pass associative
//! training epoch.
//!
//! The first pass computes spatial attention `A` on the clean batch and turns
//! it into a background mask `B`. A sign-gradient ascent on the softmax
//! cross-entropy then builds a perturbation `delta` in the `epsilon` ball, and
//! the attacked batch is `clamp(x + B * delta, 0, 1)`. The second pass trains
//! on the attacked batch only.

use std::fmt;
use std::str::FromStr;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::loss::{bce_on_tape, cross_entropy_on_tape};
use crate::nn::{Model, SpatialAttentionMap};
use crate::optim::Sgd;
use crate::tensor::Tensor;

/// Upper bound applied to `1/A` masks.
pub const INVERSE_MASK_CAP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskForm {
    /// `B = 1 - A`
    OneMinusA,
    /// `B = 1 - A * A`
    OneMinusASquared,
    /// `B = 1 / A`, capped at [`INVERSE_MASK_CAP`]
    InverseA,
    /// No attack: `B = 0`.
    None,
}

impl MaskForm {
    pub const ALL: [MaskForm; 4] = [
        MaskForm::OneMinusA,
        MaskForm::OneMinusASquared,
        MaskForm::InverseA,
        MaskForm::None,
    ];

    pub fn apply(self, a: f64) -> f64 {
        match self {
            MaskForm::OneMinusA => 1.0 - a,
            MaskForm::OneMinusASquared => 1.0 - a * a,
            MaskForm::InverseA => (1.0 / a).min(INVERSE_MASK_CAP),
            MaskForm::None => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskForm::OneMinusA => "1-a",
            MaskForm::OneMinusASquared => "1-a2",
            MaskForm::InverseA => "inv-a",
            MaskForm::None => "none",
        }
    }
}

impl FromStr for MaskForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskForm::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mask form {s:?} (expected 1-a, 1-a2, inv-a or none)"
                ))
            })
    }
}

impl fmt::Display for MaskForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundMask {
    form: MaskForm,
    side: usize,
    values: Vec<f64>,
}

impl BackgroundMask {
    pub fn form(&self) -> MaskForm {
        self.form
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// `[N * side * side]`, aligned with the attention batch.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// A mask given directly, e.g. all zeros or all ones.
    pub fn from_values(form: MaskForm, side: usize, values: Vec<f64>) -> Result<Self> {
        if side == 0 || values.len() % (side * side) != 0 {
            return Err(Error::Shape(format!(
                "{} mask values do not tile {side}x{side} images",
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(
                "mask values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { form, side, values })
    }
}

pub fn background_mask(a: &SpatialAttentionMap, form: MaskForm) -> BackgroundMask {
    BackgroundMask {
        form,
        side: a.side(),
        values: a.values().iter().map(|&v| form.apply(v)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// Bound on `|delta|` per pixel.
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub mask_form: MaskForm,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            iterations: 4,
            mask_form: MaskForm::OneMinusASquared,
        }
    }
}

impl AttackConfig {
    /// `epsilon = 0` is accepted and makes the attack the identity.
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Precondition(
                "attack needs at least one iteration".into(),
            ));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Precondition(format!(
                "epsilon must be finite and nonnegative, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0) || (self.epsilon > 0.0 && self.step_size > self.epsilon) {
            return Err(Error::Precondition(format!(
                "step size must lie in (0, epsilon], got {} with epsilon {}",
                self.step_size, self.epsilon
            )));
        }
        Ok(())
    }

    /// True when the attack cannot move any pixel.
    pub fn is_identity(&self) -> bool {
        self.epsilon == 0.0 || self.mask_form == MaskForm::None
    }
}

/// `x + v`, rounded toward `x` so that `|result - x| <= |v|` holds in floating point.
fn bounded_add(x: f64, v: f64) -> f64 {
    let mut y = x + v;
    while (y - x).abs() > v.abs() {
        y = if v > 0.0 { y.next_down() } else { y.next_up() };
    }
    y
}

fn apply_perturbation(x: &Tensor, mask: &BackgroundMask, delta: &[f64]) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(mask.values())
        .zip(delta)
        .map(|((&xv, &b), &d)| bounded_add(xv, b * d).clamp(0.0, 1.0))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn check_batch(x: &Tensor, labels: &[usize], model: &Model) -> Result<()> {
    if x.shape().first() != Some(&labels.len()) {
        return Err(Error::Shape(format!(
            "{} labels for input of shape {:?}",
            labels.len(),
            x.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.class_count()) {
        return Err(Error::Precondition(format!(
            "label {bad} outside a head of {} classes",
            model.class_count()
        )));
    }
    Ok(())
}

/// Builds `x'` from a clean batch `[N, 1, s, s]`. The attention map is
/// computed once from the clean batch and held fixed; model parameters are
/// only read.
pub fn attack(x: &Tensor, labels: &[usize], model: &Model, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(x, labels, model)?;
    if cfg.is_identity() {
        return Ok(x.clone());
    }
    let a = model.spatial_attention(x)?;
    let mask = background_mask(&a, cfg.mask_form);
    attack_with_mask(x, labels, model, cfg, &mask)
}

/// [`attack`] with a caller-supplied mask.
pub fn attack_with_mask(
    x: &Tensor,
    labels: &[usize],
    model: &Model,
    cfg: &AttackConfig,
    mask: &BackgroundMask,
) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(x, labels, model)?;
    if mask.values().len() != x.len() {
        return Err(Error::Shape(format!(
            "mask of {} values for input of {} pixels",
            mask.values().len(),
            x.len()
        )));
    }
    let mut delta = vec![0.0; x.len()];
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    for _ in 0..cfg.iterations {
        let current = apply_perturbation(x, mask, &delta);
        let mut tape = Tape::new();
        let input = tape.leaf(current, true);
        let fwd = model.forward(&mut tape, input, false)?;
        let loss = cross_entropy_on_tape(&mut tape, fwd.logits, labels)?;
        tape.backward_scalar(loss)?;
        let grad = tape
            .grad(input)
            .ok_or_else(|| Error::Numeric("attack objective has no input gradient".into()))?;
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite input gradient {bad}")));
        }
        for (d, &g) in delta.iter_mut().zip(grad) {
            let sign = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *d = (*d + cfg.step_size * sign).clamp(-cfg.epsilon, cfg.epsilon);
        }
    }
    Ok(apply_perturbation(x, mask, &delta))
}

/// A labelled mini-batch of images `[N, 1, s, s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Extra penalty added to the training loss, evaluated on raw parameters.
pub trait Regularizer {
    /// Adds the penalty's gradient to `grads` and returns its value.
    fn apply(&mut self, params: &[Tensor], grads: &mut [Vec<f64>]) -> Result<f64>;
}

pub struct NoPenalty;

impl Regularizer for NoPenalty {
    fn apply(&mut self, _: &[Tensor], _: &mut [Vec<f64>]) -> Result<f64> {
        Ok(0.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochReport {
    pub batches: usize,
    pub samples: usize,
    /// Sample-weighted mean of the training loss on attacked inputs.
    pub mean_loss: f64,
}

/// One associative update: attention on clean `x`, attack, then a training
/// step on `x'` alone. Returns the loss on `x'` before the update.
pub fn associative_step(
    model: &mut Model,
    batch: &Batch,
    cfg: &AttackConfig,
    opt: &mut Sgd,
    penalty: &mut dyn Regularizer,
) -> Result<f64> {
    let attacked = attack(&batch.images, &batch.labels, model, cfg)?;
    let mut tape = Tape::new();
    let input = tape.constant(attacked);
    let fwd = model.forward(&mut tape, input, true)?;
    let loss = bce_on_tape(&mut tape, fwd.scores, &batch.labels)?;
    tape.backward_scalar(loss)?;
    let mut grads = Vec::with_capacity(fwd.params.len());
    for &p in &fwd.params {
        let g = tape
            .take_grad(p)
            .unwrap_or_else(|| vec![0.0; tape.value(p).len()]);
        grads.push(g);
    }
    let extra = penalty.apply(model.params(), &mut grads)?;
    for g in &grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter gradient".into()));
        }
    }
    let value = tape.value(loss).data()[0] + extra;
    opt.step(model.params_mut(), &grads)?;
    Ok(value)
}

/// Runs [`associative_step`] over every batch in order.
pub fn associative_epoch<'a>(
    model: &mut Model,
    batches: impl IntoIterator<Item = &'a Batch>,
    cfg: &AttackConfig,
    opt: &mut Sgd,
    penalty: &mut dyn Regularizer,
) -> Result<EpochReport> {
    let mut report = EpochReport::default();
    let mut weighted = 0.0;
    for batch in batches {
        if batch.is_empty() {
            continue;
        }
        let loss = associative_step(model, batch, cfg, opt, penalty)?;
        weighted += loss * batch.len() as f64;
        report.batches += 1;
        report.samples += batch.len();
    }
    if report.samples > 0 {
        report.mean_loss = weighted / report.samples as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchKind, ArchSpec};
    use crate::rng;
    use rand::Rng;

    fn tiny() -> ArchSpec {
        ArchSpec {
            kind: ArchKind::Mlp2,
            side: 5,
            hidden: 4,
            attention: true,
        }
    }

    fn batch(n: usize, side: usize, classes: usize, seed: u64) -> Batch {
        let mut r = rng::rng(seed, &[]);
        let data = (0..n * side * side)
            .map(|_| r.gen_range(0.0..1.0))
            .collect();
        Batch {
            images: Tensor::new(vec![n, 1, side, side], data).unwrap(),
            labels: (0..n).map(|_| r.gen_range(0..classes)).collect(),
        }
    }

    #[test]
    fn mask_forms_at_half() {
        assert_eq!(MaskForm::OneMinusA.apply(0.5), 0.5);
        assert_eq!(MaskForm::OneMinusASquared.apply(0.5), 0.75);
        assert_eq!(MaskForm::InverseA.apply(0.5), 2.0);
        assert_eq!(MaskForm::InverseA.apply(1e-6), INVERSE_MASK_CAP);
        assert_eq!(MaskForm::None.apply(0.3), 0.0);
    }

    #[test]
    fn mask_form_names_round_trip() {
        for m in MaskForm::ALL {
            assert_eq!(m.as_str().parse::<MaskForm>().unwrap(), m);
        }
        assert!("1/a".parse::<MaskForm>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::default();
        cfg.validate().unwrap();
        cfg.iterations = 0;
        assert!(matches!(cfg.validate(), Err(Error::Precondition(_))));
        cfg.iterations = 1;
        cfg.step_size = 1.0;
        assert!(cfg.validate().is_err());
        cfg.epsilon = 0.0;
        cfg.validate().unwrap();
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let m = Model::build(tiny(), 3, 1).unwrap();
        let b = batch(4, 5, 3, 2);
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        };
        assert_eq!(attack(&b.images, &b.labels, &m, &cfg).unwrap(), b.images);
    }

    #[test]
    fn zero_mask_is_identity() {
        let m = Model::build(tiny(), 3, 1).unwrap();
        let b = batch(4, 5, 3, 2);
        let mask = BackgroundMask::from_values(MaskForm::OneMinusA, 5, vec![0.0; 100]).unwrap();
        let out =
            attack_with_mask(&b.images, &b.labels, &m, &AttackConfig::default(), &mask).unwrap();
        assert_eq!(out, b.images);
    }

    #[test]
    fn attack_leaves_model_untouched() {
        let m = Model::build(tiny(), 3, 1).unwrap();
        let before = m.snapshot();
        let b = batch(4, 5, 3, 2);
        attack(&b.images, &b.labels, &m, &AttackConfig::default()).unwrap();
        assert_eq!(m.snapshot(), before);
    }

    #[test]
    fn bounded_add_never_overshoots() {
        let mut r = rng::rng(3, &[]);
        for _ in 0..10_000 {
            let x: f64 = r.gen_range(0.0..1.0);
            let v: f64 = r.gen_range(-0.05..0.05);
            let y = bounded_add(x, v);
            assert!((y - x).abs() <= v.abs());
        }
    }

    #[test]
    fn labels_outside_head_rejected() {
        let m = Model::build(tiny(), 2, 1).unwrap();
        let mut b = batch(2, 5, 2, 2);
        b.labels[0] = 2;
        assert!(attack(&b.images, &b.labels, &m, &AttackConfig::default()).is_err());
    }

    #[test]
    fn zero_epsilon_epoch_matches_clean_training() {
        let m0 = Model::build(tiny(), 3, 4).unwrap();
        let batches: Vec<Batch> = (0..3).map(|k| batch(6, 5, 3, 10 + k)).collect();
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        };
        let mut a = m0.clone();
        associative_epoch(
            &mut a,
            &batches,
            &cfg,
            &mut Sgd::new(0.1, 0.9, 0.0),
            &mut NoPenalty,
        )
        .unwrap();

        // plain epoch on clean inputs
        let mut b = m0.clone();
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        for bt in &batches {
            let mut tape = Tape::new();
            let x = tape.constant(bt.images.clone());
            let fwd = b.forward(&mut tape, x, true).unwrap();
            let loss = bce_on_tape(&mut tape, fwd.scores, &bt.labels).unwrap();
            tape.backward_scalar(loss).unwrap();
            let grads: Vec<Vec<f64>> = fwd
                .params
                .iter()
                .map(|&p| tape.grad(p).unwrap().to_vec())
                .collect();
            opt.step(b.params_mut(), &grads).unwrap();
        }
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn associative_epoch_is_deterministic() {
        let m0 = Model::build(tiny(), 3, 4).unwrap();
        let batches = vec![batch(8, 5, 3, 21)];
        let run = || {
            let mut m = m0.clone();
            associative_epoch(
                &mut m,
                &batches,
                &AttackConfig::default(),
                &mut Sgd::new(0.1, 0.9, 0.0),
                &mut NoPenalty,
            )
            .unwrap();
            m.snapshot()
        };
        assert_eq!(run(), run());
    }
}
