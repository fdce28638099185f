//! Training and attack objectives.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scores are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-12;

/// One-hot targets `[labels.len(), classes]`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::Shape("empty label batch".into()));
    }
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Precondition(format!(
                "label {y} outside a head of {classes} classes"
            )));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

fn check_scores(scores: &Tensor, labels: &[usize]) -> Result<usize> {
    match *scores.shape() {
        [n, c] if n == labels.len() => Ok(c),
        ref s => Err(Error::Shape(format!(
            "scores of shape {s:?} for {} labels",
            labels.len()
        ))),
    }
}

/// Multi-label binary cross-entropy against one-hot targets, summed over
/// classes and averaged over samples.
pub fn bce_loss(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let classes = check_scores(scores, labels)?;
    let targets = one_hot(labels, classes)?;
    let mut total = 0.0;
    for (p, y) in scores.data().iter().zip(targets.data()) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(-total / labels.len() as f64)
}

/// [`bce_loss`] recorded on a tape.
pub fn bce_on_tape(tape: &mut Tape, scores: Var, labels: &[usize]) -> Result<Var> {
    let classes = check_scores(tape.value(scores), labels)?;
    let targets = one_hot(labels, classes)?;
    let complement = targets.map(|y| 1.0 - y);
    let y = tape.constant(targets);
    let not_y = tape.constant(complement);
    let p = tape.clamp(scores, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let log_p = tape.log(p)?;
    let q = tape.affine(p, -1.0, 1.0);
    let log_q = tape.log(q)?;
    let pos = tape.mul(log_p, y)?;
    let neg = tape.mul(log_q, not_y)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.affine(total, -1.0 / labels.len() as f64, 0.0))
}

/// Softmax cross-entropy of raw logits, averaged over samples.
pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = check_scores(tape.value(logits), labels)?;
    let y = tape.constant(one_hot(labels, classes)?);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, y)?;
    let total = tape.sum(picked);
    Ok(tape.affine(total, -1.0 / labels.len() as f64, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_score_gives_ln2() {
        let s = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        assert!((bce_loss(&s, &[0]).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let s = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(bce_loss(&s, &[0, 2]).unwrap() <= 1e-11);
    }

    #[test]
    fn tape_matches_direct() {
        let s = Tensor::new(vec![2, 3], vec![0.1, 0.8, 0.3, 0.6, 0.2, 0.9]).unwrap();
        let labels = [1, 0];
        let mut tape = Tape::new();
        let v = tape.constant(s.clone());
        let l = bce_on_tape(&mut tape, v, &labels).unwrap();
        let direct = bce_loss(&s, &labels).unwrap();
        assert!((tape.value(l).data()[0] - direct).abs() < 1e-15);
    }

    #[test]
    fn bad_labels_rejected() {
        assert!(one_hot(&[3], 3).is_err());
        let s = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(bce_loss(&s, &[0, 1]).is_err());
    }
}
