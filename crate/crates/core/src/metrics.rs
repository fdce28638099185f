//! Accuracy matrix and the summary statistics derived from it. Task indices
//! are 1-based throughout.

use crate::error::{Error, Result};

/// `R[i][j]`: accuracy on task `j` after training task `i`, plus the
/// accuracies `b[j]` of an untrained model.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    tasks: usize,
    values: Vec<Option<f64>>,
    baselines: Option<Vec<f64>>,
}

fn check_unit(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain(format!("accuracy {v} outside [0, 1]")))
    }
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::Config(
                "an accuracy matrix needs at least one task".into(),
            ));
        }
        Ok(Self {
            tasks,
            values: vec![None; tasks * tasks],
            baselines: None,
        })
    }

    /// Builds a fully populated matrix from rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len())?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != rows.len() {
                return Err(Error::Shape(format!(
                    "row {} has {} entries",
                    i + 1,
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(i + 1, j + 1, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    fn slot(&self, i: usize, j: usize) -> Result<usize> {
        if i == 0 || j == 0 || i > self.tasks || j > self.tasks {
            return Err(Error::Shape(format!(
                "entry ({i}, {j}) outside a {0}x{0} matrix",
                self.tasks
            )));
        }
        Ok((i - 1) * self.tasks + j - 1)
    }

    pub fn set(&mut self, i: usize, j: usize, accuracy: f64) -> Result<()> {
        check_unit(accuracy)?;
        let k = self.slot(i, j)?;
        self.values[k] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.slot(i, j).ok().and_then(|k| self.values[k])
    }

    fn require(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j)
            .ok_or_else(|| Error::State(format!("R[{i}][{j}] has not been measured")))
    }

    pub fn set_baselines(&mut self, b: Vec<f64>) -> Result<()> {
        if b.len() != self.tasks {
            return Err(Error::Shape(format!(
                "{} baselines for {} tasks",
                b.len(),
                self.tasks
            )));
        }
        for &v in &b {
            check_unit(v)?;
        }
        self.baselines = Some(b);
        Ok(())
    }

    pub fn baselines(&self) -> Option<&[f64]> {
        self.baselines.as_deref()
    }

    /// Mean of `R[t][1..=t]`.
    pub fn average_accuracy(&self, t: usize) -> Result<f64> {
        self.slot(t, t)?;
        let mut sum = 0.0;
        for j in 1..=t {
            sum += self.require(t, j)?;
        }
        Ok(sum / t as f64)
    }

    /// Backward transfer: mean of `R[T][i] - R[i][i]` over `i < T`.
    pub fn bwt(&self) -> Result<f64> {
        let t = self.tasks;
        if t < 2 {
            return Err(Error::UndefinedMetric(
                "BWT needs at least two tasks".into(),
            ));
        }
        let mut sum = 0.0;
        for i in 1..t {
            sum += self.require(t, i)? - self.require(i, i)?;
        }
        Ok(sum / (t - 1) as f64)
    }

    /// Forward transfer: mean of `R[i-1][i] - b[i]` over `i >= 2`.
    pub fn fwt(&self) -> Result<f64> {
        let t = self.tasks;
        if t < 2 {
            return Err(Error::UndefinedMetric(
                "FWT needs at least two tasks".into(),
            ));
        }
        let b = self
            .baselines
            .as_ref()
            .ok_or_else(|| Error::State("FWT needs baseline accuracies".into()))?;
        let mut sum = 0.0;
        for i in 2..=t {
            sum += self.require(i - 1, i)? - b[i - 1];
        }
        Ok(sum / (t - 1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_task_average() {
        let mut m = AccuracyMatrix::new(1).unwrap();
        m.set(1, 1, 0.9).unwrap();
        assert_eq!(m.average_accuracy(1).unwrap(), 0.9);
        assert!(matches!(m.bwt(), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn second_row_average() {
        let m = AccuracyMatrix::from_rows(&[vec![1.0, 0.5], vec![0.8, 1.0]]).unwrap();
        assert!((m.average_accuracy(2).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn bwt_hand_arithmetic() {
        let m = AccuracyMatrix::from_rows(&[vec![1.0, 0.5], vec![0.9, 1.0]]).unwrap();
        assert!((m.bwt().unwrap() + 0.1).abs() < 1e-12);
        let flat = AccuracyMatrix::from_rows(&[vec![0.7, 0.0], vec![0.7, 0.9]]).unwrap();
        assert_eq!(flat.bwt().unwrap(), 0.0);
    }

    #[test]
    fn fwt_hand_arithmetic() {
        let mut m = AccuracyMatrix::from_rows(&[vec![1.0, 0.6], vec![0.9, 1.0]]).unwrap();
        assert!(matches!(m.fwt(), Err(Error::State(_))));
        m.set_baselines(vec![0.5, 0.5]).unwrap();
        assert!((m.fwt().unwrap() - 0.1).abs() < 1e-12);
        m.set_baselines(vec![0.5, 0.6]).unwrap();
        assert_eq!(m.fwt().unwrap(), 0.0);
    }

    #[test]
    fn unpopulated_row_is_state_error() {
        let mut m = AccuracyMatrix::new(3).unwrap();
        m.set(2, 1, 0.5).unwrap();
        assert!(matches!(m.average_accuracy(2), Err(Error::State(_))));
        assert!(matches!(m.average_accuracy(4), Err(Error::Shape(_))));
        assert!(m.set(1, 1, 1.5).is_err());
    }
}
