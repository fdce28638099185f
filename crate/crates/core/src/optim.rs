use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if g.len() != p.len() || v.len() != p.len() {
                return Err(Error::Shape(format!(
                    "gradient of length {} for parameter of length {}",
                    g.len(),
                    p.len()
                )));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                let d = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Step decay: the rate is multiplied by `factor` at each milestone epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    /// 1-based epochs after which the decay applies.
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    /// Rate in effect during 1-based `epoch`.
    pub fn at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.initial * self.factor.powi(drops as i32)
    }

    /// Rate after every milestone has passed.
    pub fn final_rate(&self) -> f64 {
        self.initial * self.factor.powi(self.milestones.len() as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0]).unwrap()];
        let mut opt = Sgd::new(0.5, 0.0, 0.0);
        opt.step(&mut p, &[vec![2.0, 2.0]]).unwrap();
        assert_eq!(p[0].data(), &[0.0, -3.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = vec![Tensor::vector(vec![0.0]).unwrap()];
        let mut opt = Sgd::new(1.0, 0.9, 0.0);
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        assert!((p[0].data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn mnist_schedule_halves() {
        let s = LrSchedule {
            initial: 0.1,
            factor: 0.5,
            milestones: vec![5, 10, 15],
        };
        assert_eq!(s.at(1), 0.1);
        assert_eq!(s.at(5), 0.1);
        assert_eq!(s.at(6), 0.05);
        assert_eq!(s.at(16), 0.0125);
        assert_eq!(s.final_rate(), 0.0125);
    }
}
