use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Adam hyperparameters. Moment decay and epsilon default to the usual
/// 0.9 / 0.999 / 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// First and second moment estimates for one parameter group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl Adam {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        })
    }

    /// Applies one bias-corrected update to `params` in place.
    pub fn step(&self, params: &mut [&mut Tensor], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if params.len() != grads.len() {
            return Err(invalid("parameter and gradient counts differ"));
        }
        if state.t == 0 && state.m.is_empty() {
            state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            state.v = state.m.clone();
        }
        if state.m.len() != params.len() {
            return Err(invalid("optimizer state belongs to a different parameter group"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || state.m[i].len() != p.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { param: i });
            }
        }
        state.t += 1;
        let t = state.t as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= self.learning_rate * mhat / (libm::sqrt(vhat) + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_once(param: f64, grad: f64, lr: f64, state: &mut AdamState) -> f64 {
        let mut p = Tensor::scalar(param);
        Adam::new(lr).unwrap().step(&mut [&mut p], &[&[grad]], state).unwrap();
        p.data()[0]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::default();
        assert_eq!(step_once(1.5, 0.0, 0.1, &mut s), 1.5);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        // m = 0.1, v = 0.001; mhat = 1, vhat = 1; step = 0.1 / (1 + 1e-8)
        let mut s = AdamState::default();
        let p = step_once(0.0, 1.0, 0.1, &mut s);
        assert!((p + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut s = AdamState::default();
        let p1 = step_once(0.0, 1.0, 0.1, &mut s);
        let mut t = Tensor::scalar(p1);
        Adam::new(0.1).unwrap().step(&mut [&mut t], &[&[1.0]], &mut s).unwrap();
        assert!(t.data()[0] < p1 && p1 < 0.0);
    }

    #[test]
    fn rejects_bad_learning_rate_and_nan_grads() {
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(-1.0).is_err());
        let mut p = Tensor::scalar(0.0);
        let mut s = AdamState::default();
        let r = Adam::new(0.1).unwrap().step(&mut [&mut p], &[&[f64::NAN]], &mut s);
        assert_eq!(r, Err(Error::NonFiniteGradient { param: 0 }));
        assert_eq!(p.data()[0], 0.0);
    }
}
