//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::nn::Parameter;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Moments<S: Scalar> {
    pub m: Tensor<S>,
    pub v: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct Adam<S: Scalar> {
    pub cfg: OptimConfig,
    /// Completed update steps (bias correction uses step + 1 during an
    /// update).
    pub step: u64,
    pub moments: BTreeMap<String, Moments<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: OptimConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Mark the beginning of an update; all `apply` calls until the next
    /// `begin_step` share this step's bias correction.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Bias-corrected update of a single parameter from its accumulated
    /// gradient. Rejects non-finite gradients by name.
    pub fn apply(&mut self, p: &mut Parameter<S>) -> Result<()> {
        if !p.grad.all_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of {}", p.name),
            });
        }
        let lr = S::from_f64_c(self.cfg.lr);
        let b1 = S::from_f64_c(self.cfg.beta1);
        let b2 = S::from_f64_c(self.cfg.beta2);
        let eps = S::from_f64_c(self.cfg.eps);
        let t = self.step.max(1) as i32;
        let bc1 = S::one() - S::from_f64_c(self.cfg.beta1.powi(t));
        let bc2 = S::one() - S::from_f64_c(self.cfg.beta2.powi(t));

        let entry = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(p.value.shape()),
            v: Tensor::zeros(p.value.shape()),
        });
        if entry.m.shape() != p.value.shape() {
            return Err(Error::shape(
                format!("{:?} (accumulator for {})", entry.m.shape(), p.name),
                format!("{:?}", p.value.shape()),
            ));
        }
        let one = S::one();
        for i in 0..p.value.len() {
            let g = p.grad.data()[i];
            let m = b1 * entry.m.data()[i] + (one - b1) * g;
            let v = b2 * entry.v.data()[i] + (one - b2) * g * g;
            entry.m.data_mut()[i] = m;
            entry.v.data_mut()[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            p.value.data_mut()[i] = p.value.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, vals: &[f64]) -> Parameter<f64> {
        Parameter::new(name, Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = Adam::<f64>::new(OptimConfig::default());
        let mut p = param("w", &[1.0, -2.0, 0.5]);
        adam.begin_step();
        adam.apply(&mut p).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let cfg = OptimConfig::default();
        let mut adam = Adam::<f64>::new(cfg);
        let mut p = param("w", &[0.7]);
        let g = 0.31;
        p.grad.data_mut()[0] = g;
        adam.begin_step();
        adam.apply(&mut p).unwrap();
        // first step: m_hat = g, v_hat = g^2 -> update = -lr * g / (|g| + eps)
        let expected = 0.7 - cfg.lr * g / (g.abs() + cfg.eps);
        assert!((p.value.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut adam = Adam::<f64>::new(OptimConfig::default());
            let mut p = param("w", &[0.2, -0.4]);
            for k in 0..5 {
                p.grad.data_mut()[0] = 0.1 * (k as f64 + 1.0);
                p.grad.data_mut()[1] = -0.05;
                adam.begin_step();
                adam.apply(&mut p).unwrap();
            }
            (p.value.data().to_vec(), adam.step)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut adam = Adam::<f64>::new(OptimConfig::default());
        let mut p = param("w", &[1.0]);
        p.grad.data_mut()[0] = f64::NAN;
        adam.begin_step();
        let err = adam.apply(&mut p).unwrap_err();
        assert!(format!("{err}").contains("w"));
    }
}
