//! Central-difference gradient checking. Always runs in f64; analytic
//! backward passes are compared element by element against numeric
//! derivatives of a scalar probe loss.

use crate::error::Result;
use crate::tensor::Tensor;

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-4;

/// Max relative error of `analytic` gradients against central differences of
/// the scalar function `f`, over every element of every input:
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F, G>(inputs: &[Tensor<f64>], f: F, analytic: G, h: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
    G: Fn(&[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>,
{
    let grads = analytic(inputs)?;
    assert_eq!(grads.len(), inputs.len(), "one gradient per input");
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, grad) in grads.iter().enumerate() {
        assert_eq!(
            grad.shape(),
            inputs[ti].shape(),
            "gradient shape must match input shape"
        );
        for ei in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let up = f(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let down = f(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[ei];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Probe loss `sum(g * f(x))` turning a tensor-valued op into a scalar one so
/// that its backward (evaluated at upstream `g`) can be checked.
pub fn weighted_sum(out: &Tensor<f64>, g: &Tensor<f64>) -> f64 {
    out.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum()
}

/// One line of the gradient-suite report.
#[derive(Debug, Clone)]
pub struct GradCheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}
