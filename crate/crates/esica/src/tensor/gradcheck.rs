//! Central-difference verification of reverse-mode gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Compare the analytic gradient of a scalar function against central
/// finite differences at every coordinate of `x`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = x.as_param();
    let out = f(&leaf)?;
    if out.numel() != 1 {
        return Err(Error::contract(
            "grad_check: function must return a scalar",
        ));
    }
    if !out.item()?.is_finite() {
        return Err(Error::runtime("grad_check: non-finite function value"));
    }
    let grads = out.backward()?;
    let analytic = grads
        .get(&leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let base = x.data().to_vec();
    let shape = x.shape().to_vec();
    let mut max_err = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::new(&shape, plus)?)?.item()?;
        let fm = f(&Tensor::new(&shape, minus)?)?.item()?;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(1.0);
        let err = (analytic[i] - numeric).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
