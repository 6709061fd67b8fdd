//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Per-coordinate relative error `|a − n| / max(|a|, |n|, floor)`.
///
/// The floor keeps coordinates whose true derivative is ~0 from reporting
/// huge relative errors out of pure roundoff; with `h = 1e-5` the central
/// difference carries absolute noise around `1e-10`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_gradient(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Compare `analytic` against central differences of `f` at `x`.
pub fn check_gradient(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    analytic: &Tensor,
    h: f64,
) -> Result<GradCheck> {
    let numeric = numeric_gradient(f, x, h)?;
    let mut res = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let rel = relative_error(a, n, 1e-6);
        res.max_abs_error = res.max_abs_error.max((a - n).abs());
        if rel > res.max_rel_error {
            res.max_rel_error = rel;
            res.worst_index = i;
        }
    }
    Ok(res)
}
