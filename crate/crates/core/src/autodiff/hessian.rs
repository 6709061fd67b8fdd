//! Exact second derivatives by forward-over-reverse differentiation.
//!
//! Column `j` of the Hessian is the tangent of the reverse-mode gradient when
//! the parameter is seeded with the unit tangent `e_j`.

use super::{Dual, Graph, Real, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar-valued function that can be recorded on a tape of any scalar
/// type. `param` is a leaf holding the differentiated tensor.
pub trait ScalarFunction {
    fn eval<T: Real>(&self, g: &mut Graph<T>, param: Var) -> Result<Var>;
}

/// Value and gradient of `f` at `param`.
pub fn gradient<F: ScalarFunction>(f: &F, param: &Tensor) -> Result<(f64, Tensor)> {
    let mut g = Graph::<f64>::new();
    let p = g.param(param.clone());
    let out = f.eval(&mut g, p)?;
    let grads = g.backward(out)?;
    Ok((g.value(out).data()[0], grads.wrt(p)))
}

/// Exact Hessian of `f` with respect to the flattened `param`, `n × n`.
pub fn hessian<F: ScalarFunction>(f: &F, param: &Tensor) -> Result<Tensor> {
    let n = param.len();
    let mut h = vec![0.0; n * n];
    for j in 0..n {
        let seeded: Vec<Dual> = param
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| Dual::new(v, if i == j { 1.0 } else { 0.0 }))
            .collect();
        let mut g = Graph::<Dual>::new();
        let p = g.param(Tensor::new(param.shape().to_vec(), seeded)?);
        let out = f.eval(&mut g, p)?;
        if let Some(op) = g.first_nonsmooth() {
            return Err(Error::NonSmooth(op));
        }
        let grad = g.backward(out)?.wrt(p);
        for (i, d) in grad.data().iter().enumerate() {
            h[i * n + j] = d.eps;
        }
    }
    Tensor::new(vec![n, n], h)
}

/// `trace(H · cov)`, i.e. `E[ΔᵀHΔ]` for a zero-mean perturbation `Δ` of the
/// flattened parameter with covariance `cov`.
pub fn hessian_quadratic_form<F: ScalarFunction>(
    f: &F,
    param: &Tensor,
    cov: &Tensor,
) -> Result<f64> {
    let n = param.len();
    if cov.shape() != [n, n] {
        return Err(Error::Shape {
            op: "hessian_quadratic_form",
            lhs: vec![n, n],
            rhs: cov.shape().to_vec(),
        });
    }
    let h = hessian(f, param)?;
    Ok(trace_of_product(&h, cov))
}

/// `trace(A·B)` for square matrices of equal size.
pub fn trace_of_product(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.shape()[0];
    let (ad, bd) = (a.data(), b.data());
    let mut s = 0.0;
    for i in 0..n {
        for k in 0..n {
            s += ad[i * n + k] * bd[k * n + i];
        }
    }
    s
}
