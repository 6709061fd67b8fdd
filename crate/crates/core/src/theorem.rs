//! Local-variance comparison between full-rank and rank-1 multiplicative
//! weight perturbations of a fully connected score function.
//!
//! The score is `f = aᵀ x⁽ᴴ⁾` with `x⁽ʰ⁾ = √(c/M) · σ(W⁽ʰ⁾ x⁽ʰ⁻¹⁾)`. A full-rank
//! perturbation `ΔW` of layer `h` has covariance
//! `E[ΔW_ij ΔW_kl] = W_ij Σ_jl W_kl`; the rank-1 perturbation reparameterizes
//! the layer as `W ∘ r sᵀ` with `r = 1` and perturbs `s` around `1` with
//! covariance `Σ`. Both second-order fluctuation terms are computed exactly
//! from autodiff Hessians:
//!
//! * `lhs = trace(H_W · Cov_W)`
//! * `rhs = trace(H_s · Σ)`

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::hessian::{hessian, trace_of_product};
use crate::autodiff::{Graph, Real, ScalarFunction, Var};
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::tensor::Tensor;

/// Denominator floor for relative discrepancies.
pub const REL_FLOOR: f64 = 1e-12;
/// Pass threshold for the maximum relative discrepancy.
pub const PASS_TOLERANCE: f64 = 1e-6;

/// A square fully connected network of width `M` and depth `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcNetSpec {
    pub width: usize,
    pub activation: Activation,
    pub c_sigma: f64,
    /// Output weights, length `M`.
    pub a: Vec<f64>,
    /// `H` kernels, each `[M, M]`.
    pub weights: Vec<Tensor>,
}

impl FcNetSpec {
    /// Rejects activations whose second derivative vanishes, since both
    /// sides are then identically zero and the comparison is vacuous.
    pub fn new(activation: Activation, c_sigma: f64, a: Vec<f64>, weights: Vec<Tensor>) -> Result<Self> {
        match activation {
            Activation::Tanh | Activation::Softplus => {}
            other => {
                return Err(Error::InvalidArgument(format!(
                    "activation `{}` has no nonzero second derivative path; use tanh or softplus",
                    other.name()
                )))
            }
        }
        let m = a.len();
        if m == 0 || weights.is_empty() {
            return Err(Error::InvalidArgument("network needs width and depth of at least 1".into()));
        }
        if !(c_sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("c_sigma must be positive, got {c_sigma}")));
        }
        for w in &weights {
            if w.shape() != [m, m] {
                return Err(Error::Shape {
                    op: "FcNetSpec",
                    lhs: vec![m, m],
                    rhs: w.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            width: m,
            activation,
            c_sigma,
            a,
            weights,
        })
    }

    /// Standard normal kernels and output weights.
    pub fn random<R: Rng + ?Sized>(width: usize, depth: usize, activation: Activation, c_sigma: f64, rng: &mut R) -> Result<Self> {
        let a = normal_vec(width, rng);
        let weights = (0..depth)
            .map(|_| Tensor::new(vec![width, width], normal_vec(width * width, rng)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(activation, c_sigma, a, weights)
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Plain evaluation of the score at `x`.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        let f = Score { net: self, x, layer: 0, wrt: Wrt::None };
        let mut g = Graph::<f64>::new();
        let dummy = g.param(Tensor::scalar(0.0));
        let out = f.eval(&mut g, dummy)?;
        Ok(g.value(out).data()[0])
    }

    fn check(&self, x: &[f64], layer: usize) -> Result<()> {
        if x.len() != self.width {
            return Err(Error::Shape {
                op: "theorem input",
                lhs: vec![self.width],
                rhs: vec![x.len()],
            });
        }
        if layer == 0 || layer > self.depth() {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} outside 1..={}",
                self.depth()
            )));
        }
        Ok(())
    }
}

fn normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Clone, Copy)]
enum Wrt {
    None,
    Kernel,
    S,
}

/// The score as a function of one layer's kernel or rank-1 input factor.
struct Score<'a> {
    net: &'a FcNetSpec,
    x: &'a [f64],
    /// One-based layer index; ignored for `Wrt::None`.
    layer: usize,
    wrt: Wrt,
}

impl ScalarFunction for Score<'_> {
    fn eval<T: Real>(&self, g: &mut Graph<T>, param: Var) -> Result<Var> {
        let m = self.net.width;
        let scale = (self.net.c_sigma / m as f64).sqrt();
        let mut h = g.constant_f64(&Tensor::new(vec![1, m], self.x.to_vec())?);
        for (i, w) in self.net.weights.iter().enumerate() {
            let here = i + 1 == self.layer;
            let kernel = match (self.wrt, here) {
                (Wrt::Kernel, true) => param,
                (Wrt::S, true) => {
                    let w = g.constant_f64(w);
                    g.mul(w, param)?
                }
                _ => g.constant_f64(w),
            };
            let kt = g.transpose(kernel)?;
            let z = g.matmul(h, kt)?;
            let act = match self.net.activation {
                Activation::Softplus => g.softplus(z),
                _ => g.tanh(z),
            };
            h = g.mul_scalar(act, scale);
        }
        let a = g.constant_f64(&Tensor::new(vec![1, m], self.net.a.clone())?);
        let prod = g.mul(h, a)?;
        Ok(g.sum(prod))
    }
}

/// Hessian of the score with respect to `vec(W⁽ʰ⁾)` (row-major), `[M², M²]`.
pub fn kernel_hessian(net: &FcNetSpec, x: &[f64], layer: usize) -> Result<Tensor> {
    net.check(x, layer)?;
    let f = Score { net, x, layer, wrt: Wrt::Kernel };
    hessian(&f, &net.weights[layer - 1])
}

/// Hessian of the score with respect to `s⁽ʰ⁾` at `s = 1`, `[M, M]`.
pub fn factor_hessian(net: &FcNetSpec, x: &[f64], layer: usize) -> Result<Tensor> {
    net.check(x, layer)?;
    let f = Score { net, x, layer, wrt: Wrt::S };
    hessian(&f, &Tensor::full(&[net.width], 1.0))
}

/// Validates `sigma` as symmetric PSD and returns its lower Cholesky factor
/// (computed with a `1e-10` diagonal jitter).
pub fn psd_cholesky(sigma: &Tensor) -> Result<Tensor> {
    let m = match sigma.shape() {
        [a, b] if a == b => *a,
        s => {
            return Err(Error::Shape {
                op: "covariance",
                lhs: vec![],
                rhs: s.to_vec(),
            })
        }
    };
    let s = sigma.data();
    for i in 0..m {
        for j in 0..i {
            if (s[i * m + j] - s[j * m + i]).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("covariance is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut l = vec![0.0; m * m];
    for j in 0..m {
        let mut d = s[j * m + j] + 1e-10;
        for p in 0..j {
            d -= l[j * m + p] * l[j * m + p];
        }
        if d < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "covariance is not positive semidefinite (pivot {j} is {d:e})"
            )));
        }
        let d = d.sqrt();
        l[j * m + j] = d;
        for i in j + 1..m {
            let mut v = s[i * m + j];
            for p in 0..j {
                v -= l[i * m + p] * l[j * m + p];
            }
            l[i * m + j] = if d > 0.0 { v / d } else { 0.0 };
        }
    }
    Tensor::new(vec![m, m], l)
}

/// `Cov[(i,j),(k,l)] = W_ij Σ_jl W_kl` over `vec(W)`.
pub fn kernel_covariance(w: &Tensor, sigma: &Tensor) -> Tensor {
    let m = sigma.shape()[0];
    let n = w.shape()[0];
    let (wd, sd) = (w.data(), sigma.data());
    let size = n * m;
    let mut cov = vec![0.0; size * size];
    for i in 0..n {
        for j in 0..m {
            for k in 0..n {
                for l in 0..m {
                    cov[(i * m + j) * size + k * m + l] = wd[i * m + j] * sd[j * m + l] * wd[k * m + l];
                }
            }
        }
    }
    Tensor::new(vec![size, size], cov).expect("square covariance")
}

/// Full-rank side: `trace(H_W · Cov_W)`.
pub fn lhs_fullrank(net: &FcNetSpec, x: &[f64], layer: usize, sigma: &Tensor) -> Result<f64> {
    check_sigma(net, sigma)?;
    let h = kernel_hessian(net, x, layer)?;
    Ok(trace_of_product(&h, &kernel_covariance(&net.weights[layer - 1], sigma)))
}

/// Rank-1 side: `trace(H_s · Σ)`.
pub fn rhs_rank1(net: &FcNetSpec, x: &[f64], layer: usize, sigma: &Tensor) -> Result<f64> {
    check_sigma(net, sigma)?;
    let h = factor_hessian(net, x, layer)?;
    Ok(trace_of_product(&h, sigma))
}

fn check_sigma(net: &FcNetSpec, sigma: &Tensor) -> Result<()> {
    if sigma.shape() != [net.width, net.width] {
        return Err(Error::Shape {
            op: "covariance",
            lhs: vec![net.width, net.width],
            rhs: sigma.shape().to_vec(),
        });
    }
    psd_cholesky(sigma).map(|_| ())
}

/// Monte Carlo estimate of `E[vec(ΔW)ᵀ H_W vec(ΔW)]` with `ΔW = W diag(δ)`,
/// `δ ~ N(0, Σ)`. Returns `(mean, standard error)`.
pub fn lhs_monte_carlo<R: Rng + ?Sized>(
    net: &FcNetSpec,
    x: &[f64],
    layer: usize,
    sigma: &Tensor,
    draws: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if draws < 2 {
        return Err(Error::InvalidArgument("need at least 2 draws".into()));
    }
    check_sigma(net, sigma)?;
    let chol = psd_cholesky(sigma)?;
    let h = kernel_hessian(net, x, layer)?;
    let w = &net.weights[layer - 1];
    let m = net.width;
    let n = m * m;
    let (hd, wd, ld) = (h.data(), w.data(), chol.data());
    let mut delta = vec![0.0; n];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let z = normal_vec(m, rng);
        let d: Vec<f64> = (0..m).map(|j| (0..=j).map(|p| ld[j * m + p] * z[p]).sum()).collect();
        for i in 0..m {
            for j in 0..m {
                delta[i * m + j] = wd[i * m + j] * d[j];
            }
        }
        let mut q = 0.0;
        for (row, &di) in hd.chunks(n).zip(&delta) {
            q += di * row.iter().zip(&delta).map(|(a, b)| a * b).sum::<f64>();
        }
        sum += q;
        sum_sq += q * q;
    }
    let nf = draws as f64;
    let mean = sum / nf;
    let var = (sum_sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    Ok((mean, (var / nf).sqrt()))
}

/// `Σ = A Aᵀ / M` with standard normal `A`.
pub fn wishart<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Tensor {
    let a = normal_vec(m * m, rng);
    let mut s = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            s[i * m + j] = (0..m).map(|p| a[i * m + p] * a[j * m + p]).sum::<f64>() / m as f64;
        }
    }
    Tensor::new(vec![m, m], s).expect("square")
}

/// `|lhs − rhs| / max(min(|lhs|, |rhs|), REL_FLOOR)`.
pub fn relative_discrepancy(lhs: f64, rhs: f64) -> f64 {
    (lhs - rhs).abs() / lhs.abs().min(rhs.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub c_sigma: f64,
    pub trials: usize,
    pub data_points: usize,
    pub seed: u64,
    /// Multiplies the full-rank covariance; anything other than 1 is a
    /// negative control.
    pub lhs_scale: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            width: 3,
            depth: 2,
            activation: Activation::Tanh,
            c_sigma: 2.0,
            trials: 10,
            data_points: 5,
            seed: 0,
            lhs_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub layer: usize,
    pub point: usize,
    pub trial: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub rel_discrepancy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremReport {
    pub width: usize,
    pub depth: usize,
    pub activation: String,
    pub c_sigma: f64,
    pub trials: usize,
    pub data_points: usize,
    pub seed: u64,
    pub lhs_scale: f64,
    pub max_rel_discrepancy: f64,
    pub pass: bool,
    pub cells: Vec<Cell>,
}

/// Compares both sides for every layer, data point and Wishart `Σ` draw.
/// Hessians are computed once per (layer, point) and reused across draws.
pub fn verify(cfg: &VerifyConfig) -> Result<TheoremReport> {
    use rand::SeedableRng;
    if cfg.trials == 0 || cfg.data_points == 0 {
        return Err(Error::InvalidArgument("trials and data_points must be positive".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = FcNetSpec::random(cfg.width, cfg.depth, cfg.activation, cfg.c_sigma, &mut rng)?;
    let points: Vec<Vec<f64>> = (0..cfg.data_points).map(|_| normal_vec(cfg.width, &mut rng)).collect();
    let sigmas: Vec<Tensor> = (0..cfg.trials).map(|_| wishart(cfg.width, &mut rng)).collect();
    let mut cells = Vec::new();
    for layer in 1..=cfg.depth {
        for (p, x) in points.iter().enumerate() {
            let hw = kernel_hessian(&net, x, layer)?;
            let hs = factor_hessian(&net, x, layer)?;
            for (t, sigma) in sigmas.iter().enumerate() {
                psd_cholesky(sigma)?;
                let cov = kernel_covariance(&net.weights[layer - 1], sigma);
                let lhs = cfg.lhs_scale * trace_of_product(&hw, &cov);
                let rhs = trace_of_product(&hs, sigma);
                cells.push(Cell {
                    layer,
                    point: p,
                    trial: t,
                    lhs,
                    rhs,
                    rel_discrepancy: relative_discrepancy(lhs, rhs),
                });
            }
        }
    }
    let max = cells.iter().map(|c| c.rel_discrepancy).fold(0.0, f64::max);
    Ok(TheoremReport {
        width: cfg.width,
        depth: cfg.depth,
        activation: cfg.activation.name().into(),
        c_sigma: cfg.c_sigma,
        trials: cfg.trials,
        data_points: cfg.data_points,
        seed: cfg.seed,
        lhs_scale: cfg.lhs_scale,
        max_rel_discrepancy: max,
        pass: max < PASS_TOLERANCE,
        cells,
    })
}
