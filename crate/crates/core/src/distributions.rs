//! Priors and variational posteriors over rank-1 factor vectors.
//!
//! Every family is location-scale (LogGaussian in log space), so samples are
//! `loc + scale ∘ ε` for a family-specific standardized `ε`, which makes the
//! same noise tensor usable both for plain sampling and on the tape.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tail clamp for the inverse-CDF Cauchy transform.
pub const CAUCHY_U_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Gaussian,
    Cauchy,
    /// Positive-valued: `exp` of a Gaussian with the stored parameters.
    LogGaussian,
    /// Dirac mass at `loc`.
    Point,
}

impl Family {
    pub fn is_point(self) -> bool {
        self == Family::Point
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "normal",
            Family::Cauchy => "cauchy",
            Family::LogGaussian => "log_normal",
            Family::Point => "point",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" | "gaussian" | "trainable_normal" => Ok(Family::Gaussian),
            "cauchy" | "trainable_cauchy" => Ok(Family::Cauchy),
            "log_normal" | "log_gaussian" | "trainable_log_normal" => Ok(Family::LogGaussian),
            "point" | "deterministic" => Ok(Family::Point),
            other => Err(Error::Config(format!("unknown distribution family `{other}`"))),
        }
    }
}

/// `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    Real::softplus(x)
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// A fully factorized distribution over a vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleDistribution {
    family: Family,
    loc: Vec<f64>,
    scale: Option<Vec<f64>>,
}

impl ScaleDistribution {
    pub fn new(family: Family, loc: Vec<f64>, scale: Option<Vec<f64>>) -> Result<Self> {
        match (&scale, family) {
            (None, Family::Point) => {}
            (Some(_), Family::Point) => {
                return Err(Error::Distribution("point mass takes no scale".into()))
            }
            (None, _) => return Err(Error::Distribution(format!("{family:?} needs a scale"))),
            (Some(s), _) => {
                if s.len() != loc.len() {
                    return Err(Error::Distribution(format!(
                        "loc has {} entries but scale has {}",
                        loc.len(),
                        s.len()
                    )));
                }
                if let Some(bad) = s.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::Distribution(format!("nonpositive scale {bad}")));
                }
            }
        }
        Ok(Self { family, loc, scale })
    }

    pub fn gaussian(loc: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        Self::new(Family::Gaussian, loc, Some(scale))
    }

    pub fn cauchy(loc: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        Self::new(Family::Cauchy, loc, Some(scale))
    }

    pub fn log_gaussian(loc: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        Self::new(Family::LogGaussian, loc, Some(scale))
    }

    pub fn point(loc: Vec<f64>) -> Self {
        Self {
            family: Family::Point,
            loc,
            scale: None,
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn loc(&self) -> &[f64] {
        &self.loc
    }

    pub fn scale(&self) -> Option<&[f64]> {
        self.scale.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    /// One reparameterized draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let Some(scale) = &self.scale else {
            return self.loc.clone();
        };
        let eps = standard_noise_vec(self.family, self.dim(), rng);
        let z = self.loc.iter().zip(scale).zip(eps).map(|((m, s), e)| m + s * e);
        match self.family {
            Family::LogGaussian => z.map(f64::exp).collect(),
            _ => z.collect(),
        }
    }

    /// Sum of per-coordinate log densities. Undefined for point masses.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let Some(scale) = &self.scale else {
            return Err(Error::Distribution("point mass has no density".into()));
        };
        if x.len() != self.dim() {
            return Err(Error::Distribution("dimension mismatch".into()));
        }
        let mut lp = 0.0;
        for ((&xi, &m), &s) in x.iter().zip(&self.loc).zip(scale) {
            lp += match self.family {
                Family::Gaussian => normal_log_pdf(xi, m, s),
                Family::Cauchy => {
                    let z = (xi - m) / s;
                    -(PI * s * (1.0 + z * z)).ln()
                }
                Family::LogGaussian => {
                    if xi <= 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        normal_log_pdf(xi.ln(), m, s) - xi.ln()
                    }
                }
                Family::Point => unreachable!(),
            };
        }
        Ok(lp)
    }
}

fn normal_log_pdf(x: f64, m: f64, s: f64) -> f64 {
    let z = (x - m) / s;
    -0.5 * (2.0 * PI).ln() - s.ln() - 0.5 * z * z
}

/// Standardized noise for one draw of `dim` coordinates.
fn standard_noise_vec<R: Rng + ?Sized>(family: Family, dim: usize, rng: &mut R) -> Vec<f64> {
    match family {
        Family::Gaussian | Family::LogGaussian => {
            (0..dim).map(|_| StandardNormal.sample(rng)).collect()
        }
        Family::Cauchy => (0..dim)
            .map(|_| {
                let u: f64 = rng.gen::<f64>().clamp(CAUCHY_U_EPS, 1.0 - CAUCHY_U_EPS);
                (PI * (u - 0.5)).tan()
            })
            .collect(),
        Family::Point => vec![0.0; dim],
    }
}

/// Standardized noise for `rows` independent draws, or `None` for point
/// masses (which consume no randomness).
pub fn standard_noise<R: Rng + ?Sized>(
    family: Family,
    rows: usize,
    dim: usize,
    rng: &mut R,
) -> Option<Tensor> {
    if family.is_point() {
        return None;
    }
    let data = standard_noise_vec(family, rows * dim, rng);
    Some(Tensor::new(vec![rows, dim], data).expect("rows*dim"))
}

/// Closed-form KL divergence, summed over independent coordinates.
///
/// A point-mass posterior contributes zero so that deterministic and
/// BatchEnsemble models share the variational code path.
pub fn kl_divergence(q: &ScaleDistribution, p: &ScaleDistribution) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Distribution(format!(
            "KL between dimensions {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    if q.family.is_point() || p.family.is_point() {
        return Ok(0.0);
    }
    if q.family != p.family {
        return Err(Error::Distribution(format!(
            "KL between families {:?} and {:?}",
            q.family, p.family
        )));
    }
    let (qs, ps) = (q.scale.as_ref().unwrap(), p.scale.as_ref().unwrap());
    let mut kl = 0.0;
    for i in 0..q.dim() {
        kl += kl_coordinate(q.family, q.loc[i], qs[i], p.loc[i], ps[i]);
    }
    Ok(kl)
}

fn kl_coordinate(family: Family, mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let d = mq - mp;
    match family {
        Family::Gaussian | Family::LogGaussian => {
            (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5
        }
        Family::Cauchy => (((sq + sp).powi(2) + d * d) / (4.0 * sq * sp)).ln(),
        Family::Point => 0.0,
    }
}

/// Dropout probability used to parameterize an initial standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutRate(f64);

impl DropoutRate {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {p}"
            )));
        }
        Ok(Self(p))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Standard deviation of dropout's multiplicative Bernoulli noise.
    pub fn stddev(self) -> f64 {
        (self.0 / (1.0 - self.0)).sqrt()
    }
}

pub fn dropout_to_stddev(p: f64) -> Result<f64> {
    Ok(DropoutRate::new(p)?.stddev())
}

/// Uniform mixture of `K` factorized components sharing family and
/// dimension. Scales are stored unconstrained and mapped through softplus.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDistribution {
    family: Family,
    /// `[K, dim]`
    pub loc: Tensor,
    /// `[K, dim]`, absent for point masses.
    pub raw_scale: Option<Tensor>,
}

impl MixtureDistribution {
    pub fn new(family: Family, loc: Tensor, raw_scale: Option<Tensor>) -> Result<Self> {
        if loc.ndim() != 2 || loc.shape()[0] == 0 {
            return Err(Error::Distribution(format!(
                "mixture loc must be [K, dim] with K >= 1, got {:?}",
                loc.shape()
            )));
        }
        match (&raw_scale, family.is_point()) {
            (None, true) => {}
            (Some(s), false) if s.shape() == loc.shape() => {}
            _ => {
                return Err(Error::Distribution(format!(
                    "{family:?} mixture has mismatched scale parameters"
                )))
            }
        }
        Ok(Self {
            family,
            loc,
            raw_scale,
        })
    }

    /// `K` identical components with the same location and scale everywhere.
    pub fn uniform(family: Family, k: usize, dim: usize, loc: f64, scale: f64) -> Result<Self> {
        let loc = Tensor::full(&[k, dim], loc);
        let raw = if family.is_point() {
            None
        } else {
            if !(scale > 0.0) {
                return Err(Error::Distribution(format!("nonpositive scale {scale}")));
            }
            Some(Tensor::full(&[k, dim], inverse_softplus(scale)))
        };
        Self::new(family, loc, raw)
    }

    pub fn from_components(components: &[ScaleDistribution]) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Distribution("mixture needs K >= 1".into()))?;
        let (family, dim) = (first.family, first.dim());
        if components
            .iter()
            .any(|c| c.family != family || c.dim() != dim)
        {
            return Err(Error::Distribution(
                "mixture components must share family and dimension".into(),
            ));
        }
        let k = components.len();
        let loc = Tensor::new(
            vec![k, dim],
            components.iter().flat_map(|c| c.loc.clone()).collect(),
        )?;
        let raw = if family.is_point() {
            None
        } else {
            Some(Tensor::new(
                vec![k, dim],
                components
                    .iter()
                    .flat_map(|c| c.scale.as_ref().unwrap().iter().map(|&s| inverse_softplus(s)))
                    .collect(),
            )?)
        };
        Self::new(family, loc, raw)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn k(&self) -> usize {
        self.loc.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.loc.shape()[1]
    }

    pub fn weights(&self) -> Vec<f64> {
        vec![1.0 / self.k() as f64; self.k()]
    }

    /// Positive scales, `[K, dim]`.
    pub fn scale(&self) -> Option<Tensor> {
        self.raw_scale.as_ref().map(|r| r.map(softplus))
    }

    pub fn component(&self, k: usize) -> ScaleDistribution {
        ScaleDistribution {
            family: self.family,
            loc: self.loc.row(k).to_vec(),
            scale: self
                .raw_scale
                .as_ref()
                .map(|r| r.row(k).iter().map(|&v| softplus(v)).collect()),
        }
    }

    /// Draw from component `component`; the caller picks the component
    /// (the batch layout decides it, it is never sampled here).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, component: Option<usize>) -> Result<Vec<f64>> {
        let k = component.ok_or_else(|| {
            Error::Distribution("mixture sampling requires a component index".into())
        })?;
        if k >= self.k() {
            return Err(Error::Distribution(format!(
                "component {k} out of range for K = {}",
                self.k()
            )));
        }
        Ok(self.component(k).sample(rng))
    }
}

/// Paired-component bound `(1/K) Σ_k KL(q_k ‖ p_k)` on the mixture KL.
pub fn kl_mixture(q: &MixtureDistribution, p: &MixtureDistribution) -> Result<f64> {
    if q.k() != p.k() {
        return Err(Error::Distribution(format!(
            "mixture KL needs equal K, got {} and {}",
            q.k(),
            p.k()
        )));
    }
    let mut total = 0.0;
    for k in 0..q.k() {
        total += kl_divergence(&q.component(k), &p.component(k))?;
    }
    Ok(total / q.k() as f64)
}

// ---- taped versions ---------------------------------------------------

/// Reparameterized rows `loc + scale ∘ noise` (exponentiated for
/// LogGaussian). `loc`/`scale` are already expanded to one row per draw.
pub fn reparameterize<T: Real>(
    g: &mut Graph<T>,
    family: Family,
    loc: Var,
    scale: Var,
    noise: &Tensor,
) -> Result<Var> {
    let e = g.constant_f64(noise);
    let se = g.mul(scale, e)?;
    let z = g.add(loc, se)?;
    Ok(match family {
        Family::LogGaussian => g.exp(z),
        _ => z,
    })
}

/// Taped paired-component mixture KL against a fixed prior. `q_loc` is the
/// `[K, dim]` location leaf and `q_raw` the unconstrained scale leaf.
pub fn kl_mixture_taped<T: Real>(
    g: &mut Graph<T>,
    family: Family,
    q_loc: Var,
    q_raw: Option<Var>,
    prior: &MixtureDistribution,
) -> Result<Option<Var>> {
    let Some(q_raw) = q_raw else {
        return Ok(None);
    };
    if family.is_point() || prior.family.is_point() {
        return Ok(None);
    }
    if family != prior.family {
        return Err(Error::Distribution(format!(
            "KL between families {family:?} and {:?}",
            prior.family
        )));
    }
    if g.shape(q_loc) != prior.loc.shape() {
        return Err(Error::Distribution(format!(
            "posterior {:?} vs prior {:?}",
            g.shape(q_loc),
            prior.loc.shape()
        )));
    }
    let k = prior.k() as f64;
    let p_scale = prior.scale().unwrap();
    let mp = g.constant_f64(&prior.loc);
    let sp = g.constant_f64(&p_scale);
    let sq = g.softplus(q_raw);
    let diff = g.sub(q_loc, mp)?;
    let d2 = g.square(diff);

    let per_coord = match family {
        Family::Gaussian | Family::LogGaussian => {
            // log σp − log σq + (σq² + d²) / (2σp²) − ½
            let log_sp = g.constant_f64(&p_scale.map(f64::ln));
            let inv_2sp2 = g.constant_f64(&p_scale.map(|s| 0.5 / (s * s)));
            let log_sq = g.log(sq)?;
            let sq2 = g.square(sq);
            let num = g.add(sq2, d2)?;
            let quad = g.mul(num, inv_2sp2)?;
            let a = g.sub(log_sp, log_sq)?;
            let b = g.add(a, quad)?;
            g.add_scalar(b, -0.5)
        }
        Family::Cauchy => {
            // log((σq+σp)² + d²) − log 4 − log σq − log σp
            let sum = g.add(sq, sp)?;
            let sum2 = g.square(sum);
            let num = g.add(sum2, d2)?;
            let log_num = g.log(num)?;
            let log_sq = g.log(sq)?;
            let log_sp = g.constant_f64(&p_scale.map(|s| s.ln() + 4f64.ln()));
            let a = g.sub(log_num, log_sq)?;
            g.sub(a, log_sp)?
        }
        Family::Point => unreachable!(),
    };
    let total = g.sum(per_coord);
    Ok(Some(g.mul_scalar(total, 1.0 / k)))
}
