use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::TrainConfig;
use crate::distributions::{dropout_to_stddev, inverse_softplus, Family, MixtureDistribution};
use crate::error::{Error, Result};
use crate::layers::{Activation, Factor, Rank1Dense};
use crate::model::Rank1Mlp;
use crate::tensor::Tensor;

/// Initial posterior means. Negative `random_sign_init` draws `N(1, v²)`;
/// positive sets each element to `−1` with probability `v`, else `+1`.
pub fn init_posterior_means<R: Rng + ?Sized>(shape: &[usize], random_sign_init: f64, rng: &mut R) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = if random_sign_init < 0.0 {
        let normal = Normal::new(1.0, -random_sign_init)
            .map_err(|e| Error::InvalidArgument(format!("random_sign_init {random_sign_init}: {e}")))?;
        (0..n).map(|_| normal.sample(rng)).collect()
    } else if random_sign_init > 0.0 && random_sign_init <= 1.0 {
        (0..n)
            .map(|_| if rng.gen::<f64>() < random_sign_init { -1.0 } else { 1.0 })
            .collect()
    } else {
        return Err(Error::InvalidArgument(format!(
            "random_sign_init must be nonzero and at most 1, got {random_sign_init}"
        )));
    };
    Tensor::new(shape.to_vec(), data)
}

/// `[out, in]` kernel with entries `N(0, 2 / in)`, drawn row-major.
pub fn he_normal<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).expect("positive fan-in");
    let data = (0..out_dim * in_dim).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![out_dim, in_dim], data).expect("out x in")
}

/// `base_learning_rate · lr_decay_ratio^(decay epochs ≤ epoch)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.base_learning_rate * cfg.lr_decay_ratio.powi(passed as i32)
}

fn make_factor<R: Rng + ?Sized>(cfg: &TrainConfig, stochastic: bool, dim: usize, rng: &mut R) -> Result<Factor> {
    let k = cfg.ensemble_size;
    if cfg.family.is_point() && k == 1 {
        return Ok(Factor::identity(1, dim));
    }
    let means = init_posterior_means(&[k, dim], cfg.random_sign_init, rng)?;
    if cfg.family.is_point() || !stochastic {
        let point = MixtureDistribution::new(Family::Point, means, None)?;
        return Factor::new(point.clone(), point, true);
    }
    let (loc, prior_loc) = if cfg.family == Family::LogGaussian {
        (means.map(|v| v.abs().max(1e-6).ln()), cfg.prior_mean.ln())
    } else {
        (means, cfg.prior_mean)
    };
    let raw = inverse_softplus(dropout_to_stddev(cfg.dropout_rate)?);
    let posterior = MixtureDistribution::new(cfg.family, loc, Some(Tensor::full(&[k, dim], raw)))?;
    let prior = MixtureDistribution::uniform(cfg.family, k, dim, prior_loc, cfg.prior_stddev)?;
    Factor::new(posterior, prior, true)
}

/// MLP `in → hidden_sizes… → classes`; per layer the kernel is drawn
/// first, then `r`, then `s`.
pub fn build_model<R: Rng + ?Sized>(cfg: &TrainConfig, in_dim: usize, classes: usize, rng: &mut R) -> Result<Rank1Mlp> {
    let mut dims = vec![in_dim];
    dims.extend(&cfg.hidden_sizes);
    dims.push(classes);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, pair) in dims.windows(2).enumerate() {
        let (d, m) = (pair[0], pair[1]);
        let kernel = he_normal(m, d, rng);
        let r = make_factor(cfg, cfg.placement.r_stochastic(), m, rng)?;
        let s = make_factor(cfg, cfg.placement.s_stochastic(), d, rng)?;
        let act = if i + 2 == dims.len() {
            Activation::Identity
        } else {
            cfg.activation
        };
        layers.push(Rank1Dense::new(kernel, Tensor::zeros(&[m]), r, s, act)?);
    }
    Rank1Mlp::new(layers)
}
