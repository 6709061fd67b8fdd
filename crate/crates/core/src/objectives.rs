//! Likelihood formulations over ensemble members and the variational objective.
//!
//! Logits are laid out `[M, B, C]`: `M` members (mixture components, possibly
//! times samples), `B` examples, `C` classes. With the batch duplicated `K`
//! times the model output `[K·B, C]` reshapes to this layout directly.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ReduceOp, Var};
use crate::error::{Error, Result};
use crate::model::Rank1Mlp;
use crate::layers::ForwardMode;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodMode {
    /// Cross-entropy of the softmax of member-averaged logits.
    MarginalLogits,
    /// `−log` of member-averaged probabilities.
    MarginalProbs,
    /// Member-averaged cross-entropy.
    #[default]
    AverageNll,
    /// `−logsumexp_m log p_m(y) + log M`.
    MixtureNll,
}

impl LikelihoodMode {
    pub const ALL: [LikelihoodMode; 4] = [
        LikelihoodMode::MarginalLogits,
        LikelihoodMode::MarginalProbs,
        LikelihoodMode::AverageNll,
        LikelihoodMode::MixtureNll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LikelihoodMode::MarginalLogits => "marginal_logits",
            LikelihoodMode::MarginalProbs => "marginal_probs",
            LikelihoodMode::AverageNll => "average_nll",
            LikelihoodMode::MixtureNll => "mixture_nll",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown likelihood mode `{s}`")))
    }
}

fn dims3(shape: &[usize], labels: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 || shape[1] != labels.len() || shape[0] == 0 || shape[2] < 2 {
        return Err(Error::Shape {
            op: "nll",
            lhs: shape.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let c = shape[2];
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, classes: c });
    }
    Ok((shape[0], shape[1], c))
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-example negative log-likelihood under `mode`.
pub fn nll_per_example(mode: LikelihoodMode, logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (m, b, c) = dims3(logits.shape(), labels)?;
    let row = |k: usize, i: usize| &logits.data()[(k * b + i) * c..(k * b + i + 1) * c];
    let mf = m as f64;
    Ok((0..b)
        .map(|i| {
            let y = labels[i];
            match mode {
                LikelihoodMode::MarginalLogits => {
                    let mut mean = vec![0.0; c];
                    for k in 0..m {
                        for (a, v) in mean.iter_mut().zip(row(k, i)) {
                            *a += v;
                        }
                    }
                    mean.iter_mut().for_each(|a| *a /= mf);
                    -log_softmax_row(&mean)[y]
                }
                LikelihoodMode::MarginalProbs => {
                    let p: f64 = (0..m).map(|k| log_softmax_row(row(k, i))[y].exp()).sum::<f64>() / mf;
                    -p.ln()
                }
                LikelihoodMode::AverageNll => {
                    -(0..m).map(|k| log_softmax_row(row(k, i))[y]).sum::<f64>() / mf
                }
                LikelihoodMode::MixtureNll => {
                    let lp: Vec<f64> = (0..m).map(|k| log_softmax_row(row(k, i))[y]).collect();
                    -(logsumexp(&lp) - mf.ln())
                }
            }
        })
        .collect())
}

/// Batch-mean negative log-likelihood of `logits: [M, B, C]`.
pub fn nll(mode: LikelihoodMode, logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let per = nll_per_example(mode, logits, labels)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Taped [`nll`]; `logits` has shape `[M, B, C]`.
pub fn nll_taped(g: &mut Graph, mode: LikelihoodMode, logits: Var, labels: &[usize]) -> Result<Var> {
    let (m, b, c) = dims3(g.shape(logits), labels)?;
    let pick = |members: usize| -> Arc<[Option<usize>]> {
        (0..members)
            .flat_map(|k| (0..b).map(move |i| Some((k * b + i) * c + labels[i])))
            .collect()
    };
    let per_example = match mode {
        LikelihoodMode::MarginalLogits => {
            let mean = g.reduce(ReduceOp::Mean, logits, Some(0))?;
            let lp = g.log_softmax(mean)?;
            let picked = g.gather(lp, pick(1), &[b])?;
            g.mul_scalar(picked, -1.0)
        }
        LikelihoodMode::MarginalProbs => {
            let lp = g.log_softmax(logits)?;
            let picked = g.gather(lp, pick(m), &[m, b])?;
            let p = g.exp(picked);
            let mean = g.reduce(ReduceOp::Mean, p, Some(0))?;
            let l = g.log(mean)?;
            g.mul_scalar(l, -1.0)
        }
        LikelihoodMode::AverageNll => {
            let lp = g.log_softmax(logits)?;
            let picked = g.gather(lp, pick(m), &[m, b])?;
            let mean = g.reduce(ReduceOp::Mean, picked, Some(0))?;
            g.mul_scalar(mean, -1.0)
        }
        LikelihoodMode::MixtureNll => {
            let lp = g.log_softmax(logits)?;
            let picked = g.gather(lp, pick(m), &[m, b])?;
            let lse = g.reduce(ReduceOp::LogSumExp, picked, Some(0))?;
            let shifted = g.add_scalar(lse, -(m as f64).ln());
            g.mul_scalar(shifted, -1.0)
        }
    };
    Ok(g.mean(per_example))
}

/// Linear KL warm-up: `min(1, epoch / kl_annealing_epochs)`.
pub fn anneal(epoch: usize, kl_annealing_epochs: usize) -> f64 {
    if kl_annealing_epochs == 0 {
        return 1.0;
    }
    (epoch as f64 / kl_annealing_epochs as f64).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboConfig {
    pub train_set_size: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub kl_annealing_epochs: usize,
    pub likelihood_mode: LikelihoodMode,
}

impl ElboConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_set_size < self.batch_size {
            return Err(Error::Config(format!(
                "need train_set_size >= batch_size >= 1, got {} and {}",
                self.train_set_size, self.batch_size
            )));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if self.kl_annealing_epochs == 0 {
            return Err(Error::Config("kl_annealing_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Negative ELBO per training example:
/// `nll + anneal(epoch)·KL / N + l2·Σ‖W‖²`.
pub fn elbo_taped(
    g: &mut Graph,
    cfg: &ElboConfig,
    epoch: usize,
    nll: Var,
    kl: Option<Var>,
    kernels: &[Var],
) -> Result<Var> {
    let mut loss = nll;
    if let Some(kl) = kl {
        let w = anneal(epoch, cfg.kl_annealing_epochs) / cfg.train_set_size as f64;
        let scaled = g.mul_scalar(kl, w);
        loss = g.add(loss, scaled)?;
    }
    if cfg.l2 > 0.0 && !kernels.is_empty() {
        let mut sq = None;
        for &w in kernels {
            let s = g.square(w);
            let s = g.sum(s);
            sq = Some(match sq {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        let penalty = g.mul_scalar(sq.expect("non-empty"), cfg.l2);
        loss = g.add(loss, penalty)?;
    }
    Ok(loss)
}

/// Value, components and gradients of one objective evaluation.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    /// Gradients in the order of [`Rank1Mlp::trainable_mut`].
    pub grads: Vec<Tensor>,
}

/// Objective on a batch already duplicated `K` times (`x: [K·B, D]`) with
/// the `B` original labels; factors are drawn per row.
pub fn elbo_loss<R: Rng + ?Sized>(
    model: &Rank1Mlp,
    x: &Tensor,
    labels: &[usize],
    epoch: usize,
    cfg: &ElboConfig,
    rng: &mut R,
) -> Result<LossEval> {
    let k = model.k();
    let rows = x.shape().first().copied().unwrap_or(0);
    if rows != k * labels.len() {
        return Err(Error::Batch { rows, k });
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let draws = model.draw(ForwardMode::Sample, rows, rng)?;
    let xv = g.constant(x.clone());
    let logits = model.forward(&mut g, &vars, xv, &draws)?;
    let c = model.num_classes();
    let logits = g.reshape(logits, &[k, labels.len(), c])?;
    let nll = nll_taped(&mut g, cfg.likelihood_mode, logits, labels)?;
    let kl = model.kl_taped(&mut g, &vars)?;
    let kernels = model.kernel_vars(&vars);
    let loss = elbo_taped(&mut g, cfg, epoch, nll, kl, &kernels)?;
    let grads = g.backward(loss)?;
    Ok(LossEval {
        loss: g.value(loss).data()[0],
        nll: g.value(nll).data()[0],
        kl: kl.map_or(0.0, |v| g.value(v).data()[0]),
        grads: model
            .trainable_vars(&vars)
            .into_iter()
            .map(|v| grads.wrt(v))
            .collect(),
    })
}
