use rand::Rng;

use super::{Activation, Factor, FactorDraw, FactorVars, ForwardMode, Layer, Placement};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fully connected layer with weight `W ∘ r sᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rank1Dense {
    /// `[out, in]`
    pub kernel: Tensor,
    /// `[out]`, deterministic.
    pub bias: Tensor,
    /// Output-side factor over `out`.
    pub r: Factor,
    /// Input-side factor over `in`.
    pub s: Factor,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub kernel: Var,
    pub bias: Var,
    pub r: FactorVars,
    pub s: FactorVars,
}

#[derive(Clone, Debug)]
pub struct DenseDraw {
    pub r: FactorDraw,
    pub s: FactorDraw,
}

impl Rank1Dense {
    pub fn new(kernel: Tensor, bias: Tensor, r: Factor, s: Factor, activation: Activation) -> Result<Self> {
        if kernel.ndim() != 2 {
            return Err(Error::InvalidArgument(format!(
                "dense kernel must be rank 2, got {:?}",
                kernel.shape()
            )));
        }
        let (m, d) = (kernel.shape()[0], kernel.shape()[1]);
        if bias.shape() != [m] || r.dim() != m || s.dim() != d || r.k() != s.k() {
            return Err(Error::Shape {
                op: "rank1_dense",
                lhs: vec![m, d],
                rhs: vec![bias.len(), r.dim(), s.dim(), r.k(), s.k()],
            });
        }
        Ok(Self {
            kernel,
            bias,
            r,
            s,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn placement(&self) -> Placement {
        Placement::of(&self.r, &self.s)
    }

    pub fn bind(&self, g: &mut Graph) -> DenseVars {
        DenseVars {
            kernel: g.param(self.kernel.clone()),
            bias: g.param(self.bias.clone()),
            r: self.r.bind(g),
            s: self.s.bind(g),
        }
    }

    pub fn trainable_vars(&self, v: &DenseVars) -> Vec<Var> {
        let mut out = vec![v.kernel, v.bias];
        out.extend(self.r.trainable_vars(&v.r));
        out.extend(self.s.trainable_vars(&v.s));
        out
    }

    pub fn draw<R: Rng + ?Sized>(&self, mode: ForwardMode, rows: usize, rng: &mut R) -> Result<DenseDraw> {
        Ok(DenseDraw {
            r: self.r.draw(mode, rows, rng)?,
            s: self.s.draw(mode, rows, rng)?,
        })
    }

    /// `φ(((X ∘ S) Wᵀ) ∘ R + b)` for `X: [B·K, in]` grouped by component.
    pub fn forward(&self, g: &mut Graph, v: &DenseVars, x: Var, draw: &DenseDraw) -> Result<Var> {
        let rows = g.shape(x)[0];
        if draw.r.components.len() != rows {
            return Err(Error::Batch {
                rows,
                k: self.r.k(),
            });
        }
        let s = self.s.rows_taped(g, &v.s, &draw.s)?;
        let r = self.r.rows_taped(g, &v.r, &draw.r)?;
        let xs = g.mul(x, s)?;
        let wt = g.transpose(v.kernel)?;
        let z = g.matmul(xs, wt)?;
        let zr = g.mul(z, r)?;
        let pre = g.add(zr, v.bias)?;
        self.activation.apply(g, pre)
    }

    /// Taped `KL(q(r)‖p(r)) + KL(q(s)‖p(s))`, `None` when both are zero.
    pub fn kl_taped(&self, g: &mut Graph, v: &DenseVars) -> Result<Option<Var>> {
        let a = self.r.kl_taped(g, &v.r)?;
        let b = self.s.kl_taped(g, &v.s)?;
        Ok(match (a, b) {
            (Some(a), Some(b)) => Some(g.add(a, b)?),
            (a, b) => a.or(b),
        })
    }

    /// One materialized weight `W ∘ r sᵀ` for a draw from `component`.
    pub fn induced_weight_sample<R: Rng + ?Sized>(&self, rng: &mut R, component: usize) -> Result<Tensor> {
        let r = self.r.posterior.sample(rng, Some(component))?;
        let s = self.s.posterior.sample(rng, Some(component))?;
        let d = self.in_dim();
        let data = self
            .kernel
            .data()
            .iter()
            .enumerate()
            .map(|(idx, w)| w * r[idx / d] * s[idx % d])
            .collect();
        Tensor::new(self.kernel.shape().to_vec(), data)
    }
}

impl Layer for Rank1Dense {
    fn state(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("kernel".to_string(), &self.kernel), ("bias".to_string(), &self.bias)];
        out.extend(self.r.state().into_iter().map(|(n, t)| (format!("r.{n}"), t)));
        out.extend(self.s.state().into_iter().map(|(n, t)| (format!("s.{n}"), t)));
        out
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("kernel".to_string(), &mut self.kernel),
            ("bias".to_string(), &mut self.bias),
        ];
        out.extend(self.r.state_mut().into_iter().map(|(n, t)| (format!("r.{n}"), t)));
        out.extend(self.s.state_mut().into_iter().map(|(n, t)| (format!("s.{n}"), t)));
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.kernel, &mut self.bias];
        out.extend(self.r.trainable_mut());
        out.extend(self.s.trainable_mut());
        out
    }

    fn kernels(&self) -> Vec<&Tensor> {
        vec![&self.kernel]
    }

    fn kl(&self) -> Result<f64> {
        Ok(self.r.kl()? + self.s.kl()?)
    }
}
