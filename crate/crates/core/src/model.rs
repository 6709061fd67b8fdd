//! A multilayer perceptron of rank-1 dense layers.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::data::duplicate_batch;
use crate::error::{Error, Result};
use crate::layers::{DenseDraw, DenseVars, ForwardMode, Layer, Rank1Dense};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Rank1Mlp {
    pub layers: Vec<Rank1Dense>,
}

impl Rank1Mlp {
    pub fn new(layers: Vec<Rank1Dense>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        };
        let k = first.r.k();
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    op: "rank1_mlp",
                    lhs: vec![pair[0].out_dim()],
                    rhs: vec![pair[1].in_dim()],
                });
            }
        }
        if let Some(l) = layers.iter().find(|l| l.r.k() != k) {
            return Err(Error::InvalidArgument(format!(
                "ensemble size {} disagrees with {k}",
                l.r.k()
            )));
        }
        Ok(Self { layers })
    }

    pub fn k(&self) -> usize {
        self.layers[0].r.k()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<DenseVars> {
        self.layers.iter().map(|l| l.bind(g)).collect()
    }

    pub fn trainable_vars(&self, vars: &[DenseVars]) -> Vec<Var> {
        self.layers
            .iter()
            .zip(vars)
            .flat_map(|(l, v)| l.trainable_vars(v))
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.trainable_mut()).collect()
    }

    pub fn kernel_vars(&self, vars: &[DenseVars]) -> Vec<Var> {
        vars.iter().map(|v| v.kernel).collect()
    }

    pub fn draw<R: Rng + ?Sized>(&self, mode: ForwardMode, rows: usize, rng: &mut R) -> Result<Vec<DenseDraw>> {
        self.layers.iter().map(|l| l.draw(mode, rows, rng)).collect()
    }

    /// Logits `[rows, C]` for rows grouped into `K` component blocks.
    pub fn forward(&self, g: &mut Graph, vars: &[DenseVars], x: Var, draws: &[DenseDraw]) -> Result<Var> {
        let mut h = x;
        for ((l, v), d) in self.layers.iter().zip(vars).zip(draws) {
            h = l.forward(g, v, h, d)?;
        }
        Ok(h)
    }

    pub fn kl_taped(&self, g: &mut Graph, vars: &[DenseVars]) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for (l, v) in self.layers.iter().zip(vars) {
            if let Some(kl) = l.kl_taped(g, v)? {
                acc = Some(match acc {
                    Some(a) => g.add(a, kl)?,
                    None => kl,
                });
            }
        }
        Ok(acc)
    }

    pub fn kl(&self) -> Result<f64> {
        self.layers.iter().map(|l| l.kl()).sum()
    }

    pub fn state(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.state().into_iter().map(move |(n, t)| (format!("layer{i}.{n}"), t)))
            .collect()
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.state_mut().into_iter().map(move |(n, t)| (format!("layer{i}.{n}"), t)))
            .collect()
    }

    /// Member log-probabilities `[S·K, B, C]` for `x: [B, D]`: `samples`
    /// forward passes over the duplicated batch, member `s·K + k` being
    /// component `k` on pass `s`.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        mode: ForwardMode,
        samples: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        if samples == 0 {
            return Err(Error::InvalidArgument("need at least one evaluation sample".into()));
        }
        let k = self.k();
        let b = x.shape().first().copied().unwrap_or(0);
        let c = self.num_classes();
        let dup = duplicate_batch(x, k)?;
        let mut out = Vec::with_capacity(samples * k * b * c);
        for _ in 0..samples {
            let mut g = Graph::new();
            let vars = self.bind(&mut g);
            let draws = self.draw(mode, k * b, rng)?;
            let xv = g.constant(dup.clone());
            let logits = self.forward(&mut g, &vars, xv, &draws)?;
            let lp = g.log_softmax(logits)?;
            out.extend_from_slice(g.value(lp).data());
        }
        Tensor::new(vec![samples * k, b, c], out)
    }
}
