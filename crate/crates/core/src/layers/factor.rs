//! A rank-1 factor vector with its mixture posterior and prior.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::distributions::{
    kl_mixture, kl_mixture_taped, reparameterize, standard_noise, Family, MixtureDistribution,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How factor rows are produced for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Fresh draw for every row.
    Sample,
    /// One draw per mixture component, shared by all rows of that component.
    SharedSample,
    /// Component location (exact mean for LogGaussian, median for Cauchy).
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub posterior: MixtureDistribution,
    pub prior: MixtureDistribution,
    /// Point factors may be frozen, e.g. the all-ones factors of a plain
    /// deterministic layer.
    pub trainable: bool,
}

/// Leaves a factor's parameters occupy on a graph.
#[derive(Clone, Copy, Debug)]
pub struct FactorVars {
    pub loc: Var,
    pub raw_scale: Option<Var>,
}

/// Row-to-component assignment and standardized noise for one pass.
#[derive(Clone, Debug)]
pub struct FactorDraw {
    pub mode: ForwardMode,
    /// Mixture component of each row.
    pub components: Vec<usize>,
    /// `[rows, dim]`; `None` for point masses and mean mode.
    pub noise: Option<Tensor>,
}

/// Component of each of `rows` rows laid out as K contiguous blocks.
pub fn block_components(rows: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || rows % k != 0 {
        return Err(Error::Batch { rows, k });
    }
    let b = rows / k;
    Ok((0..rows).map(|i| i / b).collect())
}

impl Factor {
    pub fn new(posterior: MixtureDistribution, prior: MixtureDistribution, trainable: bool) -> Result<Self> {
        if posterior.k() != prior.k() || posterior.dim() != prior.dim() {
            return Err(Error::Distribution(format!(
                "posterior [{}, {}] and prior [{}, {}] disagree",
                posterior.k(),
                posterior.dim(),
                prior.k(),
                prior.dim()
            )));
        }
        if !trainable && !posterior.family().is_point() {
            return Err(Error::Distribution(
                "only point factors can be frozen".into(),
            ));
        }
        Ok(Self {
            posterior,
            prior,
            trainable,
        })
    }

    /// Frozen point factor at one: the layer reduces to its plain kernel.
    pub fn identity(k: usize, dim: usize) -> Self {
        let ones = MixtureDistribution::uniform(Family::Point, k, dim, 1.0, 1.0).expect("valid");
        Self {
            posterior: ones.clone(),
            prior: ones,
            trainable: false,
        }
    }

    pub fn k(&self) -> usize {
        self.posterior.k()
    }

    pub fn dim(&self) -> usize {
        self.posterior.dim()
    }

    pub fn is_stochastic(&self) -> bool {
        !self.posterior.family().is_point()
    }

    pub fn bind(&self, g: &mut Graph) -> FactorVars {
        let loc = if self.trainable {
            g.param(self.posterior.loc.clone())
        } else {
            g.constant(self.posterior.loc.clone())
        };
        let raw_scale = self.posterior.raw_scale.as_ref().map(|r| g.param(r.clone()));
        FactorVars { loc, raw_scale }
    }

    /// Graph leaves in the order of [`Factor::trainable_mut`].
    pub fn trainable_vars(&self, vars: &FactorVars) -> Vec<Var> {
        let mut out = Vec::new();
        if self.trainable {
            out.push(vars.loc);
        }
        out.extend(vars.raw_scale);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if self.trainable {
            out.push(&mut self.posterior.loc);
        }
        if let Some(r) = self.posterior.raw_scale.as_mut() {
            out.push(r);
        }
        out
    }

    pub fn state(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("loc", &self.posterior.loc)];
        if let Some(r) = &self.posterior.raw_scale {
            out.push(("raw_scale", r));
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![("loc", &mut self.posterior.loc)];
        if let Some(r) = self.posterior.raw_scale.as_mut() {
            out.push(("raw_scale", r));
        }
        out
    }

    pub fn draw<R: Rng + ?Sized>(&self, mode: ForwardMode, rows: usize, rng: &mut R) -> Result<FactorDraw> {
        let components = block_components(rows, self.k())?;
        let family = self.posterior.family();
        let noise = match mode {
            ForwardMode::Mean => None,
            ForwardMode::Sample => standard_noise(family, rows, self.dim(), rng),
            ForwardMode::SharedSample => standard_noise(family, self.k(), self.dim(), rng).map(|per_k| {
                let data = components
                    .iter()
                    .flat_map(|&c| per_k.row(c).to_vec())
                    .collect();
                Tensor::new(vec![rows, self.dim()], data).expect("rows x dim")
            }),
        };
        Ok(FactorDraw {
            mode,
            components,
            noise,
        })
    }

    /// Factor values for every row, `[rows, dim]`.
    pub fn rows_taped(&self, g: &mut Graph, vars: &FactorVars, draw: &FactorDraw) -> Result<Var> {
        let loc = g.gather_rows(vars.loc, &draw.components)?;
        let family = self.posterior.family();
        let Some(raw) = vars.raw_scale else {
            return Ok(loc);
        };
        let scale_all = g.softplus(raw);
        let scale = g.gather_rows(scale_all, &draw.components)?;
        match (&draw.noise, draw.mode) {
            (Some(noise), _) => reparameterize(g, family, loc, scale, noise),
            (None, _) if family == Family::LogGaussian => {
                let var = g.square(scale);
                let half = g.mul_scalar(var, 0.5);
                let z = g.add(loc, half)?;
                Ok(g.exp(z))
            }
            (None, _) => Ok(loc),
        }
    }

    /// Plain-valued factor rows, mirroring [`Factor::rows_taped`].
    pub fn rows_value(&self, draw: &FactorDraw) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let v = self.rows_taped(&mut g, &vars, draw)?;
        Ok(g.value(v).clone())
    }

    pub fn kl(&self) -> Result<f64> {
        kl_mixture(&self.posterior, &self.prior)
    }

    pub fn kl_taped(&self, g: &mut Graph, vars: &FactorVars) -> Result<Option<Var>> {
        kl_mixture_taped(g, self.posterior.family(), vars.loc, vars.raw_scale, &self.prior)
    }
}
