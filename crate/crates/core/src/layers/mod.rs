//! Layers with rank-1 multiplicative weight factors.
//!
//! Every layer shares one deterministic kernel `W` across an ensemble of `K`
//! mixture components. Inputs arrive as `K` contiguous row blocks (see
//! `duplicate_batch` in the data module); row `i` uses component `⌊i / B⌋` and,
//! in sample mode, its own draw of `r` and `s`.

mod conv;
mod dense;
mod factor;
mod lstm;

use serde::{Deserialize, Serialize};

pub use conv::{ConvDraw, ConvVars, Padding, Rank1Conv2D};
pub use dense::{DenseDraw, DenseVars, Rank1Dense};
pub use factor::{block_components, Factor, FactorDraw, FactorVars, ForwardMode};
pub use lstm::{LstmDraw, LstmVars, Rank1LstmCell};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Softplus => g.softplus(x),
        })
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => crate::distributions::softplus(x),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        }
    }
}

/// Which factors carry a non-degenerate posterior and prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Placement {
    #[default]
    Both,
    ROnly,
    SOnly,
    /// Neither factor is stochastic (deterministic or BatchEnsemble).
    Neither,
}

impl Placement {
    pub fn of(r: &Factor, s: &Factor) -> Self {
        match (r.is_stochastic(), s.is_stochastic()) {
            (true, true) => Placement::Both,
            (true, false) => Placement::ROnly,
            (false, true) => Placement::SOnly,
            (false, false) => Placement::Neither,
        }
    }

    pub fn r_stochastic(self) -> bool {
        matches!(self, Placement::Both | Placement::ROnly)
    }

    pub fn s_stochastic(self) -> bool {
        matches!(self, Placement::Both | Placement::SOnly)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Placement::Both),
            "r_only" => Ok(Placement::ROnly),
            "s_only" => Ok(Placement::SOnly),
            "neither" => Ok(Placement::Neither),
            other => Err(Error::Config(format!("unknown placement `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Placement::Both => "both",
            Placement::ROnly => "r_only",
            Placement::SOnly => "s_only",
            Placement::Neither => "neither",
        }
    }
}

/// Parameter bookkeeping shared by all rank-1 layers.
pub trait Layer {
    /// Every persistent tensor, named, in a fixed order.
    fn state(&self) -> Vec<(String, &Tensor)>;
    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)>;
    /// Trainable tensors, in the order of the layer's `trainable_vars`.
    fn trainable_mut(&mut self) -> Vec<&mut Tensor>;
    /// Kernels subject to the L2 (Gaussian weight prior) penalty.
    fn kernels(&self) -> Vec<&Tensor>;
    /// `KL(q(r)‖p(r)) + KL(q(s)‖p(s))`.
    fn kl(&self) -> Result<f64>;
}
