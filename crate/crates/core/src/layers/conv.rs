use std::sync::Arc;

use rand::Rng;

use super::{Activation, Factor, FactorDraw, FactorVars, ForwardMode, Layer, Placement};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

/// 2-D convolution over NHWC inputs with kernel `W ∘ r sᵀ` taken across
/// channels: `s` scales input channels and `r` output channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Rank1Conv2D {
    /// `[kh, kw, cin, cout]`
    pub kernel: Tensor,
    /// `[cout]`
    pub bias: Tensor,
    pub r: Factor,
    pub s: Factor,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
    pub r: FactorVars,
    pub s: FactorVars,
}

#[derive(Clone, Debug)]
pub struct ConvDraw {
    pub r: FactorDraw,
    pub s: FactorDraw,
}

/// Output extent and leading pad along one spatial axis.
fn out_extent(size: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(size);
            (out, total / 2)
        }
        Padding::Valid => ((size.saturating_sub(k)) / stride + 1, 0),
    }
}

impl Rank1Conv2D {
    pub fn new(
        kernel: Tensor,
        bias: Tensor,
        r: Factor,
        s: Factor,
        stride: usize,
        padding: Padding,
        activation: Activation,
    ) -> Result<Self> {
        if kernel.ndim() != 4 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv kernel must be [kh, kw, cin, cout] with stride >= 1, got {:?}",
                kernel.shape()
            )));
        }
        let (cin, cout) = (kernel.shape()[2], kernel.shape()[3]);
        if bias.shape() != [cout] || r.dim() != cout || s.dim() != cin || r.k() != s.k() {
            return Err(Error::Shape {
                op: "rank1_conv2d",
                lhs: kernel.shape().to_vec(),
                rhs: vec![bias.len(), r.dim(), s.dim()],
            });
        }
        Ok(Self {
            kernel,
            bias,
            r,
            s,
            stride,
            padding,
            activation,
        })
    }

    pub fn placement(&self) -> Placement {
        Placement::of(&self.r, &self.s)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ks = self.kernel.shape();
        (
            out_extent(h, ks[0], self.stride, self.padding).0,
            out_extent(w, ks[1], self.stride, self.padding).0,
        )
    }

    pub fn bind(&self, g: &mut Graph) -> ConvVars {
        ConvVars {
            kernel: g.param(self.kernel.clone()),
            bias: g.param(self.bias.clone()),
            r: self.r.bind(g),
            s: self.s.bind(g),
        }
    }

    pub fn trainable_vars(&self, v: &ConvVars) -> Vec<Var> {
        let mut out = vec![v.kernel, v.bias];
        out.extend(self.r.trainable_vars(&v.r));
        out.extend(self.s.trainable_vars(&v.s));
        out
    }

    /// Factor draws are per example, shared across spatial positions.
    pub fn draw<R: Rng + ?Sized>(&self, mode: ForwardMode, examples: usize, rng: &mut R) -> Result<ConvDraw> {
        Ok(ConvDraw {
            r: self.r.draw(mode, examples, rng)?,
            s: self.s.draw(mode, examples, rng)?,
        })
    }

    /// `x: [N, H, W, cin]` → `[N, Ho, Wo, cout]`.
    pub fn forward(&self, g: &mut Graph, v: &ConvVars, x: Var, draw: &ConvDraw) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        let ks = self.kernel.shape().to_vec();
        if xs.len() != 4 || xs[3] != ks[2] {
            return Err(Error::Shape {
                op: "rank1_conv2d input",
                lhs: xs,
                rhs: ks,
            });
        }
        let (n, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        if draw.s.components.len() != n {
            return Err(Error::Batch { rows: n, k: self.s.k() });
        }
        let (ho, pad_h) = out_extent(h, kh, self.stride, self.padding);
        let (wo, pad_w) = out_extent(w, kw, self.stride, self.padding);

        let s_rows = self.s.rows_taped(g, &v.s, &draw.s)?;
        let spatial_in: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(h * w)).collect();
        let s_exp = g.gather_rows(s_rows, &spatial_in)?;
        let x2 = g.reshape(x, &[n * h * w, cin])?;
        let xs_scaled = g.mul(x2, s_exp)?;

        let mut index = Vec::with_capacity(n * ho * wo * kh * kw * cin);
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * self.stride + ky) as isize - pad_h as isize;
                            let ix = (ox * self.stride + kx) as isize - pad_w as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                            for c in 0..cin {
                                index.push(inside.then(|| {
                                    ((b * h + iy as usize) * w + ix as usize) * cin + c
                                }));
                            }
                        }
                    }
                }
            }
        }
        let index: Arc<[Option<usize>]> = index.into();
        let cols = g.gather(xs_scaled, index, &[n * ho * wo, kh * kw * cin])?;
        let k2 = g.reshape(v.kernel, &[kh * kw * cin, cout])?;
        let z = g.matmul(cols, k2)?;

        let r_rows = self.r.rows_taped(g, &v.r, &draw.r)?;
        let spatial_out: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(ho * wo)).collect();
        let r_exp = g.gather_rows(r_rows, &spatial_out)?;
        let zr = g.mul(z, r_exp)?;
        let pre = g.add(zr, v.bias)?;
        let act = self.activation.apply(g, pre)?;
        g.reshape(act, &[n, ho, wo, cout])
    }

    pub fn kl_taped(&self, g: &mut Graph, v: &ConvVars) -> Result<Option<Var>> {
        let a = self.r.kl_taped(g, &v.r)?;
        let b = self.s.kl_taped(g, &v.s)?;
        Ok(match (a, b) {
            (Some(a), Some(b)) => Some(g.add(a, b)?),
            (a, b) => a.or(b),
        })
    }
}

impl Layer for Rank1Conv2D {
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
