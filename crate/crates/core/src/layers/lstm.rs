use rand::Rng;

use super::{Factor, FactorDraw, FactorVars, ForwardMode, Layer};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// LSTM cell whose input and recurrent kernels each carry their own rank-1
/// factor pair. Gates are packed `[i, f, g, o]` along the output axis.
///
/// Factors are drawn once per sequence and held across time steps, so one
/// draw is one consistent recurrent network.
#[derive(Clone, Debug, PartialEq)]
pub struct Rank1LstmCell {
    /// `[4h, in]`
    pub input_kernel: Tensor,
    /// `[4h, h]`
    pub recurrent_kernel: Tensor,
    /// `[4h]`
    pub bias: Tensor,
    pub input_r: Factor,
    pub input_s: Factor,
    pub recurrent_r: Factor,
    pub recurrent_s: Factor,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub input_kernel: Var,
    pub recurrent_kernel: Var,
    pub bias: Var,
    pub input_r: FactorVars,
    pub input_s: FactorVars,
    pub recurrent_r: FactorVars,
    pub recurrent_s: FactorVars,
}

#[derive(Clone, Debug)]
pub struct LstmDraw {
    pub input_r: FactorDraw,
    pub input_s: FactorDraw,
    pub recurrent_r: FactorDraw,
    pub recurrent_s: FactorDraw,
}

impl Rank1LstmCell {
    pub fn new(
        input_kernel: Tensor,
        recurrent_kernel: Tensor,
        bias: Tensor,
        input_factors: (Factor, Factor),
        recurrent_factors: (Factor, Factor),
    ) -> Result<Self> {
        let (input_r, input_s) = input_factors;
        let (recurrent_r, recurrent_s) = recurrent_factors;
        let bad = || Error::Shape {
            op: "rank1_lstm",
            lhs: input_kernel.shape().to_vec(),
            rhs: recurrent_kernel.shape().to_vec(),
        };
        if input_kernel.ndim() != 2 || recurrent_kernel.ndim() != 2 {
            return Err(bad());
        }
        let (g4, d) = (input_kernel.shape()[0], input_kernel.shape()[1]);
        let h = recurrent_kernel.shape()[1];
        let k = input_r.k();
        let dims_ok = g4 == 4 * h
            && recurrent_kernel.shape()[0] == g4
            && bias.shape() == [g4]
            && input_r.dim() == g4
            && input_s.dim() == d
            && recurrent_r.dim() == g4
            && recurrent_s.dim() == h
            && [&input_s, &recurrent_r, &recurrent_s].iter().all(|f| f.k() == k);
        if !dims_ok {
            return Err(bad());
        }
        Ok(Self {
            input_kernel,
            recurrent_kernel,
            bias,
            input_r,
            input_s,
            recurrent_r,
            recurrent_s,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.recurrent_kernel.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph) -> LstmVars {
        LstmVars {
            input_kernel: g.param(self.input_kernel.clone()),
            recurrent_kernel: g.param(self.recurrent_kernel.clone()),
            bias: g.param(self.bias.clone()),
            input_r: self.input_r.bind(g),
            input_s: self.input_s.bind(g),
            recurrent_r: self.recurrent_r.bind(g),
            recurrent_s: self.recurrent_s.bind(g),
        }
    }

    pub fn trainable_vars(&self, v: &LstmVars) -> Vec<Var> {
        let mut out = vec![v.input_kernel, v.recurrent_kernel, v.bias];
        out.extend(self.input_r.trainable_vars(&v.input_r));
        out.extend(self.input_s.trainable_vars(&v.input_s));
        out.extend(self.recurrent_r.trainable_vars(&v.recurrent_r));
        out.extend(self.recurrent_s.trainable_vars(&v.recurrent_s));
        out
    }

    pub fn draw<R: Rng + ?Sized>(&self, mode: ForwardMode, rows: usize, rng: &mut R) -> Result<LstmDraw> {
        Ok(LstmDraw {
            input_r: self.input_r.draw(mode, rows, rng)?,
            input_s: self.input_s.draw(mode, rows, rng)?,
            recurrent_r: self.recurrent_r.draw(mode, rows, rng)?,
            recurrent_s: self.recurrent_s.draw(mode, rows, rng)?,
        })
    }

    /// Unrolls over `inputs` (each `[rows, in]`) from zero state and returns
    /// the hidden state after every step.
    pub fn forward(&self, g: &mut Graph, v: &LstmVars, inputs: &[Var], draw: &LstmDraw) -> Result<Vec<Var>> {
        let Some(&first) = inputs.first() else {
            return Ok(Vec::new());
        };
        let rows = g.shape(first)[0];
        if draw.input_r.components.len() != rows {
            return Err(Error::Batch {
                rows,
                k: self.input_r.k(),
            });
        }
        let hd = self.hidden_dim();
        let rx = self.input_r.rows_taped(g, &v.input_r, &draw.input_r)?;
        let sx = self.input_s.rows_taped(g, &v.input_s, &draw.input_s)?;
        let rh = self.recurrent_r.rows_taped(g, &v.recurrent_r, &draw.recurrent_r)?;
        let sh = self.recurrent_s.rows_taped(g, &v.recurrent_s, &draw.recurrent_s)?;
        let wx_t = g.transpose(v.input_kernel)?;
        let wh_t = g.transpose(v.recurrent_kernel)?;

        let mut h = g.constant(Tensor::zeros(&[rows, hd]));
        let mut c = g.constant(Tensor::zeros(&[rows, hd]));
        let mut states = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let xs = g.mul(x, sx)?;
            let zx = g.matmul(xs, wx_t)?;
            let zx = g.mul(zx, rx)?;
            let hs = g.mul(h, sh)?;
            let zh = g.matmul(hs, wh_t)?;
            let zh = g.mul(zh, rh)?;
            let z = g.add(zx, zh)?;
            let z = g.add(z, v.bias)?;

            let zi = g.slice_cols(z, 0, hd)?;
            let zf = g.slice_cols(z, hd, 2 * hd)?;
            let zg = g.slice_cols(z, 2 * hd, 3 * hd)?;
            let zo = g.slice_cols(z, 3 * hd, 4 * hd)?;
            let i = g.sigmoid(zi);
            let f = g.sigmoid(zf);
            let gg = g.tanh(zg);
            let o = g.sigmoid(zo);

            let fc = g.mul(f, c)?;
            let ig = g.mul(i, gg)?;
            c = g.add(fc, ig)?;
            let tc = g.tanh(c);
            h = g.mul(o, tc)?;
            states.push(h);
        }
        Ok(states)
    }

    pub fn kl_taped(&self, g: &mut Graph, v: &LstmVars) -> Result<Option<Var>> {
        let parts = [
            self.input_r.kl_taped(g, &v.input_r)?,
            self.input_s.kl_taped(g, &v.input_s)?,
            self.recurrent_r.kl_taped(g, &v.recurrent_r)?,
            self.recurrent_s.kl_taped(g, &v.recurrent_s)?,
        ];
        let mut acc: Option<Var> = None;
        for p in parts.into_iter().flatten() {
            acc = Some(match acc {
                Some(a) => g.add(a, p)?,
                None => p,
            });
        }
        Ok(acc)
    }
}

impl Layer for Rank1LstmCell {
    fn state(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input_kernel".to_string(), &self.input_kernel),
            ("recurrent_kernel".to_string(), &self.recurrent_kernel),
            ("bias".to_string(), &self.bias),
        ];
        for (name, f) in [
            ("input_r", &self.input_r),
            ("input_s", &self.input_s),
            ("recurrent_r", &self.recurrent_r),
            ("recurrent_s", &self.recurrent_s),
        ] {
            out.extend(f.state().into_iter().map(|(n, t)| (format!("{name}.{n}"), t)));
        }
        out
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("input_kernel".to_string(), &mut self.input_kernel),
            ("recurrent_kernel".to_string(), &mut self.recurrent_kernel),
            ("bias".to_string(), &mut self.bias),
        ];
        for (name, f) in [
            ("input_r", &mut self.input_r),
            ("input_s", &mut self.input_s),
            ("recurrent_r", &mut self.recurrent_r),
            ("recurrent_s", &mut self.recurrent_s),
        ] {
            out.extend(f.state_mut().into_iter().map(|(n, t)| (format!("{name}.{n}"), t)));
        }
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input_kernel, &mut self.recurrent_kernel, &mut self.bias];
        out.extend(self.input_r.trainable_mut());
        out.extend(self.input_s.trainable_mut());
        out.extend(self.recurrent_r.trainable_mut());
        out.extend(self.recurrent_s.trainable_mut());
        out
    }

    fn kernels(&self) -> Vec<&Tensor> {
        vec![&self.input_kernel, &self.recurrent_kernel]
    }

    fn kl(&self) -> Result<f64> {
        Ok(self.input_r.kl()? + self.input_s.kl()? + self.recurrent_r.kl()? + self.recurrent_s.kl()?)
    }
}
