//! Helpers shared by the integration suites. Oracles here are written
//! without the library's graph code so they can check it independently.

#![allow(dead_code)]

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rank1_core::distributions::{inverse_softplus, Family, MixtureDistribution, ScaleDistribution};
use rank1_core::layers::{Activation, Factor, ForwardMode, Layer, Padding, Rank1Conv2D, Rank1Dense, Rank1LstmCell};
use rank1_core::trainer::{he_normal, load_splits, lr_schedule, DataSplits, TrainConfig, Trainer};
use rank1_core::data::duplicate_batch;
use rank1_core::model::Rank1Mlp;
use rank1_core::objectives::{nll_taped, LikelihoodMode};
use rank1_core::autodiff::check::check_gradient;
use rank1_core::autodiff::ReduceOp;
use rank1_core::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Trainable factor with locations near 1 and scales in `[0.1, 0.5)`;
/// point families get no scale.
pub fn random_factor(family: Family, k: usize, dim: usize, rng: &mut impl Rng) -> Factor {
    let loc = uniform(&[k, dim], 0.5, 1.5, rng);
    let loc = if family == Family::LogGaussian { loc.map(|v| v.ln()) } else { loc };
    let raw = (!family.is_point()).then(|| uniform(&[k, dim], 0.1, 0.5, rng).map(inverse_softplus));
    let posterior = MixtureDistribution::new(family, loc, raw).unwrap();
    let prior = if family.is_point() {
        posterior.clone()
    } else {
        let prior_loc = if family == Family::LogGaussian { 0.0 } else { 1.0 };
        MixtureDistribution::uniform(family, k, dim, prior_loc, 0.3).unwrap()
    };
    Factor::new(posterior, prior, true).unwrap()
}

/// `φ((W ∘ r sᵀ) x + b)` for a single example, built by materializing the
/// perturbed weight.
pub fn explicit_dense(w: &Tensor, b: &[f64], r: &[f64], s: &[f64], x: &[f64], act: Activation) -> Vec<f64> {
    let (m, d) = (w.shape()[0], w.shape()[1]);
    (0..m)
        .map(|i| {
            let mut z = b[i];
            for j in 0..d {
                z += w.data()[i * d + j] * r[i] * s[j] * x[j];
            }
            act.eval(z)
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Log-softmax of one logit row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// The two-moons smoke configuration (K=4 Gaussian mixture, 2-64-64-2,
/// 200 epochs).
pub fn smoke_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_text(
        "dataset = two_moons\nnum_examples = 2000\ndataset_noise = 0.1\ntest_examples = 1000\n\
         ensemble_size = 4\nfamily = normal\nhidden_sizes = [64, 64]\nactivation = relu\n\
         train_epochs = 200\nkl_annealing_epochs = 133\nlr_decay_epochs = [100, 150, 180]\n",
    )
    .unwrap();
    cfg.seed = seed;
    cfg.validate().unwrap();
    cfg
}

pub struct SmokeRun {
    pub trainer: Trainer,
    pub splits: DataSplits,
    pub train_losses: Vec<f64>,
}

pub fn train_smoke(seed: u64) -> SmokeRun {
    let cfg = smoke_config(seed);
    let splits = load_splits(&cfg).unwrap();
    let mut trainer = Trainer::new(cfg, splits.train.dim(), splits.train.num_classes).unwrap();
    let reports = trainer.fit(&splits.train, &splits.held_out, |_, _| Ok(())).unwrap();
    let train_losses = reports.iter().map(|r| r.train_loss.unwrap()).collect();
    SmokeRun {
        trainer,
        splits,
        train_losses,
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Mean and standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Largest per-coordinate relative error between taped gradients and
/// central differences of `build` over every tensor in `params`.
pub fn gradcheck_graph(
    params: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> rank1_core::Result<Var>,
) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, p) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        let mut f = |probe: &Tensor| {
            let mut g = Graph::<f64>::new();
            let vars: Vec<Var> = params
                .iter()
                .enumerate()
                .map(|(j, q)| g.param(if j == i { probe.clone() } else { q.clone() }))
                .collect();
            let out = build(&mut g, &vars)?;
            Ok(g.value(out).data()[0])
        };
        let res = check_gradient(&mut f, p, &analytic, GRAD_H).unwrap();
        worst = worst.max(res.max_rel_error);
    }
    worst
}

/// Same check for a structured object whose trainable tensors are
/// exposed by `params_mut` and whose loss graph returns the matching leaves.
pub fn gradcheck_object<L: Clone>(
    obj: &L,
    params_mut: impl Fn(&mut L) -> Vec<&mut Tensor>,
    run: impl Fn(&L, &mut Graph) -> rank1_core::Result<(Var, Vec<Var>)>,
) -> f64 {
    let mut g = Graph::<f64>::new();
    let (out, leaves) = run(obj, &mut g).unwrap();
    let grads = g.backward(out).unwrap();
    let mut base = obj.clone();
    let count = params_mut(&mut base).len();
    assert_eq!(count, leaves.len(), "leaf order mismatch");
    let mut worst = 0.0f64;
    for (i, &leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf);
        let x = params_mut(&mut base)[i].clone();
        let mut f = |probe: &Tensor| {
            let mut o = obj.clone();
            *params_mut(&mut o)[i] = probe.clone();
            let mut g = Graph::<f64>::new();
            let (out, _) = run(&o, &mut g)?;
            Ok(g.value(out).data()[0])
        };
        let res = check_gradient(&mut f, &x, &analytic, GRAD_H).unwrap();
        worst = worst.max(res.max_rel_error);
    }
    worst
}

/// `Σ out ∘ c` for a fixed random `c`, so every output coordinate matters.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> rank1_core::Result<Var> {
    let c = randn(g.shape(out), &mut rng(seed ^ 0x5eed));
    let c = g.constant(c);
    let p = g.mul(out, c)?;
    Ok(g.sum(p))
}

pub type Builder = fn(&mut Graph, &[Var]) -> rank1_core::Result<Var>;

/// Every differentiable primitive as `(name, param shapes, input range, loss)`.
pub fn op_suite() -> Vec<(&'static str, Vec<Vec<usize>>, (f64, f64), Builder)> {
    fn ws(g: &mut Graph, v: Var) -> rank1_core::Result<Var> {
        weighted_sum(g, v, 7)
    }
    vec![
        ("tanh", vec![vec![3, 4]], (-2.0, 2.0), |g, p| {
            let y = g.tanh(p[0]);
            ws(g, y)
        }),
        ("softplus", vec![vec![3, 4]], (-3.0, 3.0), |g, p| {
            let y = g.softplus(p[0]);
            ws(g, y)
        }),
        ("sigmoid", vec![vec![3, 4]], (-3.0, 3.0), |g, p| {
            let y = g.sigmoid(p[0]);
            ws(g, y)
        }),
        ("relu", vec![vec![3, 4]], (0.1, 2.0), |g, p| {
            let n = g.mul_scalar(p[0], -1.0);
            let a = g.relu(p[0]);
            let b = g.relu(n);
            let y = g.sub(a, b)?;
            ws(g, y)
        }),
        ("exp", vec![vec![3, 4]], (-1.0, 1.0), |g, p| {
            let y = g.exp(p[0]);
            ws(g, y)
        }),
        ("log", vec![vec![3, 4]], (0.5, 2.0), |g, p| {
            let y = g.log(p[0])?;
            ws(g, y)
        }),
        ("square", vec![vec![3, 4]], (-2.0, 2.0), |g, p| {
            let y = g.square(p[0]);
            ws(g, y)
        }),
        ("sqrt", vec![vec![3, 4]], (0.5, 2.0), |g, p| {
            let y = g.sqrt(p[0]);
            ws(g, y)
        }),
        ("add", vec![vec![3, 4], vec![4]], (-2.0, 2.0), |g, p| {
            let y = g.add(p[0], p[1])?;
            ws(g, y)
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], (-2.0, 2.0), |g, p| {
            let y = g.sub(p[0], p[1])?;
            ws(g, y)
        }),
        ("mul", vec![vec![3, 4], vec![4]], (-2.0, 2.0), |g, p| {
            let y = g.mul(p[0], p[1])?;
            ws(g, y)
        }),
        ("div", vec![vec![3, 4], vec![4]], (0.5, 2.0), |g, p| {
            let y = g.div(p[0], p[1])?;
            ws(g, y)
        }),
        ("add_scalar_mul_scalar", vec![vec![3, 4]], (-2.0, 2.0), |g, p| {
            let a = g.add_scalar(p[0], 0.7);
            let y = g.mul_scalar(a, -1.3);
            let y = g.mul(y, a)?;
            ws(g, y)
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], (-2.0, 2.0), |g, p| {
            let y = g.matmul(p[0], p[1])?;
            ws(g, y)
        }),
        ("transpose", vec![vec![3, 4]], (-2.0, 2.0), |g, p| {
            let y = g.transpose(p[0])?;
            let y = g.square(y);
            ws(g, y)
        }),
        ("reshape", vec![vec![3, 4]], (-2.0, 2.0), |g, p| {
            let y = g.reshape(p[0], &[2, 6])?;
            let y = g.square(y);
            ws(g, y)
        }),
        ("gather", vec![vec![3, 4]], (-2.0, 2.0), |g, p| {
            let idx: Arc<[Option<usize>]> = vec![Some(0), None, Some(5), Some(5), Some(11), Some(3)].into();
            let y = g.gather(p[0], idx, &[2, 3])?;
            let y = g.square(y);
            ws(g, y)
        }),
        ("gather_rows", vec![vec![3, 4]], (-2.0, 2.0), |g, p| {
            let y = g.gather_rows(p[0], &[2, 0, 2, 1])?;
            let y = g.square(y);
            ws(g, y)
        }),
        ("slice_cols", vec![vec![3, 4]], (-2.0, 2.0), |g, p| {
            let y = g.slice_cols(p[0], 1, 3)?;
            let y = g.square(y);
            ws(g, y)
        }),
        ("reduce_sum_axis0", vec![vec![2, 3, 4]], (-2.0, 2.0), |g, p| {
            let y = g.reduce(ReduceOp::Sum, p[0], Some(0))?;
            let y = g.square(y);
            ws(g, y)
        }),
        ("reduce_mean_axis1", vec![vec![2, 3, 4]], (-2.0, 2.0), |g, p| {
            let y = g.reduce(ReduceOp::Mean, p[0], Some(1))?;
            let y = g.square(y);
            ws(g, y)
        }),
        ("reduce_logsumexp_axis2", vec![vec![2, 3, 4]], (-2.0, 2.0), |g, p| {
            let y = g.reduce(ReduceOp::LogSumExp, p[0], Some(2))?;
            ws(g, y)
        }),
        ("reduce_logsumexp_all", vec![vec![2, 3, 4]], (-2.0, 2.0), |g, p| {
            Ok(g.reduce(ReduceOp::LogSumExp, p[0], None)?)
        }),
        ("log_softmax", vec![vec![3, 4]], (-2.0, 2.0), |g, p| {
            let y = g.log_softmax(p[0])?;
            ws(g, y)
        }),
    ]
}


/// Monte Carlo `E_q[log q − log p]` with its standard error.
pub fn kl_monte_carlo(q: &ScaleDistribution, p: &ScaleDistribution, draws: usize, rng: &mut impl Rng) -> (f64, f64) {
    let v: Vec<f64> = (0..draws)
        .map(|_| {
            let x = q.sample(rng);
            q.log_density(&x).unwrap() - p.log_density(&x).unwrap()
        })
        .collect();
    mean_se(&v)
}

/// Random `(q, p)` pair of one family and dimension with moderate
/// location gaps and scale ratios.
pub fn random_pair(family: Family, dim: usize, rng: &mut impl Rng) -> (ScaleDistribution, ScaleDistribution) {
    let mut draw = || {
        let loc: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scale: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.5..1.5)).collect();
        ScaleDistribution::new(family, loc, Some(scale)).unwrap()
    };
    let q = draw();
    (q, draw())
}

/// Direct NHWC convolution of one example with the materialized kernel
/// `W[ky, kx, ci, co] · s[ci] · r[co]`; "same" padding puts the extra pad
/// row/column at the bottom/right.
#[allow(clippy::too_many_arguments)]
pub fn explicit_conv(
    w: &Tensor,
    b: &[f64],
    r: &[f64],
    s: &[f64],
    x: &[f64],
    (h, wd): (usize, usize),
    stride: usize,
    same: bool,
    act: Activation,
) -> Vec<f64> {
    let ks = w.shape();
    let (kh, kw, cin, cout) = (ks[0], ks[1], ks[2], ks[3]);
    let extent = |n: usize, k: usize| {
        if same {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            (out, total / 2)
        } else {
            ((n - k) / stride + 1, 0)
        }
    };
    let (ho, ph) = extent(h, kh);
    let (wo, pw) = extent(wd, kw);
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut z = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - ph as isize;
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                            continue;
                        }
                        for ci in 0..cin {
                            let wv = w.data()[((ky * kw + kx) * cin + ci) * cout + co] * s[ci] * r[co];
                            z += wv * x[((iy as usize) * wd + ix as usize) * cin + ci];
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = act.eval(z + b[co]);
            }
        }
    }
    out
}

/// Factor values of one example for an LSTM cell: `(rx, sx, rh, sh)`.
pub struct LstmFactors<'a> {
    pub rx: &'a [f64],
    pub sx: &'a [f64],
    pub rh: &'a [f64],
    pub sh: &'a [f64],
}

/// Unrolled LSTM for one sequence with materialized perturbed kernels;
/// returns every hidden state.
pub fn explicit_lstm(wx: &Tensor, wh: &Tensor, b: &[f64], f: &LstmFactors, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let hd = wh.shape()[1];
    let d = wx.shape()[1];
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let mut states = Vec::new();
    for x in xs {
        let z: Vec<f64> = (0..4 * hd)
            .map(|i| {
                let mut v = b[i];
                for j in 0..d {
                    v += wx.data()[i * d + j] * f.rx[i] * f.sx[j] * x[j];
                }
                for j in 0..hd {
                    v += wh.data()[i * hd + j] * f.rh[i] * f.sh[j] * h[j];
                }
                v
            })
            .collect();
        for u in 0..hd {
            let (i, fg, g, o) = (
                sigmoid(z[u]),
                sigmoid(z[hd + u]),
                z[2 * hd + u].tanh(),
                sigmoid(z[3 * hd + u]),
            );
            c[u] = fg * c[u] + i * g;
            h[u] = o * c[u].tanh();
        }
        states.push(h.clone());
    }
    states
}

/// Random dense layer with factors of `family` on both sides.
pub fn random_dense(family: Family, k: usize, m: usize, d: usize, act: Activation, rng: &mut impl Rng) -> Rank1Dense {
    let w = randn(&[m, d], rng);
    let b = randn(&[m], rng);
    let r = random_factor(family, k, m, rng);
    let s = random_factor(family, k, d, rng);
    Rank1Dense::new(w, b, r, s, act).unwrap()
}

pub fn random_conv(family: Family, k: usize, stride: usize, padding: Padding, rng: &mut impl Rng) -> Rank1Conv2D {
    let (cin, cout) = (2, 3);
    let w = randn(&[3, 3, cin, cout], rng);
    let b = randn(&[cout], rng);
    let r = random_factor(family, k, cout, rng);
    let s = random_factor(family, k, cin, rng);
    Rank1Conv2D::new(w, b, r, s, stride, padding, Activation::Tanh).unwrap()
}

pub fn random_lstm(family: Family, k: usize, d: usize, hd: usize, rng: &mut impl Rng) -> Rank1LstmCell {
    let wx = randn(&[4 * hd, d], rng).map(|v| 0.5 * v);
    let wh = randn(&[4 * hd, hd], rng).map(|v| 0.5 * v);
    let b = randn(&[4 * hd], rng);
    let fx = (random_factor(family, k, 4 * hd, rng), random_factor(family, k, d, rng));
    let fh = (random_factor(family, k, 4 * hd, rng), random_factor(family, k, hd, rng));
    Rank1LstmCell::new(wx, wh, b, fx, fh).unwrap()
}

/// Largest deviation between the grouped dense forward and the explicit
/// per-example computation, for one random layer and draw.
pub fn dense_vectorization_gap(seed: u64, family: Family) -> f64 {
    let mut r = rng(seed);
    let (k, b) = (3, 4);
    let layer = random_dense(family, k, 3, 4, Activation::Tanh, &mut r);
    let x = randn(&[k * b, 4], &mut r);
    let draw = layer.draw(ForwardMode::Sample, k * b, &mut r).unwrap();
    let mut g = Graph::<f64>::new();
    let v = layer.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, &v, xv, &draw).unwrap();
    let (rv, sv) = (layer.r.rows_value(&draw.r).unwrap(), layer.s.rows_value(&draw.s).unwrap());
    let mut gap = 0.0f64;
    for i in 0..k * b {
        let want = explicit_dense(&layer.kernel, layer.bias.data(), rv.row(i), sv.row(i), x.row(i), layer.activation);
        for (a, w) in g.value(y).row(i).iter().zip(&want) {
            gap = gap.max((a - w).abs());
        }
    }
    gap
}

pub fn conv_vectorization_gap(seed: u64, family: Family) -> f64 {
    let mut r = rng(seed);
    let (k, b, h, w) = (2, 2, 5, 4);
    let mut gap = 0.0f64;
    for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
        let layer = random_conv(family, k, stride, padding, &mut r);
        let x = randn(&[k * b, h, w, 2], &mut r);
        let draw = layer.draw(ForwardMode::Sample, k * b, &mut r).unwrap();
        let mut g = Graph::<f64>::new();
        let v = layer.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = layer.forward(&mut g, &v, xv, &draw).unwrap();
        let (rv, sv) = (layer.r.rows_value(&draw.r).unwrap(), layer.s.rows_value(&draw.s).unwrap());
        let per = h * w * 2;
        let out = g.value(y);
        let per_out = out.len() / (k * b);
        for n in 0..k * b {
            let want = explicit_conv(
                &layer.kernel,
                layer.bias.data(),
                rv.row(n),
                sv.row(n),
                &x.data()[n * per..(n + 1) * per],
                (h, w),
                stride,
                padding == Padding::Same,
                Activation::Tanh,
            );
            assert_eq!(want.len(), per_out);
            for (a, w) in out.data()[n * per_out..(n + 1) * per_out].iter().zip(&want) {
                gap = gap.max((a - w).abs());
            }
        }
    }
    gap
}

pub fn lstm_vectorization_gap(seed: u64, family: Family) -> f64 {
    let mut r = rng(seed);
    let (k, b, d, hd, steps) = (2, 3, 3, 2, 4);
    let cell = random_lstm(family, k, d, hd, &mut r);
    let xs: Vec<Tensor> = (0..steps).map(|_| randn(&[k * b, d], &mut r)).collect();
    let draw = cell.draw(ForwardMode::Sample, k * b, &mut r).unwrap();
    let mut g = Graph::<f64>::new();
    let v = cell.bind(&mut g);
    let inputs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let states = cell.forward(&mut g, &v, &inputs, &draw).unwrap();
    let rx = cell.input_r.rows_value(&draw.input_r).unwrap();
    let sx = cell.input_s.rows_value(&draw.input_s).unwrap();
    let rh = cell.recurrent_r.rows_value(&draw.recurrent_r).unwrap();
    let sh = cell.recurrent_s.rows_value(&draw.recurrent_s).unwrap();
    let mut gap = 0.0f64;
    for n in 0..k * b {
        let f = LstmFactors {
            rx: rx.row(n),
            sx: sx.row(n),
            rh: rh.row(n),
            sh: sh.row(n),
        };
        let seq: Vec<Vec<f64>> = xs.iter().map(|x| x.row(n).to_vec()).collect();
        let want = explicit_lstm(&cell.input_kernel, &cell.recurrent_kernel, cell.bias.data(), &f, &seq);
        for (t, s) in states.iter().enumerate() {
            for (a, w) in g.value(*s).row(n).iter().zip(&want[t]) {
                gap = gap.max((a - w).abs());
            }
        }
    }
    gap
}

/// Gradcheck of each layer type through a fixed sampled draw.
pub fn layer_gradcheck(seed: u64, family: Family) -> [(&'static str, f64); 3] {
    let mut r = rng(seed);
    let dense = random_dense(family, 2, 3, 4, Activation::Tanh, &mut r);
    let x = randn(&[4, 4], &mut r);
    let draw = dense.draw(ForwardMode::Sample, 4, &mut r).unwrap();
    let e_dense = gradcheck_object(&dense, |l| l.trainable_mut(), |l, g| {
        let v = l.bind(g);
        let xv = g.constant(x.clone());
        let y = l.forward(g, &v, xv, &draw)?;
        Ok((weighted_sum(g, y, seed)?, l.trainable_vars(&v)))
    });

    let conv = random_conv(family, 2, 2, Padding::Same, &mut r);
    let xc = randn(&[2, 4, 3, 2], &mut r);
    let cdraw = conv.draw(ForwardMode::Sample, 2, &mut r).unwrap();
    let e_conv = gradcheck_object(&conv, |l| l.trainable_mut(), |l, g| {
        let v = l.bind(g);
        let xv = g.constant(xc.clone());
        let y = l.forward(g, &v, xv, &cdraw)?;
        Ok((weighted_sum(g, y, seed)?, l.trainable_vars(&v)))
    });

    let cell = random_lstm(family, 2, 3, 2, &mut r);
    let xs: Vec<Tensor> = (0..3).map(|_| randn(&[2, 3], &mut r)).collect();
    let ldraw = cell.draw(ForwardMode::Sample, 2, &mut r).unwrap();
    let e_lstm = gradcheck_object(&cell, |l| l.trainable_mut(), |l, g| {
        let v = l.bind(g);
        let inputs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let states = l.forward(g, &v, &inputs, &ldraw)?;
        let last = *states.last().unwrap();
        Ok((weighted_sum(g, last, seed)?, l.trainable_vars(&v)))
    });
    [("dense", e_dense), ("conv2d", e_conv), ("lstm", e_lstm)]
}

/// Gaussian factor with every component at `N(loc, scale²)` and the same prior.
pub fn gaussian_factor(k: usize, dim: usize, loc: f64, scale: f64) -> Factor {
    let q = MixtureDistribution::uniform(Family::Gaussian, k, dim, loc, scale).unwrap();
    Factor::new(q.clone(), q, true).unwrap()
}

/// Two-layer tanh/identity classifier with Gaussian factors on both sides.
pub fn small_mlp(k: usize, scale: f64, rng: &mut impl Rng) -> Rank1Mlp {
    let l1 = Rank1Dense::new(
        randn(&[8, 3], rng),
        randn(&[8], rng),
        gaussian_factor(k, 8, 1.0, scale),
        gaussian_factor(k, 3, 1.0, scale),
        Activation::Tanh,
    )
    .unwrap();
    let l2 = Rank1Dense::new(
        randn(&[2, 8], rng).map(|v| 0.5 * v),
        Tensor::zeros(&[2]),
        gaussian_factor(k, 2, 1.0, scale),
        gaussian_factor(k, 8, 1.0, scale),
        Activation::Identity,
    )
    .unwrap();
    Rank1Mlp::new(vec![l1, l2]).unwrap()
}

/// Mean NLL gradient of `model` on `(x, y)` under one draw in `mode`,
/// flattened in trainable order.
pub fn nll_gradient(model: &Rank1Mlp, x: &Tensor, y: &[usize], mode: ForwardMode, seed: u64) -> Vec<f64> {
    let k = model.k();
    let dup = duplicate_batch(x, k).unwrap();
    let mut g = Graph::<f64>::new();
    let vars = model.bind(&mut g);
    let draws = model.draw(mode, dup.shape()[0], &mut rng(seed)).unwrap();
    let xv = g.constant(dup);
    let logits = model.forward(&mut g, &vars, xv, &draws).unwrap();
    let logits = g.reshape(logits, &[k, y.len(), model.num_classes()]).unwrap();
    let nll = nll_taped(&mut g, LikelihoodMode::AverageNll, logits, y).unwrap();
    let grads = g.backward(nll).unwrap();
    model
        .trainable_vars(&vars)
        .into_iter()
        .flat_map(|v| grads.wrt(v).data().to_vec())
        .collect()
}

/// Total variance `E‖g − ḡ‖²` of the gradient estimator across `seeds`
/// draws, with its standard error.
pub fn gradient_variance(model: &Rank1Mlp, x: &Tensor, y: &[usize], mode: ForwardMode, seeds: u64) -> (f64, f64) {
    let gs: Vec<Vec<f64>> = (0..seeds).map(|s| nll_gradient(model, x, y, mode, s)).collect();
    let n = gs.len() as f64;
    let dim = gs[0].len();
    let mean: Vec<f64> = (0..dim).map(|i| gs.iter().map(|g| g[i]).sum::<f64>() / n).collect();
    let dev: Vec<f64> = gs
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>() * n / (n - 1.0))
        .collect();
    mean_se(&dev)
}

/// Plain MLP trained with hand-rolled SGD momentum on the same autodiff
/// engine: no factors, no mixture, no objective module.
pub struct PlainMlp {
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    velocity: Vec<Tensor>,
}

impl PlainMlp {
    pub fn init(cfg: &TrainConfig, dims: &[usize], rng: &mut impl rand::Rng) -> Self {
        let kernels: Vec<Tensor> = dims.windows(2).map(|p| he_normal(p[1], p[0], rng)).collect();
        let biases: Vec<Tensor> = dims[1..].iter().map(|&m| Tensor::zeros(&[m])).collect();
        let velocity = kernels.iter().zip(&biases).flat_map(|(k, b)| [Tensor::zeros(k.shape()), Tensor::zeros(b.shape())]).collect();
        assert!(cfg.hidden_sizes.len() + 2 == dims.len());
        Self { kernels, biases, velocity }
    }

    pub fn step(&mut self, x: &Tensor, y: &[usize], lr: f64, cfg: &TrainConfig) {
        let mut g = Graph::<f64>::new();
        let ws: Vec<Var> = self.kernels.iter().map(|w| g.param(w.clone())).collect();
        let bs: Vec<Var> = self.biases.iter().map(|b| g.param(b.clone())).collect();
        let mut h = g.constant(x.clone());
        for (i, (&w, &b)) in ws.iter().zip(&bs).enumerate() {
            let wt = g.transpose(w).unwrap();
            let z = g.matmul(h, wt).unwrap();
            h = g.add(z, b).unwrap();
            if i + 1 < ws.len() {
                h = g.relu(h);
            }
        }
        let c = self.biases.last().unwrap().len();
        let lp = g.log_softmax(h).unwrap();
        let idx: std::sync::Arc<[Option<usize>]> = y.iter().enumerate().map(|(i, &l)| Some(i * c + l)).collect();
        let picked = g.gather(lp, idx, &[y.len()]).unwrap();
        let neg = g.mul_scalar(picked, -1.0);
        let mut loss = g.mean(neg);
        let mut sq: Option<Var> = None;
        for &w in &ws {
            let s = g.square(w);
            let s = g.sum(s);
            sq = Some(match sq {
                Some(a) => g.add(a, s).unwrap(),
                None => s,
            });
        }
        let pen = g.mul_scalar(sq.unwrap(), cfg.l2);
        loss = g.add(loss, pen).unwrap();
        let grads = g.backward(loss).unwrap();
        let params = self.kernels.iter_mut().zip(self.biases.iter_mut()).flat_map(|(k, b)| [k, b]);
        let vars = ws.iter().zip(&bs).flat_map(|(&k, &b)| [k, b]);
        for ((p, v), var) in params.zip(&mut self.velocity).zip(vars) {
            let gr = grads.wrt(var);
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                *vi = cfg.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Trains a K=1 point-posterior trainer and the plain twin side by side on
/// two-moons and reports whether every kernel and bias agrees bit for bit.
pub fn deterministic_twin_matches(seed: u64) -> bool {
    let cfg = TrainConfig::from_text(&format!(
        "ensemble_size = 1\nfamily = point\ndropout_rate = 0\nl2 = 0.001\nseed = {seed}\n\
         train_epochs = 6\nkl_annealing_epochs = 4\nlr_decay_epochs = [4]\nhidden_sizes = [8]\nbatch_size = 16\n"
    ))
    .unwrap();
    let data = rank1_core::data::two_moons(96, 0.1, 3).unwrap();
    let mut trainer = Trainer::new(cfg.clone(), 2, 2).unwrap();
    let mut r = rng(cfg.seed);
    let mut plain = PlainMlp::init(&cfg, &[2, 8, 2], &mut r);
    for epoch in 0..cfg.train_epochs {
        trainer.train_epoch(&data).unwrap();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk).unwrap();
            plain.step(&x, &y, lr_schedule(epoch, &cfg), &cfg);
        }
    }
    trainer
        .model
        .layers
        .iter()
        .zip(plain.kernels.iter().zip(&plain.biases))
        .all(|(l, (w, b))| &l.kernel == w && &l.bias == b)
}

/// Largest deviation between a K=4 point-posterior layer's forward and the
/// per-member BatchEnsemble loop `φ((W (x ∘ s_k)) ∘ r_k + b)`; exact
/// agreement gives 0.
pub fn batch_ensemble_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (k, b, m, d) = (4, 3, 5, 6);
    let rv = uniform(&[k, m], 0.5, 1.5, &mut r);
    let sv = uniform(&[k, d], 0.5, 1.5, &mut r);
    let point = |t: &Tensor| {
        let q = MixtureDistribution::new(Family::Point, t.clone(), None).unwrap();
        Factor::new(q.clone(), q, true).unwrap()
    };
    let layer = Rank1Dense::new(randn(&[m, d], &mut r), randn(&[m], &mut r), point(&rv), point(&sv), Activation::Tanh).unwrap();
    let x = randn(&[k * b, d], &mut r);
    let mut g = Graph::<f64>::new();
    let v = layer.bind(&mut g);
    let draw = layer.draw(ForwardMode::Sample, k * b, &mut r).unwrap();
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, &v, xv, &draw).unwrap();
    let y = g.value(y);
    let mut gap = 0.0f64;
    for row in 0..k * b {
        let c = row / b;
        for i in 0..m {
            let mut z = 0.0;
            for j in 0..d {
                z += (x.row(row)[j] * sv.row(c)[j]) * layer.kernel.data()[i * d + j];
            }
            let want = (z * rv.row(c)[i] + layer.bias.data()[i]).tanh();
            gap = gap.max((y.row(row)[i] - want).abs());
        }
    }
    gap
}
