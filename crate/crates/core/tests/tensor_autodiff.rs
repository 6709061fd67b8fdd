mod common;

use common::*;
use rand::Rng;
use rank1_core::autodiff::hessian::{hessian, hessian_quadratic_form, trace_of_product, ScalarFunction};
use rank1_core::autodiff::{Real, ReduceOp};
use rank1_core::{Error, Graph, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(eye.matmul(&m).unwrap(), m);
    let a = t(&[1, 2], &[1.0, 2.0]);
    let b = t(&[2, 1], &[3.0, 4.0]);
    assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let a = randn(&[3, 4], &mut r);
        let b = randn(&[4, 2], &mut r);
        let mut g = Graph::<f64>::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        let c = g.value(c);
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!((c.at(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let b = g.constant(Tensor::vector(vec![4.0, 5.0, 6.0]));
    let m = g.mul(a, b).unwrap();
    assert_eq!(g.value(m).data(), &[4.0, 10.0, 18.0]);
    let z = g.constant(Tensor::scalar(0.0));
    let th = g.tanh(z);
    assert_eq!(g.value(th).data(), &[0.0]);
    let xs = g.constant(Tensor::vector(vec![-5.0, 0.0, 5.0]));
    let sp = g.softplus(xs);
    for (v, x) in g.value(sp).data().iter().zip([-5.0f64, 0.0, 5.0]) {
        assert!((v - (1.0 + x.exp()).ln()).abs() < 1e-12);
    }
}

#[test]
fn division_by_zero_is_flagged_not_hidden() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::vector(vec![1.0]));
    let b = g.constant(Tensor::vector(vec![0.0]));
    let q = g.div(a, b).unwrap();
    assert_eq!(g.value(q).data()[0], f64::INFINITY);
    assert!(!g.value(q).all_finite());
}

#[test]
fn log_of_nonpositive_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::vector(vec![1.0, -1.0]));
    assert!(matches!(g.log(a), Err(Error::LogDomain(_))));
    let z = g.constant(Tensor::vector(vec![0.0]));
    assert!(g.log(z).is_err());
}

#[test]
fn broadcast_is_trailing_suffix_only() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let row = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = g.add(a, row).unwrap();
    assert_eq!(g.value(s).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    let bad = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(g.add(a, bad).is_err());
}

#[test]
fn reduce_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let l = g.reduce(ReduceOp::LogSumExp, z, None).unwrap();
    assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
    let big = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let l = g.reduce(ReduceOp::LogSumExp, big, None).unwrap();
    assert!((g.value(l).data()[0] - (1000.0 + 2f64.ln())).abs() < 1e-12);

    let mut r = rng(3);
    let v = randn(&[10], &mut r);
    let mut seq = 0.0;
    for &x in v.data() {
        seq += x;
    }
    let vv = g.constant(v);
    let s = g.sum(vv);
    assert!((g.value(s).data()[0] - seq).abs() < 1e-12);
}

#[test]
fn reduce_over_empty_axis_errors() {
    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::zeros(&[2, 0]));
    assert!(matches!(g.reduce(ReduceOp::Sum, e, Some(1)), Err(Error::EmptyReduction)));
    assert!(g.reduce(ReduceOp::Sum, e, Some(2)).is_err());
}

#[test]
fn logsumexp_shift_invariance() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let v = randn(&[7], &mut r);
        let c: f64 = r.gen_range(-50.0..50.0);
        let mut g = Graph::<f64>::new();
        let a = g.constant(v.clone());
        let b = g.constant(v.map(|x| x + c));
        let la = g.reduce(ReduceOp::LogSumExp, a, None).unwrap();
        let lb = g.reduce(ReduceOp::LogSumExp, b, None).unwrap();
        assert!((g.value(lb).data()[0] - g.value(la).data()[0] - c).abs() < 1e-12);
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2, 3]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert!(grads.wrt(x).data().iter().all(|&v| v == 1.0));
    assert_eq!(grads.wrt(s).data(), &[1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn unused_nodes_get_zero_gradient_and_nonscalar_loss_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = g.param(Tensor::vector(vec![5.0]));
    let e = g.exp(x);
    assert!(matches!(g.backward(e), Err(Error::NonScalarLoss(_))));
    let s = g.sum(e);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(unused).data(), &[0.0]);
}

#[test]
fn backward_is_bit_identical_on_replay() {
    let run = || {
        let mut r = rng(11);
        let a = randn(&[4, 3], &mut r);
        let w = randn(&[3, 5], &mut r);
        let mut g = Graph::<f64>::new();
        let (va, vw) = (g.param(a), g.param(w));
        let z = g.matmul(va, vw).unwrap();
        let t = g.tanh(z);
        let l = g.log_softmax(t).unwrap();
        let s = g.sum(l);
        let grads = g.backward(s).unwrap();
        (grads.wrt(va), grads.wrt(vw))
    };
    let (a1, w1) = run();
    let (a2, w2) = run();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&a2));
    assert_eq!(bits(&w1), bits(&w2));
}

#[test]
fn every_op_passes_gradcheck_over_twenty_seeds() {
    for (name, shapes, (lo, hi), build) in op_suite() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let params: Vec<Tensor> = shapes.iter().map(|s| uniform(s, lo, hi, &mut r)).collect();
            let err = gradcheck_graph(&params, build);
            assert!(err < GRAD_TOL, "{name} seed {seed}: {err:e}");
        }
    }
}

struct HalfQuad(Vec<f64>);
impl ScalarFunction for HalfQuad {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: Var) -> rank1_core::Result<Var> {
        let a = g.constant_f64(&Tensor::vector(self.0.clone()));
        let sq = g.square(p);
        let w = g.mul(sq, a)?;
        let s = g.sum(w);
        Ok(g.mul_scalar(s, 0.5))
    }
}

fn eye(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

#[test]
fn hessian_quadratic_form_examples() {
    let x = Tensor::vector(vec![0.3, -0.2, 1.0, 4.0, 0.0]);
    let q = hessian_quadratic_form(&HalfQuad(vec![1.0; 5]), &x, &eye(5)).unwrap();
    assert!((q - 5.0).abs() < 1e-14);
    let x = Tensor::vector(vec![0.3, -0.2]);
    let q = hessian_quadratic_form(&HalfQuad(vec![1.0, 2.0]), &x, &eye(2)).unwrap();
    assert!((q - 3.0).abs() < 1e-14);
}

/// `Σ tanh(W2 tanh(W1 x))` as a function of the flattened `W1`.
struct SmallTanhNet {
    x: Vec<f64>,
    w2: Tensor,
}

impl ScalarFunction for SmallTanhNet {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: Var) -> rank1_core::Result<Var> {
        let x = g.constant_f64(&Tensor::new(vec![3, 1], self.x.clone())?);
        let w1 = g.reshape(p, &[3, 3])?;
        let h = g.matmul(w1, x)?;
        let h = g.tanh(h);
        let w2 = g.constant_f64(&self.w2);
        let o = g.matmul(w2, h)?;
        let o = g.tanh(o);
        Ok(g.sum(o))
    }
}

#[test]
fn hessian_quadratic_form_matches_monte_carlo() {
    let mut r = rng(21);
    let f = SmallTanhNet {
        x: randn(&[3], &mut r).into_data(),
        w2: randn(&[2, 3], &mut r),
    };
    let w1 = randn(&[9], &mut r);
    let a = randn(&[9, 9], &mut r);
    let cov = a.matmul(&a.transpose().unwrap()).unwrap().map(|v| v / 9.0);
    let exact = hessian_quadratic_form(&f, &w1, &cov).unwrap();
    let h = hessian(&f, &w1).unwrap();
    assert!((trace_of_product(&h, &cov) - exact).abs() < 1e-12);
    let draws = 100_000;
    let mut q = Vec::with_capacity(draws);
    let (hd, ad) = (h.data(), a.data());
    for _ in 0..draws {
        let z = randn(&[9], &mut r);
        // Δ = A z / 3 has covariance A Aᵀ / 9.
        let d: Vec<f64> = (0..9).map(|i| (0..9).map(|j| ad[i * 9 + j] * z.data()[j]).sum::<f64>() / 3.0).collect();
        let mut s = 0.0;
        for i in 0..9 {
            for j in 0..9 {
                s += d[i] * hd[i * 9 + j] * d[j];
            }
        }
        q.push(s);
    }
    let (m, se) = mean_se(&q);
    assert!((m - exact).abs() < 3.0 * se, "{m} ± {se} vs {exact}");
}

#[test]
fn hessian_rejects_relu_graphs() {
    struct R;
    impl ScalarFunction for R {
        fn eval<T: Real>(&self, g: &mut Graph<T>, p: Var) -> rank1_core::Result<Var> {
            let y = g.relu(p);
            Ok(g.sum(y))
        }
    }
    assert!(matches!(hessian(&R, &Tensor::vector(vec![1.0])), Err(Error::NonSmooth(_))));
}
