//! `gradcheck`, `kl-check`, `verify-theorem` and `induced-prior`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rank1_core::autodiff::check::check_gradient;
use rank1_core::data::duplicate_batch;
use rank1_core::distributions::{kl_divergence, Family, MixtureDistribution, ScaleDistribution};
use rank1_core::layers::{Activation, Factor, Rank1Dense};
use rank1_core::objectives::{elbo_loss, ElboConfig, LikelihoodMode};
use rank1_core::theorem::{verify, VerifyConfig};
use rank1_core::trainer::{build_model, TrainConfig};
use rank1_core::Tensor;
use serde_json::json;

use crate::output::Sink;
use crate::{resolve_seed, GradcheckArgs, InducedArgs, KlCheckArgs, TheoremArgs};

const FAMILIES: [Family; 3] = [Family::Gaussian, Family::Cauchy, Family::LogGaussian];
const FD_STEP: f64 = 1e-5;

fn gaussian_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> anyhow::Result<Tensor> {
    let n = shape.iter().product();
    let d = ScaleDistribution::gaussian(vec![0.0; n], vec![1.0; n])?;
    Ok(Tensor::new(shape.to_vec(), d.sample(rng))?)
}

/// Checks every trainable tensor of a small random model against central
/// differences of the ELBO, reusing one noise draw for all evaluations.
pub fn gradcheck(args: GradcheckArgs) -> anyhow::Result<bool> {
    let root = resolve_seed(args.seed)?;
    let mut sink = Sink::open(args.output.log_file.as_deref())?;
    let (k, b, d, classes) = (2, 3, 3, 3);
    let mut worst = 0.0f64;
    let mut checks = 0usize;
    for family in FAMILIES {
        for offset in 0..args.seeds {
            let seed = root.wrapping_add(offset);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cfg = TrainConfig {
                ensemble_size: k,
                family,
                hidden_sizes: vec![5],
                activation: Activation::Tanh,
                dropout_rate: 0.1,
                seed,
                ..TrainConfig::default()
            };
            if family == Family::LogGaussian {
                cfg.random_sign_init = -0.3;
            }
            let model = build_model(&cfg, d, classes, &mut rng)?;
            let x = duplicate_batch(&gaussian_tensor(&[b, d], &mut rng)?, k)?;
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();
            let mode = if offset % 2 == 0 {
                LikelihoodMode::AverageNll
            } else {
                LikelihoodMode::MixtureNll
            };
            let elbo = ElboConfig {
                train_set_size: 64,
                batch_size: b,
                l2: 1e-3,
                kl_annealing_epochs: 2,
                likelihood_mode: mode,
            };
            let noise_seed = rng.gen::<u64>();
            let analytic = elbo_loss(&model, &x, &labels, 1, &elbo, &mut ChaCha8Rng::seed_from_u64(noise_seed))?;
            for (i, grad) in analytic.grads.iter().enumerate() {
                let mut probe_model = model.clone();
                let at = probe_model.trainable_mut()[i].clone();
                let mut f = |t: &Tensor| {
                    *probe_model.trainable_mut()[i] = t.clone();
                    let mut r = ChaCha8Rng::seed_from_u64(noise_seed);
                    Ok(elbo_loss(&probe_model, &x, &labels, 1, &elbo, &mut r)?.loss)
                };
                let res = check_gradient(&mut f, &at, grad, FD_STEP)?;
                worst = worst.max(res.max_rel_error);
                checks += 1;
                sink.json(&json!({
                    "family": family.name(),
                    "seed": seed,
                    "likelihood_mode": mode.name(),
                    "tensor": i,
                    "max_rel_error": res.max_rel_error,
                    "pass": res.passes(args.tolerance),
                }))?;
            }
        }
    }
    let pass = worst < args.tolerance;
    sink.json(&json!({
        "checks": checks,
        "max_rel_error": worst,
        "tolerance": args.tolerance,
        "seed": root,
        "pass": pass,
    }))?;
    sink.finish()?;
    Ok(pass)
}

fn random_distribution(family: Family, rng: &mut ChaCha8Rng) -> anyhow::Result<ScaleDistribution> {
    let loc = rng.gen_range(-1.0..1.0);
    let scale = rng.gen_range(0.3..2.0);
    Ok(ScaleDistribution::new(family, vec![loc], Some(vec![scale]))?)
}

/// Closed-form KL against the mean of `log q(x) − log p(x)` over `x ~ q`.
pub fn kl_check(args: KlCheckArgs) -> anyhow::Result<bool> {
    let seed = resolve_seed(args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sink = Sink::open(args.output.log_file.as_deref())?;
    let mut misses = 0usize;
    for family in FAMILIES {
        for trial in 0..args.trials {
            let q = random_distribution(family, &mut rng)?;
            let p = random_distribution(family, &mut rng)?;
            let closed = kl_divergence(&q, &p)?;
            let mut terms = Vec::with_capacity(args.draws);
            for _ in 0..args.draws {
                let x = q.sample(&mut rng);
                terms.push(q.log_density(&x)? - p.log_density(&x)?);
            }
            let n = terms.len() as f64;
            let mean = terms.iter().sum::<f64>() / n;
            let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            let within = (mean - closed).abs() < 3.0 * se;
            misses += usize::from(!within);
            sink.json(&json!({
                "family": family.name(),
                "trial": trial,
                "closed_form": closed,
                "monte_carlo": mean,
                "standard_error": se,
                "within_3se": within,
            }))?;
        }
    }
    let pass = misses == 0;
    sink.json(&json!({
        "comparisons": FAMILIES.len() * args.trials,
        "misses": misses,
        "draws": args.draws,
        "seed": seed,
        "pass": pass,
    }))?;
    sink.finish()?;
    Ok(pass)
}

pub fn verify_theorem(args: TheoremArgs) -> anyhow::Result<bool> {
    let cfg = VerifyConfig {
        width: args.width,
        depth: args.depth,
        activation: Activation::parse(&args.activation)?,
        c_sigma: args.c_sigma,
        trials: args.trials,
        data_points: args.data_points,
        seed: resolve_seed(args.seed)?,
        lhs_scale: args.lhs_scale,
    };
    let report = verify(&cfg)?;
    let mut sink = Sink::open(args.output.log_file.as_deref())?;
    sink.line(&serde_json::to_string(&report)?)?;
    sink.finish()?;
    Ok(report.pass)
}

/// Entries of `W ∘ r sᵀ` with `W ~ N(0, 1)` redrawn for every batch of units.
pub fn induced_prior(args: InducedArgs) -> anyhow::Result<bool> {
    const UNITS: usize = 1000;
    let seed = resolve_seed(args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sink = Sink::open(args.output.log_file.as_deref())?;
    sink.line("family,seed,weight")?;
    for name in &args.family {
        let family = Family::parse(name)?;
        let factor = |dim: usize| -> anyhow::Result<Factor> {
            let q = MixtureDistribution::uniform(family, 1, dim, args.loc, args.scale)?;
            Ok(Factor::new(q.clone(), q, true)?)
        };
        let s = if args.r_only { Factor::identity(1, 1) } else { factor(1)? };
        let mut written = 0;
        while written < args.draws {
            let layer = Rank1Dense::new(
                gaussian_tensor(&[UNITS, 1], &mut rng)?,
                Tensor::zeros(&[UNITS]),
                factor(UNITS)?,
                s.clone(),
                Activation::Identity,
            )?;
            let w = layer.induced_weight_sample(&mut rng, 0)?;
            for v in w.data().iter().take(args.draws - written) {
                sink.line(&format!("{},{seed},{v}", family.name()))?;
            }
            written += UNITS.min(args.draws - written);
        }
    }
    sink.finish()?;
    Ok(true)
}
