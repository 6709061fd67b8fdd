//! SGD-with-momentum training of rank-1 models.

mod config;
mod init;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::TrainConfig;
pub use init::{build_model, he_normal, init_posterior_means, lr_schedule};

use crate::checkpoint::Checkpoint;
use crate::data::{corrupt, duplicate_batch, load_idx, synthetic, CorruptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::layers::ForwardMode;
use crate::metrics::{MetricsReport, PredictionSet, DEFAULT_ECE_BINS};
use crate::model::Rank1Mlp;
use crate::objectives::{elbo_loss, ElboConfig, LossEval};
use crate::tensor::Tensor;

/// Seeds of the synthetic training and test draws; fixed so that the
/// training seed only varies initialization and minibatch order.
pub const TRAIN_DATA_SEED: u64 = 1;
pub const TEST_DATA_SEED: u64 = 2;

#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Dataset,
    pub held_out: Dataset,
    pub test: Dataset,
}

/// Builds the configured dataset, holds out its tail, and rescales every
/// split with the training split's feature bounds.
///
/// `idx` and `csv` datasets read `data_path` (plus `label_path` for idx)
/// and use the held-out split as the test set.
pub fn load_splits(cfg: &TrainConfig) -> Result<DataSplits> {
    let path = |p: &Option<String>, key: &str| {
        p.clone()
            .ok_or_else(|| Error::Config(format!("dataset `{}` requires `{key}`", cfg.dataset)))
    };
    let (full, test) = match cfg.dataset.as_str() {
        "idx" => {
            let images = path(&cfg.data_path, "data_path")?;
            let labels = path(&cfg.label_path, "label_path")?;
            (load_idx(images.as_ref(), labels.as_ref())?, None)
        }
        "csv" => {
            let file = path(&cfg.data_path, "data_path")?;
            let f = std::fs::File::open(&file)
                .map_err(|e| Error::Config(format!("cannot open {file}: {e}")))?;
            (Dataset::read_csv(&file, std::io::BufReader::new(f))?, None)
        }
        name => (
            synthetic(name, cfg.num_examples, cfg.dataset_noise, TRAIN_DATA_SEED)?,
            Some(synthetic(name, cfg.test_examples, cfg.dataset_noise, TEST_DATA_SEED)?),
        ),
    };
    let (train, held_out) = full.split_tail(cfg.held_out_fraction)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let bounds = train.feature_bounds();
    let rescale = |d: &Dataset| if d.image_shape.is_some() { Ok(d.clone()) } else { d.normalized(&bounds) };
    let held_out = rescale(&held_out)?;
    let test = match test {
        Some(t) => rescale(&t)?,
        None => held_out.clone(),
    };
    Ok(DataSplits {
        train: rescale(&train)?,
        held_out,
        test,
    })
}

/// Model, optimizer state and the training RNG.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Rank1Mlp,
    /// Momentum buffers, one per trainable tensor.
    pub velocity: Vec<Tensor>,
    pub rng: ChaCha8Rng,
    /// Epochs completed.
    pub epoch: usize,
}

impl Trainer {
    /// Seeds the RNG from `config.seed` and initializes the model from it.
    pub fn new(config: TrainConfig, in_dim: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = build_model(&config, in_dim, classes, &mut rng)?;
        let velocity = model
            .trainable_mut()
            .into_iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Ok(Self {
            config,
            model,
            velocity,
            rng,
            epoch: 0,
        })
    }

    pub fn elbo_config(&self, train_size: usize) -> ElboConfig {
        ElboConfig {
            train_set_size: train_size,
            batch_size: self.config.batch_size.min(train_size.max(1)),
            l2: self.config.l2,
            kl_annealing_epochs: self.config.kl_annealing_epochs,
            likelihood_mode: self.config.likelihood_mode,
        }
    }

    /// One SGD step on `x: [B, D]` at the current epoch's learning rate.
    pub fn step(&mut self, x: &Tensor, labels: &[usize], train_size: usize) -> Result<LossEval> {
        let cfg = self.elbo_config(train_size);
        let dup = duplicate_batch(x, self.model.k())?;
        let epoch = self.epoch;
        let mut eval = elbo_loss(&self.model, &dup, labels, epoch, &cfg, &mut self.rng).map_err(|e| match e {
            Error::LogDomain(_) => Error::Diverged { epoch, loss: f64::NAN },
            other => other,
        })?;
        if !eval.loss.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                loss: eval.loss,
            });
        }
        if let Some(max) = self.config.clip_norm {
            let norm = eval
                .grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                let f = max / norm;
                for g in &mut eval.grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= f);
                }
            }
        }
        let lr = lr_schedule(self.epoch, &self.config);
        let mu = self.config.momentum;
        for ((p, v), g) in self.model.trainable_mut().into_iter().zip(&mut self.velocity).zip(&eval.grads) {
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = mu * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        Ok(eval)
    }

    /// One pass over `train` in a seeded shuffled order; returns the mean batch loss.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let order = train.shuffled_indices(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let (x, y) = train.batch(chunk)?;
            total += self.step(&x, &y, train.len())?.loss;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }

    /// Deterministic evaluation RNG independent of the training stream.
    pub fn eval_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream.wrapping_add(1));
        rng
    }

    /// Member predictions over `data` with `samples` draws per component.
    pub fn predict(&self, data: &Dataset, samples: usize, rng: &mut ChaCha8Rng) -> Result<PredictionSet> {
        let mode = if self.config.shared_eval_samples {
            ForwardMode::SharedSample
        } else {
            ForwardMode::Sample
        };
        let lp = self.model.predict(&data.features, mode, samples, rng)?;
        PredictionSet::from_log_probs(lp, data.labels.clone())
    }

    pub fn evaluate(&self, data: &Dataset, samples: usize, rng: &mut ChaCha8Rng) -> Result<MetricsReport> {
        let mut r = self.predict(data, samples, rng)?.report(DEFAULT_ECE_BINS)?;
        r.seed = Some(self.config.seed);
        r.eval_samples = Some(samples);
        Ok(r)
    }

    /// Trains to `train_epochs`, evaluating on `held_out` after every epoch.
    pub fn fit(
        &mut self,
        train: &Dataset,
        held_out: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &MetricsReport) -> Result<()>,
    ) -> Result<Vec<MetricsReport>> {
        let mut reports = Vec::new();
        while self.epoch < self.config.train_epochs {
            let loss = self.train_epoch(train)?;
            let mut rng = self.eval_rng(self.epoch as u64);
            let mut r = if held_out.is_empty() {
                MetricsReport::default()
            } else {
                self.evaluate(held_out, self.config.eval_samples_per_component, &mut rng)?
            };
            r.epoch = Some(self.epoch);
            r.train_loss = Some(loss);
            r.seed = Some(self.config.seed);
            on_epoch(self, &r)?;
            reports.push(r);
        }
        Ok(reports)
    }

    /// Metrics on `data` under one corruption. Corruption and evaluation
    /// draws come from streams keyed by the cell, so cells can be evaluated
    /// in any order or in parallel with identical results.
    pub fn evaluate_corrupted(&self, data: &Dataset, spec: CorruptionSpec, samples: usize) -> Result<MetricsReport> {
        let cell = CorruptionSpec::grid().iter().position(|c| *c == spec).unwrap_or(0) as u64;
        let mut noise_rng = self.eval_rng(1 << 32 | cell);
        let mut shifted = data.clone();
        shifted.features = corrupt(&data.features, data.image_shape, spec, &mut noise_rng)?;
        let mut rng = self.eval_rng(2 << 32 | cell);
        let mut r = self.evaluate(&shifted, samples, &mut rng)?;
        r.corruption_type = Some(spec.kind().name().into());
        r.intensity = Some(spec.intensity());
        Ok(r)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("epoch".into(), self.epoch.to_string());
        ck.meta.insert("config".into(), self.config.to_text());
        ck.meta.insert("in_dim".into(), self.model.in_dim().to_string());
        ck.meta.insert("num_classes".into(), self.model.num_classes().to_string());
        ck.put_rng(&self.rng);
        for (name, t) in self.model.state() {
            ck.tensors.push((name, t.clone()));
        }
        for (i, v) in self.velocity.iter().enumerate() {
            ck.tensors.push((format!("velocity.{i}"), v.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let parse = |key: &str| -> Result<usize> {
            ck.meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("malformed `{key}`")))
        };
        let config = TrainConfig::from_text(ck.meta("config")?)?;
        let mut t = Trainer::new(config, parse("in_dim")?, parse("num_classes")?)?;
        ck.restore_into(t.model.state_mut())?;
        ck.restore_into(
            t.velocity
                .iter_mut()
                .enumerate()
                .map(|(i, v)| (format!("velocity.{i}"), v)),
        )?;
        t.rng = ck.rng()?;
        t.epoch = parse("epoch")?;
        Ok(t)
    }
}
