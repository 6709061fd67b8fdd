use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distributions::Family;
use crate::error::{Error, Result};
use crate::layers::{Activation, Placement};
use crate::objectives::LikelihoodMode;

/// Training hyperparameters. Key names double as config-file keys and CLI flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ensemble_size: usize,
    pub base_learning_rate: f64,
    pub lr_decay_ratio: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub train_epochs: usize,
    pub kl_annealing_epochs: usize,
    pub l2: f64,
    pub prior_mean: f64,
    pub prior_stddev: f64,
    /// Negative: posterior means drawn from `N(1, v²)`; positive: each
    /// mean is `−1` with probability `v`, else `+1`.
    pub random_sign_init: f64,
    pub dropout_rate: f64,
    pub likelihood_mode: LikelihoodMode,
    pub momentum: f64,
    pub seed: u64,
    pub eval_samples_per_component: usize,
    /// One factor draw per component during evaluation instead of one per example.
    pub shared_eval_samples: bool,
    pub batch_size: usize,
    pub family: Family,
    pub placement: Placement,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub clip_norm: Option<f64>,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_interval: usize,
    pub held_out_fraction: f64,
    pub dataset: String,
    pub data_path: Option<String>,
    pub label_path: Option<String>,
    pub num_examples: usize,
    pub dataset_noise: f64,
    pub test_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 4,
            base_learning_rate: 0.1,
            lr_decay_ratio: 0.2,
            lr_decay_epochs: vec![80, 160, 180],
            train_epochs: 250,
            kl_annealing_epochs: 200,
            l2: 1e-4,
            prior_mean: 1.0,
            prior_stddev: 0.1,
            random_sign_init: -0.5,
            dropout_rate: 1e-3,
            likelihood_mode: LikelihoodMode::AverageNll,
            momentum: 0.9,
            seed: 0,
            eval_samples_per_component: 1,
            shared_eval_samples: false,
            batch_size: 64,
            family: Family::Gaussian,
            placement: Placement::Both,
            hidden_sizes: vec![64, 64],
            activation: Activation::Relu,
            clip_norm: None,
            checkpoint_interval: 0,
            held_out_fraction: 0.2,
            dataset: "two_moons".into(),
            data_path: None,
            label_path: None,
            num_examples: 2000,
            dataset_noise: 0.1,
            test_examples: 1000,
        }
    }
}

fn parse_list(value: &str) -> Result<Vec<usize>> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']');
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| Error::Config(format!("`{s}`: {e}"))))
        .collect()
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = `{value}`: {e}")))
}

fn optional(value: &str) -> Option<&str> {
    match value {
        "" | "none" | "null" => None,
        v => Some(v),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 31] = [
        "ensemble_size",
        "base_learning_rate",
        "lr_decay_ratio",
        "lr_decay_epochs",
        "train_epochs",
        "kl_annealing_epochs",
        "l2",
        "prior_mean",
        "prior_stddev",
        "random_sign_init",
        "dropout_rate",
        "likelihood_mode",
        "momentum",
        "seed",
        "eval_samples_per_component",
        "shared_eval_samples",
        "batch_size",
        "family",
        "placement",
        "hidden_sizes",
        "activation",
        "clip_norm",
        "checkpoint_interval",
        "held_out_fraction",
        "dataset",
        "data_path",
        "label_path",
        "num_examples",
        "dataset_noise",
        "test_examples",
        "eval_samples",
    ];

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "ensemble_size" => self.ensemble_size = num(key, v)?,
            "base_learning_rate" => self.base_learning_rate = num(key, v)?,
            "lr_decay_ratio" => self.lr_decay_ratio = num(key, v)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse_list(v)?,
            "train_epochs" => self.train_epochs = num(key, v)?,
            "kl_annealing_epochs" => self.kl_annealing_epochs = num(key, v)?,
            "l2" => self.l2 = num(key, v)?,
            "prior_mean" => self.prior_mean = num(key, v)?,
            "prior_stddev" => self.prior_stddev = num(key, v)?,
            "random_sign_init" => self.random_sign_init = num(key, v)?,
            "dropout_rate" => self.dropout_rate = num(key, v)?,
            "likelihood_mode" => self.likelihood_mode = LikelihoodMode::parse(v)?,
            "momentum" => self.momentum = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "eval_samples_per_component" | "eval_samples" => self.eval_samples_per_component = num(key, v)?,
            "shared_eval_samples" => self.shared_eval_samples = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "family" => self.family = Family::parse(v)?,
            "placement" => self.placement = Placement::parse(v)?,
            "hidden_sizes" => self.hidden_sizes = parse_list(v)?,
            "activation" => self.activation = Activation::parse(v)?,
            "clip_norm" => self.clip_norm = optional(v).map(|s| num(key, s)).transpose()?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, v)?,
            "held_out_fraction" => self.held_out_fraction = num(key, v)?,
            "dataset" => self.dataset = v.to_string(),
            "data_path" => self.data_path = optional(v).map(str::to_string),
            "label_path" => self.label_path = optional(v).map(str::to_string),
            "num_examples" => self.num_examples = num(key, v)?,
            "dataset_noise" => self.dataset_noise = num(key, v)?,
            "test_examples" => self.test_examples = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.ensemble_size == 0 {
            return fail("ensemble_size must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.base_learning_rate > 0.0) || !(self.lr_decay_ratio > 0.0) {
            return fail("learning rate and decay ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if !(self.l2 >= 0.0) {
            return fail(format!("l2 {} must be >= 0", self.l2));
        }
        if !(self.prior_stddev > 0.0) {
            return fail(format!("prior_stddev {} must be positive", self.prior_stddev));
        }
        if self.random_sign_init == 0.0 || !self.random_sign_init.is_finite() || self.random_sign_init > 1.0 {
            return fail(format!(
                "random_sign_init {} must be nonzero and at most 1",
                self.random_sign_init
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || (self.dropout_rate == 0.0 && !self.family.is_point()) {
            return fail(format!("dropout_rate {} not in (0, 1)", self.dropout_rate));
        }
        if self.eval_samples_per_component == 0 {
            return fail("eval_samples_per_component must be >= 1".into());
        }
        if self.kl_annealing_epochs == 0 {
            return fail("kl_annealing_epochs must be positive".into());
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("lr_decay_epochs {:?} must be strictly increasing", self.lr_decay_epochs));
        }
        if self.train_epochs > 0 {
            if self.kl_annealing_epochs > self.train_epochs {
                return fail(format!(
                    "kl_annealing_epochs {} exceeds train_epochs {}",
                    self.kl_annealing_epochs, self.train_epochs
                ));
            }
            if self.lr_decay_epochs.last().is_some_and(|&e| e >= self.train_epochs) {
                return fail(format!(
                    "lr_decay_epochs {:?} must be below train_epochs {}",
                    self.lr_decay_epochs, self.train_epochs
                ));
            }
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return fail(format!("held_out_fraction {} not in [0, 1)", self.held_out_fraction));
        }
        if self.family == Family::LogGaussian && !(self.prior_mean > 0.0) {
            return fail("log-normal factors need a positive prior_mean".into());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return fail("clip_norm must be positive".into());
        }
        Ok(())
    }

    /// `key = value` rendering that [`TrainConfig::from_text`] reads back.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("ensemble_size = {}", self.ensemble_size),
            format!("base_learning_rate = {:?}", self.base_learning_rate),
            format!("lr_decay_ratio = {:?}", self.lr_decay_ratio),
            format!("lr_decay_epochs = [{}]", list(&self.lr_decay_epochs)),
            format!("train_epochs = {}", self.train_epochs),
            format!("kl_annealing_epochs = {}", self.kl_annealing_epochs),
            format!("l2 = {:?}", self.l2),
            format!("prior_mean = {:?}", self.prior_mean),
            format!("prior_stddev = {:?}", self.prior_stddev),
            format!("random_sign_init = {:?}", self.random_sign_init),
            format!("dropout_rate = {:?}", self.dropout_rate),
            format!("likelihood_mode = {}", self.likelihood_mode.name()),
            format!("momentum = {:?}", self.momentum),
            format!("seed = {}", self.seed),
            format!("eval_samples_per_component = {}", self.eval_samples_per_component),
            format!("shared_eval_samples = {}", self.shared_eval_samples),
            format!("batch_size = {}", self.batch_size),
            format!("family = {}", self.family.name()),
            format!("placement = {}", self.placement.name()),
            format!("hidden_sizes = [{}]", list(&self.hidden_sizes)),
            format!("activation = {}", self.activation.name()),
            format!(
                "clip_norm = {}",
                self.clip_norm.map_or_else(|| "none".to_string(), |c| format!("{c:?}"))
            ),
            format!("checkpoint_interval = {}", self.checkpoint_interval),
            format!("held_out_fraction = {:?}", self.held_out_fraction),
            format!("dataset = {}", self.dataset),
            format!("num_examples = {}", self.num_examples),
            format!("dataset_noise = {:?}", self.dataset_noise),
            format!("test_examples = {}", self.test_examples),
        ];
        lines.extend(self.data_path.as_ref().map(|p| format!("data_path = {p}")));
        lines.extend(self.label_path.as_ref().map(|p| format!("label_path = {p}")));
        lines.join("\n") + "\n"
    }
}
