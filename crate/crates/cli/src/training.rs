//! `train`, `eval` and `corrupt-eval`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use rank1_core::checkpoint::Checkpoint;
use rank1_core::data::{CorruptionSpec, Dataset};
use rank1_core::metrics::{corruption_aggregate, MetricsReport};
use rank1_core::trainer::{load_splits, DataSplits, Trainer};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::output::Sink;
use crate::{overrides, CorruptEvalArgs, EvalArgs, TrainArgs};

/// Evaluation stream reserved for test-split reports.
const TEST_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Split {
    Test,
    HeldOut,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Test => "test",
            Split::HeldOut => "held_out",
        }
    }

    fn of(self, splits: &DataSplits) -> &Dataset {
        match self {
            Split::Test => &splits.test,
            Split::HeldOut => &splits.held_out,
        }
    }
}

fn record(report: &MetricsReport, split: &str) -> anyhow::Result<Value> {
    let mut v = serde_json::to_value(report)?;
    v["split"] = json!(split);
    Ok(v)
}

fn save(trainer: &Trainer, path: &Path) -> anyhow::Result<()> {
    trainer
        .checkpoint()
        .save(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

pub fn train(args: TrainArgs) -> anyhow::Result<bool> {
    let text = args
        .config
        .as_ref()
        .map(|p| std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display())))
        .transpose()?;
    let cfg = overrides::resolve(text.as_deref(), &args.overrides)?;
    let splits = load_splits(&cfg)?;
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    let mut sink = Sink::open(args.output.log_file.as_deref())?;
    let interval = cfg.checkpoint_interval;
    let mut trainer = Trainer::new(cfg, splits.train.dim(), splits.train.num_classes)?;
    trainer.fit(&splits.train, &splits.held_out, |t, report| {
        let mut emit = || -> anyhow::Result<()> {
            sink.json(&record(report, "held_out")?)?;
            if interval > 0 && t.epoch % interval == 0 {
                save(t, &args.out_dir.join(format!("epoch_{}.ckpt", t.epoch)))?;
            }
            Ok(())
        };
        emit().map_err(|e| rank1_core::Error::InvalidArgument(format!("{e:#}")))
    })?;
    save(&trainer, &args.out_dir.join("final.ckpt"))?;
    let mut rng = trainer.eval_rng(TEST_STREAM);
    let mut report = trainer.evaluate(&splits.test, trainer.config.eval_samples_per_component, &mut rng)?;
    report.epoch = Some(trainer.epoch);
    sink.json(&record(&report, "test")?)?;
    sink.finish()?;
    Ok(true)
}

fn load_trainer(path: &Path) -> anyhow::Result<(Trainer, DataSplits)> {
    let ck = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let splits = load_splits(&trainer.config)?;
    if splits.test.dim() != trainer.model.in_dim() || splits.test.num_classes != trainer.model.num_classes() {
        bail!(
            "checkpoint model expects {} features and {} classes, dataset has {} and {}",
            trainer.model.in_dim(),
            trainer.model.num_classes(),
            splits.test.dim(),
            splits.test.num_classes
        );
    }
    Ok((trainer, splits))
}

pub fn eval(args: EvalArgs) -> anyhow::Result<bool> {
    let (trainer, splits) = load_trainer(&args.checkpoint)?;
    let counts = if args.eval_samples.is_empty() {
        vec![trainer.config.eval_samples_per_component]
    } else {
        args.eval_samples.clone()
    };
    let data = args.split.of(&splits);
    let mut sink = Sink::open(args.output.log_file.as_deref())?;
    for samples in counts {
        let mut rng = trainer.eval_rng(TEST_STREAM);
        let mut report = trainer.evaluate(data, samples, &mut rng)?;
        report.epoch = Some(trainer.epoch);
        sink.json(&record(&report, args.split.name())?)?;
    }
    sink.finish()?;
    Ok(true)
}

pub fn corrupt_eval(args: CorruptEvalArgs) -> anyhow::Result<bool> {
    let (trainer, splits) = load_trainer(&args.checkpoint)?;
    let samples = args.eval_samples.unwrap_or(trainer.config.eval_samples_per_component);
    let reports = CorruptionSpec::grid()
        .into_par_iter()
        .map(|spec| trainer.evaluate_corrupted(&splits.test, spec, samples))
        .collect::<Result<Vec<_>, _>>()?;
    let mut sink = Sink::open(args.output.log_file.as_deref())?;
    let mut cells = BTreeMap::new();
    for r in reports {
        sink.json(&record(&r, "test")?)?;
        let key = (r.corruption_type.clone().unwrap_or_default(), r.intensity.unwrap_or(0));
        cells.insert(key, r);
    }
    let summary = corruption_aggregate(&cells)?;
    sink.json(&json!({
        "c_nll": summary.c_nll,
        "c_accuracy": summary.c_accuracy,
        "c_ece": summary.c_ece,
        "cells": cells.len(),
        "eval_samples": samples,
        "seed": trainer.config.seed,
    }))?;
    sink.finish()?;
    Ok(true)
}
