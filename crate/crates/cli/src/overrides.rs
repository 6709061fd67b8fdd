//! One `--<key> VALUE` flag per config key, applied over the config file.

use anyhow::Context;
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};
use rank1_core::trainer::TrainConfig;

pub const SEED_ENV: &str = "RANK1_SEED";

#[derive(Clone, Debug, Default)]
pub struct Overrides(pub Vec<(&'static str, String)>);

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut o = Self::default();
        o.update_from_arg_matches(m)?;
        Ok(o)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        for key in TrainConfig::KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                self.0.push((key, v.clone()));
            }
        }
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(cmd: Command) -> Command {
        TrainConfig::KEYS.iter().fold(cmd, |cmd, &key| {
            cmd.arg(
                Arg::new(key)
                    .long(key)
                    .value_name("VALUE")
                    .help_heading("Config overrides"),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

pub fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}=`{v}`"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(SEED_ENV),
    }
}

/// Defaults, then `RANK1_SEED`, then the config file, then flags.
pub fn resolve(file_text: Option<&str>, overrides: &Overrides) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(text) = file_text {
        cfg.apply_text(text)?;
    }
    for (key, value) in &overrides.0 {
        cfg.set(key, value).with_context(|| format!("--{key}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}
