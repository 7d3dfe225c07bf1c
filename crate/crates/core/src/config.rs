//! Key-value settings file.
//!
//! One `key = value` pair per line; `#` starts a comment; blank lines are
//! ignored. Unknown keys and unparsable values are errors. Recognized keys:
//!
//! ```text
//! chunk_len  overlap  per_chunk_cap  capacity  field_cap
//! dim  tau  budget  hash_seed  seed
//! learning_rate  epochs  batch_size  builder_steps  joint_steps
//! ```
//!
//! Layering is the caller's job: start from [`Settings::default`], apply the
//! file, then apply command-line overrides.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::latent::{EmbedderParams, RetrieverParams, DEFAULT_DIM, DEFAULT_HASH_SEED, DEFAULT_TEMPERATURE};
use crate::model::{BuildConfig, DEFAULT_BUDGET};
use crate::trainer::TrainConfig;

pub const KEYS: [&str; 15] = [
    "chunk_len",
    "overlap",
    "per_chunk_cap",
    "capacity",
    "field_cap",
    "dim",
    "tau",
    "budget",
    "hash_seed",
    "seed",
    "learning_rate",
    "epochs",
    "batch_size",
    "builder_steps",
    "joint_steps",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub build: BuildConfig,
    pub dim: usize,
    pub tau: f64,
    pub budget: usize,
    pub hash_seed: u64,
    pub train: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            build: BuildConfig::default(),
            dim: DEFAULT_DIM,
            tau: DEFAULT_TEMPERATURE,
            budget: DEFAULT_BUDGET,
            hash_seed: DEFAULT_HASH_SEED,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "chunk_len" => self.build.chunk_len = parse(key, value)?,
            "overlap" => self.build.overlap = parse(key, value)?,
            "per_chunk_cap" => self.build.per_chunk_cap = parse(key, value)?,
            "capacity" => self.build.capacity = parse(key, value)?,
            "field_cap" => self.build.field_cap = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "budget" => self.budget = parse(key, value)?,
            "hash_seed" => self.hash_seed = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "builder_steps" => self.train.builder_steps = parse(key, value)?,
            "joint_steps" => self.train.joint_steps = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.build.validate()?;
        self.train.validate()?;
        self.retriever().validate()?;
        self.embedder().validate()
    }

    pub fn embedder(&self) -> EmbedderParams {
        EmbedderParams::identity(self.dim, self.hash_seed)
    }

    pub fn retriever(&self) -> RetrieverParams {
        RetrieverParams::identity(self.dim)
            .with_budget(self.budget)
            .with_temperature(self.tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_layers() {
        let mut s = Settings::default();
        s.apply_text("# comment\ncapacity = 50\n\n budget=8 # trailing\ntau = 0.25\n").unwrap();
        assert_eq!(s.build.capacity, 50);
        assert_eq!(s.budget, 8);
        assert_eq!(s.tau, 0.25);
        assert_eq!(s.dim, DEFAULT_DIM);
        s.set("budget", "3").unwrap();
        assert_eq!(s.budget, 3);
        s.validate().unwrap();
    }

    #[test]
    fn every_key_is_settable() {
        let mut s = Settings::default();
        for key in KEYS {
            let v = if matches!(key, "tau" | "learning_rate") { "0.5" } else { "4" };
            s.set(key, v).unwrap();
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut s = Settings::default();
        assert!(s.apply_text("nope = 1").is_err());
        assert!(s.apply_text("capacity").is_err());
        assert!(s.apply_text("capacity = -1").is_err());
        s.set("overlap", "2000").unwrap();
        assert!(s.validate().is_err());
    }
}
