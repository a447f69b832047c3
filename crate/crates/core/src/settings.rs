//! Run configuration from `key = value` text.
//!
//! A file holds one assignment per line. Blank lines are ignored and a line
//! whose first non-space character is `#` is a comment. Keys are those of
//! [`ModelConfig`] and [`TrainConfig`]; `seed` is shared and sets the seed of
//! every stage (weights, shuffling, data). Values are applied on top of a
//! base configuration, so callers layer defaults, a file, then flags.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{parse_num, ModelConfig};
use crate::train::TrainConfig;

/// Model and optimizer settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seed shared by every stage.
    pub seed: u64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings::new(ModelConfig::default(), TrainConfig::default())
    }
}

impl Settings {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        let seed = model.seed;
        let mut s = Settings { model, train, seed };
        s.set_seed(seed);
        s
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// Set one key. Unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            self.set_seed(parse_num(key, value)?);
            return Ok(());
        }
        if self.model.apply_kv(key, value)? || self.train.apply_kv(key, value)? {
            return Ok(());
        }
        Err(Error::Config(format!("unknown key {key:?}")))
    }

    /// Apply every assignment of `text`; errors carry the 1-based line.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::ConfigLine { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(at("missing key before `=`".into()));
            }
            self.apply(k, v.trim()).map_err(|e| match e {
                Error::Config(msg) => at(msg),
                other => at(other.to_string()),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Text form accepted by [`Settings::merge_text`].
    pub fn to_text(&self) -> String {
        let model = self.model.to_kv();
        let mut s: String = model.lines().filter(|l| !l.starts_with("seed ")).map(|l| format!("{l}\n")).collect();
        s.push_str(&self.train.to_kv());
        s.push_str(&format!("seed = {}\n", self.seed));
        s
    }
}

/// Read `path` and merge it over `base`. The result is validated.
pub fn parse_config(path: &Path, base: Settings) -> Result<Settings> {
    let text = std::fs::read_to_string(path)?;
    let mut s = base;
    s.merge_text(&text)?;
    s.validate()?;
    Ok(s)
}
