//! Run configuration files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdaptConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::EvalMode;
use crate::nca::MedNcaConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub mode: EvalMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            mode: EvalMode::Single,
        }
    }
}

/// Every tunable in one JSON document. Missing sections and fields take
/// their defaults; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: MedNcaConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        self.loss.validate()?;
        if let EvalMode::EnsembleMean { n_runs } = self.eval.mode {
            if n_runs < 2 {
                return Err(Error::invalid("ensemble evaluation needs n_runs >= 2"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes `config.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        std::fs::write(&path, self.to_json() + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::parse(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(RunConfig::parse(r#"{"model": {"channels": 16, "colour": 1}}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.adapt.patch_size = Some(32);
        cfg.eval.mode = EvalMode::EnsembleMean { n_runs: 4 };
        assert_eq!(RunConfig::parse(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse(r#"{"model": {"fire_rate": 0.0}}"#).is_err());
        assert!(RunConfig::parse(r#"{"adapt": {"n_runs": 1}}"#).is_err());
    }
}
