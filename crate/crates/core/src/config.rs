//! Run configuration, read from and written to JSON.
//!
//! ```json
//! {
//!   "train_scenario": {"kind": "rm", "ratio": 0.2},
//!   "eval_scenario": {"kind": "bm", "ratio": 0.2},
//!   "diffusion": {"steps": 50, "beta0": 0.0001, "beta1": 0.02, "mode": "D1"},
//!   "model": {"residual_layers": 4, "residual_channels": 64, "skip_channels": 64,
//!             "embed_dims": [64, 128, 128], "state_dim": 16,
//!             "bidirectional": true, "second_s4": true},
//!   "training": {"iterations": 2000, "batch_size": 16, "learning_rate": 0.002, "seed": 0},
//!   "sampling": {"samples": 10, "quantiles": [0.05, 0.25, 0.5, 0.75, 0.95]},
//!   "channel_split_width": null
//! }
//! ```
//!
//! `eval_scenario` defaults to `train_scenario`; the model's `in_channels`
//! and `length` are taken from the data when omitted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::masking::Scenario;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Validation batches per validation sample (each with its own mask, step and noise).
    #[serde(default = "default_val_repeats")]
    pub validation_repeats: usize,
}

fn default_val_repeats() -> usize {
    8
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
            validation_repeats: default_val_repeats(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub samples: usize,
    pub quantiles: Vec<f64>,
    /// Test samples per reverse-chain batch.
    #[serde(default = "default_chunk")]
    pub batch_size: usize,
}

fn default_chunk() -> usize {
    64
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            quantiles: vec![0.05, 0.25, 0.5, 0.75, 0.95],
            batch_size: default_chunk(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train_scenario: Scenario,
    #[serde(default)]
    pub eval_scenario: Option<Scenario>,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub channel_split_width: Option<usize>,
}

impl RunConfig {
    /// Desk-scale defaults for a scenario.
    pub fn desk(scenario: Scenario) -> Self {
        Self {
            train_scenario: scenario,
            eval_scenario: None,
            diffusion: DiffusionConfig::default(),
            model: ModelConfig::desk(0, 0),
            training: TrainingConfig::default(),
            sampling: SamplingConfig::default(),
            channel_split_width: None,
        }
    }

    pub fn eval_scenario(&self) -> Scenario {
        self.eval_scenario.unwrap_or(self.train_scenario)
    }

    /// Model configuration for data with `channels` channels of length `len`,
    /// after channel splitting.
    pub fn model_for(&self, channels: usize, len: usize) -> Result<ModelConfig> {
        let width = self.channel_split_width.map_or(channels, |w| w.min(channels));
        let mut m = self.model.clone();
        for (field, value, name) in [(&mut m.in_channels, width, "in_channels"), (&mut m.length, len, "length")] {
            if *field == 0 {
                *field = value;
            } else if *field != value {
                return Err(Error::Config(format!("model {name} {} does not match data ({value})", *field)));
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// Checks every field that does not depend on the data.
    pub fn validate_static(&self) -> Result<()> {
        let t = &self.training;
        if t.iterations == 0 || t.batch_size == 0 || !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config("training needs positive iterations, batch size and learning rate".into()));
        }
        let s = &self.sampling;
        if s.samples == 0 || s.batch_size == 0 {
            return Err(Error::Config("sampling needs at least one draw and a positive batch size".into()));
        }
        if let Some(q) = s.quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return Err(Error::Config(format!("quantile {q} outside (0, 1)")));
        }
        if self.channel_split_width == Some(0) {
            return Err(Error::Config("channel split width must be positive".into()));
        }
        self.diffusion.schedule().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Full validation against data dimensions.
    pub fn validate(&self, channels: usize, len: usize) -> Result<()> {
        self.validate_static()?;
        for sc in [self.train_scenario, self.eval_scenario()] {
            sc.validate(len).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.model_for(channels, len).map(|_| ())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let text = r#"{
          "train_scenario": {"kind": "rm", "ratio": 0.2},
          "eval_scenario": {"kind": "bm", "ratio": 0.2},
          "diffusion": {"steps": 50, "beta0": 0.0001, "beta1": 0.02, "mode": "D1"},
          "model": {"residual_layers": 4, "residual_channels": 64, "skip_channels": 64,
                    "embed_dims": [64, 128, 128], "state_dim": 16,
                    "bidirectional": true, "second_s4": true},
          "training": {"iterations": 2000, "batch_size": 16, "learning_rate": 0.002, "seed": 0},
          "sampling": {"samples": 10, "quantiles": [0.05, 0.25, 0.5, 0.75, 0.95]},
          "channel_split_width": null
        }"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.eval_scenario(), Scenario::Bm { ratio: 0.2 });
        assert_eq!(cfg.model_for(4, 128).unwrap(), ModelConfig::desk(4, 128));
        cfg.validate(4, 128).unwrap();
    }

    #[test]
    fn round_trip_and_defaults() {
        let cfg = RunConfig::desk(Scenario::Tf { horizon: 24 });
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.eval_scenario(), cfg.train_scenario);
    }

    #[test]
    fn rejects_bad_fields() {
        let mut cfg = RunConfig::desk(Scenario::Bm { ratio: 0.001 });
        assert!(matches!(cfg.validate(4, 100), Err(Error::Config(_))));
        cfg.train_scenario = Scenario::Rm { ratio: 0.2 };
        cfg.validate(4, 100).unwrap();
        cfg.model.in_channels = 3;
        assert!(matches!(cfg.validate(4, 100), Err(Error::Config(_))));
        cfg.model.in_channels = 0;
        cfg.sampling.quantiles = vec![1.5];
        assert!(matches!(cfg.validate(4, 100), Err(Error::Config(_))));
        let typo = r#"{"train_scenario": {"kind": "rm", "ratio": 0.2}, "diffusion": {"steps": 50, "beta0": 0.0001, "beta1": 0.02, "mode": "D1"},
            "model": {"residual_layers": 1, "residual_channels": 4, "skip_channels": 4, "embed_dims": [8, 8, 8], "state_dim": 2,
            "bidirectional": false, "second_s4": false}, "chanel_split_width": 3}"#;
        assert!(serde_json::from_str::<RunConfig>(typo).is_err());
    }

    #[test]
    fn split_width_sets_model_channels() {
        let mut cfg = RunConfig::desk(Scenario::Rm { ratio: 0.2 });
        cfg.channel_split_width = Some(37);
        assert_eq!(cfg.model_for(370, 24).unwrap().in_channels, 37);
        assert_eq!(cfg.model_for(7, 24).unwrap().in_channels, 7);
    }
}
