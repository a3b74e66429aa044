//! One JSON file describing a full run, with `a.b.c=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{DropoutConfig, NormalizationConfig, SynthConfig, A_MODALITY, B_MODALITY};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, ProbeConfig};
use crate::model::ModelConfig;
use crate::modality::Vocabulary;
use crate::train::{Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for parameter initialisation.
    pub seed: u64,
    /// `None` selects the toy model over the synthetic modalities.
    pub model: Option<ModelConfig>,
    pub synth: SynthConfig,
    pub normalization: NormalizationConfig,
    pub pretrain: TrainConfig,
    pub multimodal: TrainConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: None,
            synth: SynthConfig::default(),
            normalization: NormalizationConfig::default(),
            pretrain: TrainConfig {
                stage: Stage::RgbPretrain,
                iterations: 300,
                batch_size: 4,
                base_lr: 2e-3,
                warmup_iters: 20,
                dropout: DropoutConfig { p: 0.0, rng_seed: 0 },
                ..TrainConfig::default()
            },
            multimodal: TrainConfig {
                stage: Stage::Multimodal,
                iterations: 600,
                batch_size: 4,
                base_lr: 2e-3,
                warmup_iters: 20,
                decay_milestones: vec![450],
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides; `value` is parsed as JSON and
    /// falls back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(map) if map.contains_key(part) => map.get_mut(part).expect("checked"),
                    _ => return Err(Error::config(format!("unknown config key `{key}`"))),
                };
            }
            *slot = value;
        }
        serde_json::from_value(root).map_err(|e| Error::config(format!("invalid override: {e}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        match &self.model {
            Some(m) => Ok(m.clone()),
            None => Ok(ModelConfig::toy(
                Vocabulary::with_defaults(&[A_MODALITY, B_MODALITY])?,
                self.synth.image_size,
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.synth.validate()?;
        self.normalization.validate()?;
        self.pretrain.validate()?;
        self.multimodal.validate()?;
        if self.pretrain.stage != Stage::RgbPretrain || self.multimodal.stage != Stage::Multimodal {
            return Err(Error::config("pretrain/multimodal sections carry the wrong stage"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_and_validates() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&["multimodal.dropout.p=0.5", "synth.train_count=10", "seed=3"])
            .unwrap();
        assert_eq!(c.multimodal.dropout.p, 0.5);
        assert_eq!(c.synth.train_count, 10);
        assert_eq!(c.seed, 3);
        assert!(RunConfig::default().with_overrides(&["nope.x=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["seed"]).is_err());
        assert!(RunConfig::default().with_overrides(&["seed=\"x\""]).is_err());
    }

    #[test]
    fn unknown_fields_and_bad_values() {
        assert!(RunConfig::from_json("{\"synth\": {\"dark_fraction\": 2.0}}")
            .unwrap()
            .validate()
            .is_err());
        assert!(RunConfig::from_json("42").is_err());
        assert!(RunConfig::from_json("{\"sed\": 1}").is_err());
    }
}
