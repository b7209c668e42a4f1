//! Optional JSON run configuration. Command-line flags override it.

use std::path::Path;

use clap::ValueEnum;
use docre_core::{EncoderConfig, Error, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Starting point for training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// From-scratch encoder on small corpora.
    #[default]
    Desk,
    /// Rates meant for a pretrained encoder.
    Pretrained,
}

impl Preset {
    pub fn train_config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Pretrained => TrainConfig::default(),
        }
    }
}

/// Contents of a `--config` file. Every field is optional; `train` and
/// `encoder` hold partial overrides of the preset and the default encoder.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub train: Option<Map<String, Value>>,
    pub encoder: Option<Map<String, Value>>,
    pub mode: Option<String>,
    pub evidence_source: Option<String>,
    pub coref: Option<String>,
    pub evi_threshold: Option<f64>,
    pub tau: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = crate::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn train_config(&self, preset: Option<Preset>) -> Result<TrainConfig, CliError> {
        let base = preset.or(self.preset).unwrap_or_default().train_config();
        overlay(base, self.train.as_ref(), "train")
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig, CliError> {
        overlay(EncoderConfig::default(), self.encoder.as_ref(), "encoder")
    }
}

/// Replaces the fields of `base` named in `patch`; unknown names are rejected.
fn overlay<T: Serialize + DeserializeOwned>(base: T, patch: Option<&Map<String, Value>>, section: &str) -> Result<T, CliError> {
    let Some(patch) = patch else { return Ok(base) };
    let mut v = serde_json::to_value(base).map_err(Error::Json)?;
    let obj = v.as_object_mut().expect("config structs serialize as objects");
    for (k, x) in patch {
        obj.insert(k.clone(), x.clone());
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{section}: {e}")).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"lr_encdoer": 1.0}}"#).unwrap();
        assert!(cfg.train_config(None).is_err());
    }

    #[test]
    fn partial_sections_patch_the_preset() {
        let cfg: RunConfig = serde_json::from_str(r#"{"preset": "pretrained", "train": {"max_epochs": 3}}"#).unwrap();
        let t = cfg.train_config(None).unwrap();
        assert_eq!(t, TrainConfig { max_epochs: 3, ..TrainConfig::default() });
        let t = cfg.train_config(Some(Preset::Desk)).unwrap();
        assert_eq!(t, TrainConfig { max_epochs: 3, ..TrainConfig::desk() });
    }
}
