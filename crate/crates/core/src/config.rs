//! The single JSON document that pins an experiment: one section per module
//! plus paths, with dotted-path overrides (`train.learning_rate=1e-3`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assembly::AssemblyConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::tracker::DecodingConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Split directory (`schema.json` plus `dialogues_*.json`) to train on.
    pub train_dir: Option<PathBuf>,
    /// Split directory used for dev scoring during training and for `eval`.
    pub dev_dir: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub assembly: AssemblyConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub decoding: DecodingConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { assembly: self.assembly.clone(), encoder: self.encoder.clone() }
    }

    /// Per-section checks plus cross-section consistency.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.decoding.max_span_len == 0 {
            return Err(Error::Config("decoding.max_span_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(origin, text, &e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Applies `section.key=value` assignments in order. Values are parsed
    /// as JSON when possible and taken as plain strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[(S, S)]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("serializable");
        for (path, raw) in overrides {
            let (path, raw) = (path.as_ref(), raw.as_ref());
            let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_dotted(&mut doc, path, value)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid override: {e}")))
    }
}

fn set_dotted(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("`{path}` is not a dotted section.key path")));
    }
    let mut node = doc;
    for (depth, key) in keys.iter().enumerate() {
        let last = depth + 1 == keys.len();
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", keys[..depth].join("."))))?;
        if depth == 0 && !obj.contains_key(*key) {
            return Err(Error::Config(format!(
                "unknown config section `{key}` (expected assembly, encoder, train, decoding, synth or paths)"
            )));
        }
        if last {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("paths have at least two keys")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text, Path::new("x")).unwrap(), c);
    }

    #[test]
    fn partial_document_fills_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"epochs": 2}}"#, Path::new("x")).unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn overrides_parse_json_and_strings() {
        let c = RunConfig::default()
            .with_overrides(&[
                ("train.learning_rate", "0.001"),
                ("assembly.use_nld", "false"),
                ("assembly.categorical_head", "cls"),
                ("paths.model_dir", "runs/a"),
            ])
            .unwrap();
        assert_eq!(c.train.learning_rate, 1e-3);
        assert!(!c.assembly.use_nld);
        assert_eq!(c.paths.model_dir, Some(PathBuf::from("runs/a")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::default().with_overrides(&[("train.lr", "1")]).is_err());
        assert!(RunConfig::default().with_overrides(&[("optim.lr", "1")]).is_err());
        assert!(RunConfig::default().with_overrides(&[("train", "1")]).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 1}}"#, Path::new("x")).is_err());
    }

    #[test]
    fn inconsistent_sequence_lengths_fail_validation() {
        let mut c = RunConfig::default();
        c.encoder.max_seq_len = c.assembly.max_seq_len - 1;
        assert!(c.validate().is_err());
    }
}
