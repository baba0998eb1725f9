//! Encoder plus heads as one trainable unit, and its on-disk layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assembly::{AssemblyConfig, EncoderInput};
use crate::encoder::{encode, EncoderConfig, EncoderOutput, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::heads::{apply_heads, HeadOutputs, HeadParams, SlotKind};
use crate::params::{load_checkpoint, save_checkpoint, Parameters, TensorMut, TensorRef};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub assembly: AssemblyConfig,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.assembly.validate()?;
        self.encoder.validate()?;
        if self.encoder.max_seq_len < self.assembly.max_seq_len {
            return Err(Error::Config(format!(
                "encoder max_seq_len {} is shorter than assembly max_seq_len {}",
                self.encoder.max_seq_len, self.assembly.max_seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub heads: HeadParams,
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut t = self.encoder.tensors();
        t.extend(self.heads.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.heads.tensors_mut());
        t
    }
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GolombModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl GolombModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::init(&config.encoder, seed)?;
        let heads = HeadParams::init(
            config.encoder.hidden_size,
            config.assembly.categorical_head,
            config.assembly.max_categorical_values,
            seed ^ 0x9e37_79b9_7f4a_7c15,
        );
        Ok(GolombModel { config, params: ModelParams { encoder, heads } })
    }

    /// Encoder pass plus heads; the encoder output is kept for backward.
    pub fn forward(&self, input: &EncoderInput, kind: SlotKind, mode: Mode) -> Result<(HeadOutputs, EncoderOutput)> {
        let enc = encode(input, &self.params.encoder, &self.config.encoder, mode)?;
        let heads = apply_heads(&enc.token_states, input, kind, &self.params.heads)?;
        Ok((heads, enc))
    }

    pub fn predict(&self, input: &EncoderInput, kind: SlotKind) -> Result<HeadOutputs> {
        self.forward(input, kind, Mode::Eval).map(|(h, _)| h)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        save_checkpoint(dir, &self.params)?;
        crate::schema::write_json(dir.join("model_config.json"), &self.config)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("model_config.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::json(&path, &text, &e))?;
        let mut model = GolombModel::init(config, 0)?;
        load_checkpoint(dir, &mut model.params)?;
        if !model.params.all_finite() {
            return Err(Error::Checkpoint(format!("{}: non-finite parameters", dir.display())));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            assembly: AssemblyConfig::default(),
            encoder: EncoderConfig {
                hidden_size: 8,
                num_heads: 2,
                ffn_size: 16,
                num_layers: 1,
                vocab_size: 50,
                ..Default::default()
            },
        }
    }

    #[test]
    fn short_encoder_window_rejected() {
        let mut c = small();
        c.encoder.max_seq_len = 384;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = GolombModel::init(small(), 5).unwrap();
        m.save(dir.path()).unwrap();
        let back = GolombModel::load(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        for (a, b) in back.params.tensors().iter().zip(m.params.tensors()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter().zip(b.data) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
    }
}
