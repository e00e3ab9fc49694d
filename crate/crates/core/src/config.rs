//! Run configuration: a flat `key = value` TOML file plus `key=value`
//! overrides. Unknown keys are rejected; every run writes the resolved
//! configuration next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synthetic::{MappingKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::generate::DecodeMode;
use crate::model::{LossWeights, ModelConfig};
use crate::train::{AdamConfig, TrainConfig};

pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory holding `train.jsonl`, `valid.jsonl`, `test.jsonl`.
    pub data_dir: PathBuf,
    /// Vocabulary file; empty means `<data_dir>/vocab.txt`.
    pub vocab: PathBuf,

    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub mapping: MappingKind,
    pub noise: f64,
    pub max_history: usize,
    pub audio_dim: usize,
    pub audio_frames: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,

    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub tct_blocks: usize,
    pub decoder_layers: usize,
    pub autoencoder_layers: usize,
    pub use_visual: bool,
    pub use_audio: bool,

    pub alpha: f64,
    pub beta: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub validate_every: usize,
    pub warmup: usize,
    pub lr_factor: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,

    /// `greedy` or `beam`.
    pub decode: String,
    pub beam_width: usize,
    pub max_answer_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticSpec::default();
        let train = TrainConfig::default();
        RunConfig {
            data_dir: PathBuf::from("data"),
            vocab: PathBuf::new(),
            vocab_size: syn.vocab_size,
            min_len: syn.min_len,
            max_len: syn.max_len,
            mapping: syn.mapping,
            noise: syn.noise,
            max_history: syn.max_history,
            audio_dim: syn.audio_dim,
            audio_frames: syn.audio_frames,
            train_size: syn.train,
            valid_size: syn.valid,
            test_size: syn.test,
            d_model: 32,
            heads: 4,
            d_ff: 128,
            tct_blocks: 1,
            decoder_layers: 2,
            autoencoder_layers: 2,
            use_visual: true,
            use_audio: true,
            alpha: train.weights.alpha,
            beta: train.weights.beta,
            dropout: train.dropout,
            batch_size: train.batch_size,
            max_steps: train.max_steps,
            validate_every: train.validate_every,
            warmup: train.warmup,
            lr_factor: train.lr_factor,
            clip_norm: 0.0,
            seed: 0,
            decode: "greedy".into(),
            beam_width: 4,
            max_answer_len: 32,
        }
    }
}

/// Parses one override value as a TOML value, falling back to a plain
/// string (so `mapping=reversal` works without quotes).
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Config file (if any) with `overrides` applied on top.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            table.insert(key.trim().to_string(), override_value(value.trim()));
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.decode_mode()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes `config.toml` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn vocab_path(&self) -> PathBuf {
        if self.vocab.as_os_str().is_empty() {
            self.data_dir.join("vocab.txt")
        } else {
            self.vocab.clone()
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            vocab_size: self.vocab_size,
            min_len: self.min_len,
            max_len: self.max_len,
            mapping: self.mapping,
            noise: self.noise,
            max_history: self.max_history,
            audio_dim: self.audio_dim,
            audio_frames: self.audio_frames,
            train: self.train_size,
            valid: self.valid_size,
            test: self.test_size,
            seed: self.seed,
        }
    }

    /// Model dimensions for a vocabulary size and the feature widths found
    /// in the data (ignored when the modality is switched off).
    pub fn model_config(&self, vocab_size: usize, visual_dim: usize, audio_dim: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            tct_blocks: self.tct_blocks,
            decoder_layers: self.decoder_layers,
            autoencoder_layers: self.autoencoder_layers,
            visual_dim: if self.use_visual { visual_dim } else { 0 },
            audio_dim: if self.use_audio { audio_dim } else { 0 },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
            },
            dropout: self.dropout,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            seed: self.seed,
            validate_every: self.validate_every,
            warmup: self.warmup,
            lr_factor: self.lr_factor,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            adam: AdamConfig::default(),
        }
    }

    pub fn decode_mode(&self) -> Result<DecodeMode> {
        match self.decode.as_str() {
            "greedy" => Ok(DecodeMode::Greedy),
            "beam" if self.beam_width > 0 => Ok(DecodeMode::Beam(self.beam_width)),
            "beam" => Err(Error::Config("beam_width must be at least 1".into())),
            other => Err(Error::Config(format!("decode must be greedy or beam, got `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::resolve(
            None,
            &["d_model=16".into(), "mapping=reversal".into(), "alpha = 0.5".into(), "data_dir=/tmp/x".into()],
        )
        .unwrap();
        assert_eq!(cfg.d_model, 16);
        assert_eq!(cfg.mapping, MappingKind::Reversal);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.data_dir, PathBuf::from("/tmp/x"));
        let path = cfg.write_snapshot(dir.path()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), &[]).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::resolve(None, &["d_modle=16".into()]).unwrap_err().to_string();
        assert!(err.contains("d_modle"), "{err}");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "heads = 2\nbogus = 1\n").unwrap();
        assert!(matches!(RunConfig::resolve(Some(&path), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::resolve(None, &["dropout=1.0".into()]).is_err());
        assert!(RunConfig::resolve(None, &["decode=sample".into()]).is_err());
        assert!(RunConfig::resolve(None, &["no_equals".into()]).is_err());
        assert!(RunConfig::resolve(None, &["max_steps=-3".into()]).is_err());
    }

    #[test]
    fn vocab_defaults_to_data_dir() {
        let cfg = RunConfig::resolve(None, &["data_dir=d".into()]).unwrap();
        assert_eq!(cfg.vocab_path(), PathBuf::from("d/vocab.txt"));
    }
}
