//! Layered run configuration: built-in defaults, then a profile file, then
//! `--set key=value` overrides, then dedicated flags. Every hyperparameter is
//! addressable by a dotted key, and the effective config is frozen into the
//! run directory before any compute starts.

use std::collections::BTreeMap;
use std::path::Path;

use condgen_core::data::MaskStyle;
use condgen_core::decode::DecodeConfig;
use condgen_core::model::{GateVariant, ModelConfig};
use condgen_core::train::{AblationFlags, TrainConfig};
use condgen_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// 0 = the 4·hidden default.
    pub ffn_size: usize,
    pub max_length: usize,
    pub num_condition_layers: usize,
    pub dropout: f64,
    pub gate: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub warmup_proportion: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// 0 disables gradient clipping.
    pub clip_norm: f64,
    pub mask_probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub min_count: u64,
    /// Probability of bidirectional attention per text sample.
    pub bidirectional_prob: f64,
    /// "pure_mask" or "bert_80_10_10".
    pub mask_style: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeSection {
    pub beam_size: usize,
    pub max_new_tokens: usize,
    pub length_norm_alpha: f64,
    pub block_repeat_bigrams: bool,
    pub allow_unk: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub decode: DecodeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection {
                hidden_size: 32,
                num_layers: 2,
                num_heads: 2,
                ffn_size: 0,
                max_length: 80,
                num_condition_layers: 2,
                dropout: 0.1,
                gate: "attention_routing".into(),
            },
            train: TrainSection {
                learning_rate: 1e-3,
                warmup_proportion: 0.1,
                weight_decay: 0.01,
                label_smoothing: 0.0,
                epochs: 4,
                batch_size: 32,
                seed: 17,
                clip_norm: 1.0,
                mask_probability: 0.25,
            },
            data: DataSection {
                min_count: 1,
                bidirectional_prob: 0.5,
                mask_style: "pure_mask".into(),
            },
            decode: DecodeSection {
                beam_size: 10,
                max_new_tokens: 24,
                length_norm_alpha: 0.0,
                block_repeat_bigrams: true,
                allow_unk: false,
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("cannot parse value {value:?} for key {key}")))
}

impl RunConfig {
    /// Apply one dotted-key override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.hidden_size" => self.model.hidden_size = parse(key, value)?,
            "model.num_layers" => self.model.num_layers = parse(key, value)?,
            "model.num_heads" => self.model.num_heads = parse(key, value)?,
            "model.ffn_size" => self.model.ffn_size = parse(key, value)?,
            "model.max_length" => self.model.max_length = parse(key, value)?,
            "model.num_condition_layers" => self.model.num_condition_layers = parse(key, value)?,
            "model.dropout" => self.model.dropout = parse(key, value)?,
            "model.gate" => {
                value.parse::<GateVariant>()?;
                self.model.gate = value.into();
            }
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.warmup_proportion" => self.train.warmup_proportion = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "train.label_smoothing" => self.train.label_smoothing = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, value)?,
            "train.mask_probability" => self.train.mask_probability = parse(key, value)?,
            "data.min_count" => self.data.min_count = parse(key, value)?,
            "data.bidirectional_prob" => self.data.bidirectional_prob = parse(key, value)?,
            "data.mask_style" => {
                mask_style_from_str(value)?;
                self.data.mask_style = value.into();
            }
            "decode.beam_size" => self.decode.beam_size = parse(key, value)?,
            "decode.max_new_tokens" => self.decode.max_new_tokens = parse(key, value)?,
            "decode.length_norm_alpha" => self.decode.length_norm_alpha = parse(key, value)?,
            "decode.block_repeat_bigrams" => self.decode.block_repeat_bigrams = parse(key, value)?,
            "decode.allow_unk" => self.decode.allow_unk = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Merge a profile file: either a flat JSON object of dotted keys
    /// (applied in sorted key order) or a frozen `config.json` from a run
    /// directory, so any run is reproducible from its own frozen config.
    pub fn apply_profile(&mut self, path: &Path) -> Result<()> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if let Ok(full) = serde_json::from_str::<RunConfig>(&body) {
            *self = full;
            return Ok(());
        }
        let entries: BTreeMap<String, serde_json::Value> = serde_json::from_str(&body)
            .map_err(|e| Error::Config(format!("profile {}: {e}", path.display())))?;
        for (key, value) in entries {
            let as_str = match &value {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            self.set(&key, &as_str)?;
        }
        Ok(())
    }

    pub fn apply_sets(&mut self, sets: &[String]) -> Result<()> {
        for kv in sets {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn gate_variant(&self) -> Result<GateVariant> {
        self.model.gate.parse()
    }

    pub fn mask_style(&self) -> Result<MaskStyle> {
        mask_style_from_str(&self.data.mask_style)
    }

    pub fn model_config(&self, vocab_size: usize, num_conditions: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            vocab_size,
            hidden_size: self.model.hidden_size,
            num_layers: self.model.num_layers,
            num_heads: self.model.num_heads,
            ffn_size: self.model.ffn_size,
            max_length: self.model.max_length,
            num_condition_layers: self.model.num_condition_layers,
            num_conditions,
            dropout_p: self.model.dropout,
            gate_variant: self.gate_variant()?,
        })
    }

    pub fn train_config(&self, ablations: AblationFlags) -> Result<TrainConfig> {
        Ok(TrainConfig {
            learning_rate: self.train.learning_rate,
            warmup_proportion: self.train.warmup_proportion,
            weight_decay: self.train.weight_decay,
            label_smoothing: self.train.label_smoothing,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            clip_norm: if self.train.clip_norm > 0.0 {
                Some(self.train.clip_norm)
            } else {
                None
            },
            mask_probability: self.train.mask_probability,
            mask_style: self.mask_style()?,
            bidirectional_prob: self.data.bidirectional_prob,
            ablations,
        })
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.decode.beam_size,
            max_new_tokens: self.decode.max_new_tokens,
            length_norm_alpha: self.decode.length_norm_alpha,
            block_repeat_bigrams: self.decode.block_repeat_bigrams,
            allow_unk: self.decode.allow_unk,
        }
    }

    /// Persist the effective configuration verbatim.
    pub fn freeze(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }
}

fn mask_style_from_str(s: &str) -> Result<MaskStyle> {
    match s {
        "pure_mask" => Ok(MaskStyle::PureMask),
        "bert_80_10_10" => Ok(MaskStyle::Bert801010),
        other => Err(Error::Config(format!("unknown mask style {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_override_defaults() {
        let mut cfg = RunConfig::default();
        cfg.set("model.hidden_size", "64").unwrap();
        cfg.set("train.learning_rate", "3e-5").unwrap();
        cfg.set("model.gate", "single_gate").unwrap();
        assert_eq!(cfg.model.hidden_size, 64);
        assert_eq!(cfg.train.learning_rate, 3e-5);
        assert!(matches!(
            cfg.gate_variant().unwrap(),
            GateVariant::SingleGate
        ));
        assert!(cfg.set("nope.key", "1").is_err());
        assert!(cfg.set("model.gate", "bogus").is_err());
    }

    #[test]
    fn frozen_config_reloads_as_profile() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.set("model.hidden_size", "48").unwrap();
        cfg.set("train.seed", "99").unwrap();
        let frozen = dir.path().join("config.json");
        cfg.freeze(&frozen).unwrap();

        let mut reloaded = RunConfig::default();
        reloaded.apply_profile(&frozen).unwrap();
        assert_eq!(reloaded.model.hidden_size, 48);
        assert_eq!(reloaded.train.seed, 99);
        assert_eq!(
            serde_json::to_string(&reloaded).unwrap(),
            serde_json::to_string(&cfg).unwrap()
        );
    }

    #[test]
    fn profile_then_sets_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let profile = dir.path().join("p.cfg");
        std::fs::write(
            &profile,
            r#"{"train.learning_rate": 3e-5, "train.batch_size": 160}"#,
        )
        .unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_profile(&profile).unwrap();
        assert_eq!(cfg.train.batch_size, 160);
        cfg.apply_sets(&["train.batch_size=8".into()]).unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.learning_rate, 3e-5);
    }
}
