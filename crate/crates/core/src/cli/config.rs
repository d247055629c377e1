//! Experiment config files: a JSON object with a `preset` name whose other
//! fields are merged, key by key, over that preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{self, SyntheticCorpusConfig};
use crate::error::{Error, Result};
use crate::trainer::{Dataset, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: SyntheticCorpusConfig,
    /// Plain-text training corpus; replaces the synthetic one when set.
    pub text_path: Option<PathBuf>,
    pub max_sentences: usize,
    /// Evaluation pairs file, required with `text_path`.
    pub eval_pairs_path: Option<PathBuf>,
    /// Synthetic sentences held out of training for evaluation pairs.
    pub holdout: usize,
    pub eval_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticCorpusConfig::default(),
            text_path: None,
            max_sentences: 100_000,
            eval_pairs_path: None,
            holdout: 400,
            eval_pairs: 200,
        }
    }
}

impl DataConfig {
    /// Builds the dataset. Relative paths resolve against `base_dir`.
    pub fn load(&self, train: &TrainConfig, base_dir: &Path) -> Result<Dataset> {
        match &self.text_path {
            None => {
                let corpus = corpus::gen_corpus(&self.synthetic)?;
                Dataset::split(&corpus, self.holdout, self.eval_pairs, self.synthetic.seed)
            }
            Some(text) => {
                let pairs = self
                    .eval_pairs_path
                    .as_ref()
                    .ok_or_else(|| Error::config("data.eval_pairs_path", "required with data.text_path"))?;
                let corpus = corpus::load_text_corpus(
                    &base_dir.join(text),
                    self.max_sentences,
                    train.encoder.vocab_size,
                    train.encoder.max_seq_len,
                )?;
                Ok(Dataset { train: corpus.sentences, eval_pairs: corpus::read_sts_pairs(&base_dir.join(pairs))? })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self { preset, train: TrainConfig::desk(), data: DataConfig::default() },
            Preset::Base => {
                let train = TrainConfig::base();
                let data = DataConfig {
                    synthetic: SyntheticCorpusConfig {
                        num_sentences: 100_000,
                        vocab_size: train.encoder.vocab_size,
                        ..SyntheticCorpusConfig::default()
                    },
                    ..DataConfig::default()
                };
                Self { preset, train, data }
            }
        }
    }

    /// Parses a config object: `preset` (default `desk`) picks the base and
    /// every other field overrides it.
    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(map) = &value else {
            return Err(Error::config("<root>", "config must be a JSON object"));
        };
        let preset = match map.get("preset") {
            None => Preset::Desk,
            Some(p) => serde_json::from_value(p.clone())
                .map_err(|e| Error::config("preset", format!("{e}; expected \"desk\" or \"base\"")))?,
        };
        let mut merged = serde_json::to_value(Self::preset(preset)).expect("config serializes");
        merge(&mut merged, value);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::config("<root>", e.to_string()))?;
        cfg.train.validate()?;
        cfg.data.synthetic.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Recursive object merge; non-object values in `patch` replace `base`.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    // Tagged enums (like the EMA mode) switch variant wholesale.
                    Some(slot) if slot.is_object() && v.is_object() && !switches_tag(slot, &v) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn switches_tag(base: &Value, patch: &Value) -> bool {
    matches!((base.get("mode"), patch.get("mode")), (Some(a), Some(b)) if a != b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ema::EmaMode;

    #[test]
    fn empty_object_is_desk() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::preset(Preset::Desk));
    }

    #[test]
    fn nested_override_keeps_siblings() {
        let cfg = ExperimentConfig::from_json(r#"{"train": {"encoder": {"model_dim": 32, "pred_dim": 32}, "steps": 7}}"#)
            .unwrap();
        assert_eq!(cfg.train.encoder.model_dim, 32);
        assert_eq!(cfg.train.encoder.num_blocks, 2);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn ema_mode_switches_variant() {
        let cfg = ExperimentConfig::from_json(r#"{"train": {"ema": {"mode": "constant", "eta": 0.0}}}"#).unwrap();
        assert_eq!(cfg.train.ema, EmaMode::Constant { eta: 0.0 });
        let cfg = ExperimentConfig::from_json(r#"{"train": {"ema": {"eta_end": 0.9}}}"#).unwrap();
        assert_eq!(cfg.train.ema, EmaMode::Schedule { eta_start: 0.75, eta_end: 0.9 });
    }

    #[test]
    fn slice_window_is_a_string() {
        let cfg = ExperimentConfig::from_json(r#"{"train": {"queue": {"slice": "!8-16"}}}"#).unwrap();
        assert_eq!(cfg.train.queue.slice.unwrap().to_string(), "!8-16");
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::from_json(r#"{"train": {"stepz": 3}}"#).unwrap_err();
        assert!(e.to_string().contains("stepz"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"train": {"steps": 0}}"#).unwrap_err();
        assert!(e.to_string().contains("steps"), "{e}");
        assert!(ExperimentConfig::from_json(r#"{"preset": "huge"}"#).is_err());
        assert!(ExperimentConfig::from_json("[1]").is_err());
    }

    #[test]
    fn base_preset_parses() {
        let cfg = ExperimentConfig::from_json(r#"{"preset": "base"}"#).unwrap();
        assert_eq!(cfg.train.encoder.model_dim, 768);
        assert_eq!(cfg.train.batch_size, 64);
    }
}
