//! Run configuration, JSON-serializable.

use crate::answer::TaskMode;
use crate::error::{QfeError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Sequential extractor with glimpse attention and EOE termination.
    Qfe,
    /// Independent per-sentence sigmoid with a fixed selection threshold.
    Baseline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub mode: TaskMode,
    pub extractor: ExtractorKind,
    /// Trainable word-embedding width; d_w = word_dim + char_channels.
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_channels: usize,
    /// Uni-directional RNN width; must be even.
    pub d_c: usize,
    pub dropout_keep: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beam_size: usize,
    pub truncation_limit: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Cap on vocabulary size (None keeps every training token).
    pub vocab_cap: Option<usize>,
    pub baseline_threshold: f64,
    pub grad_clip: f64,
    /// Early-stopping patience on dev joint F1.
    pub patience: usize,
    /// Optional early exit once dev evidence EM and answer EM both reach
    /// these targets.
    pub stop_at_evidence_em: Option<f64>,
    pub stop_at_answer_em: Option<f64>,
    /// Ablation: mask answer-span decoding to predicted evidence sentences.
    pub mask_answer_by_evidence: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config::desk()
    }
}

impl Config {
    /// Desk-scale defaults: trains on the synthetic set in minutes on a CPU.
    pub fn desk() -> Self {
        Config {
            mode: TaskMode::Rc,
            extractor: ExtractorKind::Qfe,
            word_dim: 24,
            char_dim: 8,
            char_channels: 8,
            d_c: 32,
            dropout_keep: 1.0,
            batch_size: 16,
            learning_rate: 0.001,
            beam_size: 5,
            truncation_limit: 2000,
            epochs: 20,
            seed: 0,
            vocab_cap: None,
            baseline_threshold: 0.4,
            grad_clip: 5.0,
            patience: 3,
            stop_at_evidence_em: None,
            stop_at_answer_em: None,
            mask_answer_by_evidence: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_c < 2 || self.d_c % 2 != 0 {
            return Err(QfeError::Config(format!("d_c must be even and >= 2, got {}", self.d_c)));
        }
        if self.word_dim == 0 || self.char_dim == 0 || self.char_channels == 0 {
            return Err(QfeError::Config("embedding widths must be positive".into()));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(QfeError::Config(format!(
                "dropout keep ratio {} outside (0, 1]",
                self.dropout_keep
            )));
        }
        if self.batch_size == 0 {
            return Err(QfeError::Config("batch size must be >= 1".into()));
        }
        if self.beam_size == 0 {
            return Err(QfeError::Config("beam size must be >= 1".into()));
        }
        if self.truncation_limit == 0 {
            return Err(QfeError::Config("truncation limit must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(QfeError::Config("learning rate must be positive".into()));
        }
        if !(0.0 < self.baseline_threshold && self.baseline_threshold < 1.0) {
            return Err(QfeError::Config(format!(
                "baseline threshold {} outside (0, 1)",
                self.baseline_threshold
            )));
        }
        Ok(())
    }

    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_validate() {
        Config::desk().validate().unwrap();
    }

    #[test]
    fn odd_dc_rejected() {
        let cfg = Config { d_c: 5, ..Config::desk() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_roundtrip_with_partial_fields() {
        let j = r#"{"mode":"rte","d_c":8,"beam_size":3}"#;
        let cfg: Config = serde_json::from_str(j).unwrap();
        assert_eq!(cfg.mode, TaskMode::Rte);
        assert_eq!(cfg.d_c, 8);
        assert_eq!(cfg.beam_size, 3);
        assert_eq!(cfg.batch_size, Config::desk().batch_size);
    }
}
