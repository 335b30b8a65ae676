//! Experiment configuration files and the built-in presets.
//!
//! A config is TOML with `[data]`, `[model]` and `[train]` sections. Unknown
//! keys are rejected. `train.seed` is the single root seed.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchitectureSpec;
use crate::cells::{NormConfig, RegularizerConfig};
use crate::data::{SplitRule, TokenMode};
use crate::error::{Error, Result};
use crate::training::{AdamConfig, Precision, ScheduleKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub mode: TokenMode,
    /// Reserve an id for symbols absent from the train split.
    #[serde(default)]
    pub unknown: bool,
    pub split: SplitRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ArchitectureSpec,
    pub train: TrainConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

pub const PRESETS: [(&str, &str); 8] = [
    ("ptb-fs2", "Penn Treebank characters, FS-LSTM-2"),
    ("ptb-fs4", "Penn Treebank characters, FS-LSTM-4"),
    ("enwik8-fs2", "enwik8 bytes, FS-LSTM-2"),
    ("enwik8-fs4", "enwik8 bytes, FS-LSTM-4"),
    ("enwik8-fs4-large", "enwik8 bytes, large FS-LSTM-4"),
    ("compare-fs", "dynamics comparison, FS-LSTM-4 with 450-unit cells"),
    ("compare-stacked", "dynamics comparison, 5 stacked 375-unit LSTMs"),
    ("compare-sequential", "dynamics comparison, 5 sequential 500-unit LSTMs"),
];

struct Column {
    keep: f64,
    zoneout_cell: f64,
    zoneout_hidden: f64,
    k: usize,
    fast: usize,
    slow: usize,
    window: usize,
    embed: usize,
    lr: f64,
    epochs: usize,
}

fn main_preset(name: &str, c: Column, ptb: bool) -> ExperimentConfig {
    let model = ArchitectureSpec::fast_slow(c.k, c.fast, c.slow, 0, c.embed)
        .with_norm(NormConfig::FULL)
        .with_regularization(RegularizerConfig {
            dropout_keep: c.keep,
            zoneout_cell: c.zoneout_cell,
            zoneout_hidden: c.zoneout_hidden,
            training: true,
        });
    ExperimentConfig {
        preset: Some(name.to_string()),
        output_dir: default_output(),
        data: DataConfig {
            path: None,
            mode: if ptb { TokenMode::PtbChars } else { TokenMode::Enwik8Bytes },
            unknown: false,
            split: if ptb { SplitRule::Ptb } else { SplitRule::Enwik8 },
        },
        model,
        train: TrainConfig {
            batch: 128,
            window: c.window,
            epochs: c.epochs,
            lr: c.lr,
            schedule: if ptb { ScheduleKind::PtbLast20 } else { ScheduleKind::PlateauDiv10 },
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            seed: 1,
            precision: Precision::F32,
            valid_batch: None,
            log_every: 100,
            checkpoint_every: 500,
        },
    }
}

fn compare_preset(name: &str, model: ArchitectureSpec) -> ExperimentConfig {
    ExperimentConfig {
        preset: Some(name.to_string()),
        output_dir: default_output(),
        data: DataConfig {
            path: None,
            mode: TokenMode::Enwik8Bytes,
            unknown: false,
            split: SplitRule::Proportional { valid: 0.05, test: 0.05 },
        },
        model: model.with_norm(NormConfig {
            gate_norm: false,
            cell_norm: true,
            normalize_stored_cell: false,
        }),
        train: TrainConfig {
            batch: 64,
            window: 100,
            epochs: 20,
            lr: 0.002,
            schedule: ScheduleKind::Constant,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            seed: 1,
            precision: Precision::F32,
            valid_batch: None,
            log_every: 100,
            checkpoint_every: 500,
        },
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let ptb = |fast| Column {
        keep: 0.65,
        zoneout_cell: 0.5,
        zoneout_hidden: 0.1,
        k: if fast == 700 { 2 } else { 4 },
        fast,
        slow: 400,
        window: 150,
        embed: 128,
        lr: 0.002,
        epochs: 200,
    };
    let enwik8 = |k, fast, slow, keep, window, epochs| Column {
        keep,
        zoneout_cell: 0.3,
        zoneout_hidden: 0.05,
        k,
        fast,
        slow,
        window,
        embed: 256,
        lr: 0.001,
        epochs,
    };
    Ok(match name {
        "ptb-fs2" => main_preset(name, ptb(700), true),
        "ptb-fs4" => main_preset(name, ptb(500), true),
        "enwik8-fs2" => main_preset(name, enwik8(2, 900, 1500, 0.8, 150, 35), false),
        "enwik8-fs4" => main_preset(name, enwik8(4, 730, 1500, 0.8, 150, 35), false),
        "enwik8-fs4-large" => main_preset(name, enwik8(4, 1200, 1500, 0.75, 100, 50), false),
        "compare-fs" => compare_preset(name, ArchitectureSpec::fast_slow(4, 450, 450, 0, 256)),
        "compare-stacked" => compare_preset(name, ArchitectureSpec::stacked(5, 375, 0, 256)),
        "compare-sequential" => compare_preset(name, ArchitectureSpec::sequential(5, 500, 0, 256)),
        other => {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            return Err(Error::Config(format!(
                "unknown preset {other:?}; available: {}",
                known.join(", ")
            )));
        }
    })
}

/// `ceil(n·s)`, ignoring floating-point noise below 1e-9.
fn scale_width(n: usize, s: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((n as f64 * s - 1e-9).ceil() as usize).max(1)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything except the vocabulary, which comes from the data.
    pub fn validate(&self) -> Result<()> {
        let mut m = self.model.clone();
        if m.vocab == 0 {
            m.vocab = 1;
        }
        m.validate()?;
        self.train.validate()
    }

    /// Multiplies every width (cell sizes and embedding size) by `s`,
    /// rounding up.
    pub fn scaled(mut self, s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("scale {s} must be positive")));
        }
        let m = &mut self.model;
        m.fast_size = scale_width(m.fast_size, s);
        m.slow_size = scale_width(m.slow_size, s);
        m.cell_size = scale_width(m.cell_size, s);
        m.embed_dim = scale_width(m.embed_dim, s);
        Ok(self)
    }

    /// Hex SHA-256 of the canonical TOML, shortened to 16 characters.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml()?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(hex::encode(&digest[..8]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_round_trips() {
        for (name, _) in PRESETS {
            let c = preset(name).unwrap();
            c.validate().unwrap();
            let text = c.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c, "{name}");
        }
    }

    #[test]
    fn ptb_fs2_size_is_near_seven_million() {
        let mut c = preset("ptb-fs2").unwrap();
        c.model.vocab = 50;
        let n = c.model.param_count().unwrap();
        assert!((6_900_000..7_500_000).contains(&n), "{n}");
    }

    #[test]
    fn dropout_column_is_drop_probability() {
        let keep = |n| preset(n).unwrap().model.regularization.dropout_keep;
        assert_eq!(keep("ptb-fs2"), 0.65);
        assert_eq!(keep("enwik8-fs4"), 0.8);
        assert_eq!(keep("enwik8-fs4-large"), 0.75);
    }

    #[test]
    fn scale_rounds_up_widths_only() {
        let c = preset("compare-fs").unwrap();
        let s = c.clone().scaled(0.22).unwrap();
        assert_eq!((s.model.fast_size, s.model.slow_size, s.model.embed_dim), (99, 99, 57));
        assert_eq!(s.train, c.train);
        assert_eq!(s.model.cells, c.model.cells);
        let t = preset("compare-stacked").unwrap().scaled(0.1).unwrap();
        assert_eq!(t.model.cell_size, 38);
        assert!(c.scaled(0.0).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = preset("ptb-fs2").unwrap().to_toml().unwrap();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
        let text = preset("ptb-fs2").unwrap().to_toml().unwrap().replace("lr =", "learning_rate =");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        assert!(preset("nope").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = preset("compare-fs").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.train.seed = 2;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
