//! Run configuration: a flat key=value text file plus command-line
//! overrides, every field carrying its reference default.

use crate::error::{HierformError, Result};
use crate::hierarchy::{Ablations, DurationStats, ModelDims, ModelKind, PlanOverrides};
use crate::training::TrainConfig;
use std::fs;
use std::path::Path;

/// How sequences that differ from `max_frames` are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadPolicy {
    /// Zero-pad short sequences (masked) and truncate long ones.
    PadTruncate,
    /// Reject sequences whose length differs from `max_frames`.
    Strict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub phone_short_ms: f64,
    pub phone_long_ms: f64,
    pub word_short_ms: f64,
    pub word_long_ms: f64,
    pub mismatch: f64,

    pub d: usize,
    pub d_ff: usize,
    pub d_cls: usize,
    pub heads: usize,
    pub classes: usize,
    /// Feature width expected on disk; 0 means "take it from the input".
    pub input_dim: usize,

    pub layers: [usize; 4],
    pub baseline_layers: usize,
    pub kind: ModelKind,

    pub unit_encoder: bool,
    pub word_encoder: bool,
    pub merging: bool,

    pub seed: u64,
    pub max_frames: usize,
    pub pad_policy: PadPolicy,

    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,

    pub t_w_override: [Option<usize>; 3],
    pub m_override: [Option<usize>; 3],
    pub t_z_override: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phone_short_ms: 50.0,
            phone_long_ms: 200.0,
            word_short_ms: 250.0,
            word_long_ms: 1000.0,
            mismatch: 1.0,
            d: 1024,
            d_ff: 512,
            d_cls: 512,
            heads: 8,
            classes: 4,
            input_dim: 0,
            layers: [2, 2, 4, 4],
            baseline_layers: 12,
            kind: ModelKind::Hierarchical,
            unit_encoder: true,
            word_encoder: true,
            merging: true,
            seed: 42,
            max_frames: 326,
            pad_policy: PadPolicy::PadTruncate,
            epochs: 120,
            lr: 5e-4,
            momentum: 0.9,
            batch_size: 32,
            t_w_override: [None; 3],
            m_override: [None; 3],
            t_z_override: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| HierformError::Config(format!("cannot parse {key}={value}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        other => Err(HierformError::Config(format!(
            "cannot parse {key}={other} as a flag"
        ))),
    }
}

impl RunConfig {
    /// Applies one `key=value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "phone_short_ms" => self.phone_short_ms = parse(key, value)?,
            "phone_long_ms" => self.phone_long_ms = parse(key, value)?,
            "word_short_ms" => self.word_short_ms = parse(key, value)?,
            "word_long_ms" => self.word_long_ms = parse(key, value)?,
            "mismatch" => self.mismatch = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "d_cls" => self.d_cls = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "input_dim" => self.input_dim = parse(key, value)?,
            "n1" => self.layers[0] = parse(key, value)?,
            "n2" => self.layers[1] = parse(key, value)?,
            "n3" => self.layers[2] = parse(key, value)?,
            "n4" => self.layers[3] = parse(key, value)?,
            "baseline_layers" => self.baseline_layers = parse(key, value)?,
            "model" => {
                self.kind = match value.trim() {
                    "hierarchical" => ModelKind::Hierarchical,
                    "baseline" => ModelKind::Baseline,
                    other => {
                        return Err(HierformError::Config(format!("unknown model kind {other}")))
                    }
                }
            }
            "unit_encoder" => self.unit_encoder = parse_bool(key, value)?,
            "word_encoder" => self.word_encoder = parse_bool(key, value)?,
            "merging" => self.merging = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "max_frames" => self.max_frames = parse(key, value)?,
            "pad_policy" => {
                self.pad_policy = match value.trim() {
                    "pad" | "pad_truncate" => PadPolicy::PadTruncate,
                    "strict" => PadPolicy::Strict,
                    other => {
                        return Err(HierformError::Config(format!("unknown pad policy {other}")))
                    }
                }
            }
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "t_w1" => self.t_w_override[0] = Some(parse(key, value)?),
            "t_w2" => self.t_w_override[1] = Some(parse(key, value)?),
            "t_w3" => self.t_w_override[2] = Some(parse(key, value)?),
            "m1" => self.m_override[0] = Some(parse(key, value)?),
            "m2" => self.m_override[1] = Some(parse(key, value)?),
            "m3" => self.m_override[2] = Some(parse(key, value)?),
            "t_z" => self.t_z_override = Some(parse(key, value)?),
            other => return Err(HierformError::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Parses a config file: one `key=value` per line, `#` comments.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut config = RunConfig::default();
        let text = fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HierformError::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                ))
            })?;
            config.apply(key.trim(), value)?;
        }
        Ok(config)
    }

    pub fn stats(&self) -> DurationStats {
        DurationStats {
            phone_short_ms: self.phone_short_ms,
            phone_long_ms: self.phone_long_ms,
            word_short_ms: self.word_short_ms,
            word_long_ms: self.word_long_ms,
            mismatch: self.mismatch,
        }
    }

    pub fn dims(&self, input_dim: usize) -> ModelDims {
        ModelDims {
            d: self.d,
            d_ff: self.d_ff,
            d_cls: self.d_cls,
            heads: self.heads,
            classes: self.classes,
            input_dim: if self.input_dim != 0 {
                self.input_dim
            } else {
                input_dim
            },
        }
    }

    pub fn ablations(&self) -> Ablations {
        Ablations {
            unit_encoder: self.unit_encoder,
            word_encoder: self.word_encoder,
            merging: self.merging,
        }
    }

    pub fn plan_overrides(&self) -> PlanOverrides {
        PlanOverrides {
            t_w: self.t_w_override,
            m: self.m_override,
            t_z: self.t_z_override,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.d, 1024);
        assert_eq!(c.heads, 8);
        assert_eq!(c.layers, [2, 2, 4, 4]);
        assert_eq!(c.baseline_layers, 12);
        assert_eq!(c.max_frames, 326);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.momentum, 0.9);
    }

    #[test]
    fn file_parsing_with_comments_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(
            &path,
            "# tiny setup\nd=8\nheads = 2\nclasses=2\nword_encoder=off\nmismatch=1.5\nn4=1\n",
        )
        .unwrap();
        let mut c = RunConfig::from_file(&path).unwrap();
        assert_eq!(c.d, 8);
        assert_eq!(c.heads, 2);
        assert!(!c.word_encoder);
        assert_eq!(c.mismatch, 1.5);
        assert_eq!(c.layers, [2, 2, 4, 1]);
        // command-line override wins over the file value
        c.apply("d", "16").unwrap();
        assert_eq!(c.d, 16);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(
            c.apply("no_such_key", "1"),
            Err(HierformError::Config(_))
        ));
        assert!(matches!(
            c.apply("d", "not_a_number"),
            Err(HierformError::Config(_))
        ));
    }
}
