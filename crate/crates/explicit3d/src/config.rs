//! Flat `key = value` run configuration with typed validation.
//!
//! Every tunable of the pipeline lives here; a config file sets any subset
//! and command-line overrides are applied on top as `key=value` pairs.
//! Unknown keys are rejected rather than ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::FuseFirstTerm;
use crate::error::{Error, Result};
use crate::eval::ScaleErrorMode;
use crate::loss::ViolationMode;
use crate::model::{Ablation, ModelConfig};
use crate::relatedness::PruneMode;
use crate::train::TrainConfig;

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Complete run configuration: model, optimizer and data settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Scenes to generate for `gen-data` (split 80/20 downstream).
    pub n_scenes: usize,
    /// Master seed for scene generation.
    pub data_seed: u64,
    pub scale_mode: ScaleErrorMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            n_scenes: 500,
            data_seed: 1,
            scale_mode: ScaleErrorMode::PerAxisRelative,
        }
    }
}

/// Every key accepted in config files and overrides.
pub const CONFIG_KEYS: &[&str] = &[
    "dim",
    "t_iter",
    "k_clusters",
    "d_pe",
    "sigmoid_rescale",
    "prune_mode",
    "violation_mode",
    "ablation",
    "fusion_alpha",
    "fusion_beta",
    "fusion_first_term",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda_reg",
    "theta_bins",
    "distance_bins",
    "size_bins",
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "n_scenes",
    "data_seed",
    "scale_mode",
];

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| cfg_err(format!("{key}: expected a non-negative integer, got {v:?}")))
        };
        let parse_u64 = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| cfg_err(format!("{key}: expected a non-negative integer, got {v:?}")))
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| cfg_err(format!("{key}: expected a number, got {v:?}")))
        };
        let parse_bool = |v: &str| match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(cfg_err(format!("{key}: expected true or false, got {v:?}"))),
        };
        match key {
            "dim" => self.model.dim = parse_usize(value)?,
            "t_iter" => self.model.t_iter = parse_usize(value)?,
            "k_clusters" => self.model.k_clusters = parse_usize(value)?,
            "d_pe" => self.model.score_opts.d_pe = parse_usize(value)?,
            "sigmoid_rescale" => self.model.score_opts.sigmoid_rescale = parse_bool(value)?,
            "prune_mode" => {
                self.model.prune_mode = match value {
                    "per_target" => PruneMode::PerTarget,
                    "global" => PruneMode::Global,
                    _ => {
                        return Err(cfg_err(format!(
                            "prune_mode: expected per_target or global, got {value:?}"
                        )))
                    }
                }
            }
            "violation_mode" => {
                self.model.violation_mode = match value {
                    "overlap" => ViolationMode::Overlap,
                    "literal" => ViolationMode::Literal,
                    _ => {
                        return Err(cfg_err(format!(
                            "violation_mode: expected overlap or literal, got {value:?}"
                        )))
                    }
                }
            }
            "ablation" => {
                self.model.ablation =
                    Ablation::parse(value).map_err(|e| cfg_err(e.to_string()))?
            }
            "fusion_alpha" => self.model.fusion.alpha = parse_f64(value)?,
            "fusion_beta" => self.model.fusion.beta = parse_f64(value)?,
            "fusion_first_term" => {
                self.model.fusion.first_term = match value {
                    "independent" => FuseFirstTerm::Independent,
                    "composed" => FuseFirstTerm::Composed,
                    _ => {
                        return Err(cfg_err(format!(
                            "fusion_first_term: expected independent or composed, got {value:?}"
                        )))
                    }
                }
            }
            "lambda1" => self.model.weights.lambda1 = parse_f64(value)?,
            "lambda2" => self.model.weights.lambda2 = parse_f64(value)?,
            "lambda3" => self.model.weights.lambda3 = parse_f64(value)?,
            "lambda_reg" => self.model.weights.lambda_reg = parse_f64(value)?,
            "theta_bins" => self.model.specs.theta.n_bins = parse_usize(value)?,
            "distance_bins" => self.model.specs.distance.n_bins = parse_usize(value)?,
            "size_bins" => self.model.specs.log_size.n_bins = parse_usize(value)?,
            "epochs" => self.train.epochs = parse_usize(value)?,
            "batch_size" => self.train.batch_size = parse_usize(value)?,
            "lr" => self.train.lr = parse_f64(value)?,
            "seed" => self.train.seed = parse_u64(value)?,
            "n_scenes" => self.n_scenes = parse_usize(value)?,
            "data_seed" => self.data_seed = parse_u64(value)?,
            "scale_mode" => {
                self.scale_mode = match value {
                    "per_axis" => ScaleErrorMode::PerAxisRelative,
                    "volume" => ScaleErrorMode::VolumeRatio,
                    _ => {
                        return Err(cfg_err(format!(
                            "scale_mode: expected per_axis or volume, got {value:?}"
                        )))
                    }
                }
            }
            _ => return Err(cfg_err(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a flat config file: `key = value` lines, `#` comments, blank
    /// lines ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(cfg_err(format!(
                    "{}:{}: expected `key = value`, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value)
                .map_err(|e| cfg_err(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
        Ok(())
    }

    /// Cross-field validation after all assignments.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.dim == 0 || m.dim % 2 != 0 {
            return Err(cfg_err("dim must be a positive even number"));
        }
        if m.t_iter == 0 {
            return Err(cfg_err("t_iter must be at least 1"));
        }
        if m.k_clusters == 0 {
            return Err(cfg_err("k_clusters must be at least 1"));
        }
        if m.score_opts.d_pe == 0 {
            return Err(cfg_err("d_pe must be at least 1"));
        }
        if (m.fusion.alpha + m.fusion.beta - 1.0).abs() > 1e-9 {
            return Err(cfg_err("fusion_alpha + fusion_beta must equal 1"));
        }
        if !(0.0..=1.0).contains(&m.fusion.alpha) {
            return Err(cfg_err("fusion_alpha must lie in [0, 1]"));
        }
        for (name, v) in [
            ("lambda1", m.weights.lambda1),
            ("lambda2", m.weights.lambda2),
            ("lambda3", m.weights.lambda3),
            ("lambda_reg", m.weights.lambda_reg),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(cfg_err(format!("{name} must be a non-negative number")));
            }
        }
        for (name, bins) in [
            ("theta_bins", m.specs.theta.n_bins),
            ("distance_bins", m.specs.distance.n_bins),
            ("size_bins", m.specs.log_size.n_bins),
        ] {
            if bins == 0 {
                return Err(cfg_err(format!("{name} must be at least 1")));
            }
        }
        if self.train.epochs == 0 {
            return Err(cfg_err("epochs must be at least 1"));
        }
        if self.train.batch_size == 0 {
            return Err(cfg_err("batch_size must be at least 1"));
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(cfg_err("lr must be a positive number"));
        }
        if self.n_scenes < 5 {
            return Err(cfg_err("n_scenes must be at least 5 for an 80/20 split"));
        }
        Ok(())
    }

    /// Load defaults, then an optional file, then `key=value` overrides, and
    /// validate the result.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
