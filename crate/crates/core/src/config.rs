//! Run configuration: one TOML file with sections for grid, generation,
//! shift, pretraining, stream, adaptation, decoding, matching, and
//! evaluation. Unknown keys are rejected and missing keys are reported
//! by name. Named presets are compiled into the binary from the
//! `presets/` directory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::AdaptConfig;
use crate::detector::TrainConfig;
use crate::scene_gen::{GenConfig, GridSpec, ShiftSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub scenes: usize,
    pub holdout_scenes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub n_batches: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub rho: f64,
    /// Input-space radius override for ablations; defaults to `rho`.
    pub rho_input: Option<f64>,
    pub alpha: f64,
    pub gamma: f64,
    pub eta: f64,
    pub c_stop: f64,
    pub lambda_reg: f64,
    pub perturb_weights: bool,
    pub perturb_inputs: bool,
    pub use_matcher: bool,
    pub include_sentinel_costs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub score_thresh: f64,
    pub nms_thresh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatcherSection {
    pub w_iou: f64,
    pub w_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub iou_thresh: f64,
}

/// The complete, explicit configuration of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub generator: GenConfig,
    pub shift: ShiftSpec,
    pub pretrain: PretrainSection,
    pub stream: StreamSection,
    pub adapt: AdaptSection,
    pub decode: DecodeSection,
    pub matcher: MatcherSection,
    pub eval: EvalSection,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config value out of range: {0}")]
    Range(String),
    #[error("unknown preset '{0}'; available: default, composite-heavy, source-sanity")]
    UnknownPreset(String),
}

/// Built-in presets compiled from `presets/*.toml`.
pub struct Preset;

impl Preset {
    pub const NAMES: [&'static str; 3] = ["default", "composite-heavy", "source-sanity"];

    fn text(name: &str) -> Option<&'static str> {
        match name {
            "default" => Some(include_str!("../presets/default.toml")),
            "composite-heavy" => Some(include_str!("../presets/composite-heavy.toml")),
            "source-sanity" => Some(include_str!("../presets/source-sanity.toml")),
            _ => None,
        }
    }
}

pub fn load_preset(name: &str) -> Result<RunConfig, ConfigError> {
    let text = Preset::text(name).ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
    let cfg: RunConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let cfg: RunConfig = toml::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, what: &str| -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Range(what.to_string()))
            }
        };
        check(
            self.grid.h >= 2 && self.grid.w >= 2 && self.grid.channels >= 1,
            "grid.h/w/channels must be at least 2/2/1",
        )?;
        check(self.grid.cell_size > 0.0, "grid.cell_size must be positive")?;
        check(self.adapt.rho > 0.0, "adapt.rho must be positive")?;
        check(
            self.adapt.rho_input.map_or(true, |r| r > 0.0),
            "adapt.rho_input must be positive",
        )?;
        check(
            self.adapt.alpha > 0.0 && self.adapt.alpha < 0.5,
            "adapt.alpha must lie in (0, 0.5)",
        )?;
        check(
            self.adapt.gamma > 0.0 && self.adapt.gamma <= 1.0,
            "adapt.gamma must lie in (0, 1]",
        )?;
        check(self.adapt.eta > 0.0, "adapt.eta must be positive")?;
        check(
            self.adapt.lambda_reg >= 0.0,
            "adapt.lambda_reg must be non-negative",
        )?;
        check(
            self.decode.score_thresh > 0.0 && self.decode.score_thresh < 1.0,
            "decode.score_thresh must lie in (0, 1)",
        )?;
        check(
            self.decode.nms_thresh > 0.0 && self.decode.nms_thresh < 1.0,
            "decode.nms_thresh must lie in (0, 1)",
        )?;
        check(
            self.matcher.w_iou >= 0.0
                && self.matcher.w_l1 >= 0.0
                && self.matcher.w_iou + self.matcher.w_l1 > 0.0,
            "matcher weights must be non-negative and not both zero",
        )?;
        check(
            self.eval.iou_thresh > 0.0 && self.eval.iou_thresh < 1.0,
            "eval.iou_thresh must lie in (0, 1)",
        )?;
        check(
            self.stream.n_batches >= 1 && self.stream.batch_size >= 1,
            "stream.n_batches and stream.batch_size must be at least 1",
        )?;
        check(
            self.pretrain.scenes >= 1 && self.pretrain.batch_size >= 1,
            "pretrain.scenes and pretrain.batch_size must be at least 1",
        )?;
        check(self.pretrain.hidden >= 1, "pretrain.hidden must be at least 1")?;
        check(
            self.shift.scale_factor > 0.0,
            "shift.scale_factor must be positive",
        )?;
        check(
            self.shift.noise_sigma >= 0.0,
            "shift.noise_sigma must be non-negative",
        )?;
        check(
            (0.0..1.0).contains(&self.shift.dropout_prob),
            "shift.dropout_prob must lie in [0, 1)",
        )?;
        self.generator
            .validate(&self.grid)
            .map_err(|e| ConfigError::Range(e.to_string()))?;
        Ok(())
    }

    /// Assembles the loop configuration from the adapt/decode/matcher
    /// sections.
    pub fn adapt_config(&self, no_adapt: bool) -> AdaptConfig {
        AdaptConfig {
            rho: self.adapt.rho,
            rho_input: self.adapt.rho_input,
            alpha: self.adapt.alpha,
            gamma: self.adapt.gamma,
            eta: self.adapt.eta,
            c_stop: self.adapt.c_stop,
            lambda_reg: self.adapt.lambda_reg,
            score_thresh: self.decode.score_thresh,
            nms_thresh: self.decode.nms_thresh,
            w_iou: self.matcher.w_iou,
            w_l1: self.matcher.w_l1,
            perturb_weights: self.adapt.perturb_weights,
            perturb_inputs: self.adapt.perturb_inputs,
            use_matcher: self.adapt.use_matcher,
            include_sentinel_costs: self.adapt.include_sentinel_costs,
            no_adapt,
        }
    }

    /// Pretraining configuration for a given master seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain.epochs,
            learning_rate: self.pretrain.learning_rate,
            batch_size: self.pretrain.batch_size,
            hidden: self.pretrain.hidden,
            lambda_reg: self.adapt.lambda_reg,
            seed,
        }
    }
}
