use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::RgbLossKind;
use crate::optim::AdamConfig;
use crate::rasterizer::{MaskMode, RenderOptions};
use crate::schedule::ScheduleConfig;

/// Which regularizer drives the mask logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMaskMode {
    #[default]
    Proposed,
    Inverse,
    Cumulative,
    /// Mean-mask penalty over all Gaussians.
    Global,
    /// Masks held on; plain splat fitting.
    None,
}

impl TrainMaskMode {
    pub const ALL: [TrainMaskMode; 5] = [
        TrainMaskMode::Proposed,
        TrainMaskMode::Inverse,
        TrainMaskMode::Cumulative,
        TrainMaskMode::Global,
        TrainMaskMode::None,
    ];

    /// The spatial aggregation rendered alongside RGB, if any.
    pub fn spatial(self) -> Option<MaskMode> {
        match self {
            TrainMaskMode::Proposed => Some(MaskMode::Proposed),
            TrainMaskMode::Inverse => Some(MaskMode::Inverse),
            TrainMaskMode::Cumulative => Some(MaskMode::Cumulative),
            TrainMaskMode::Global | TrainMaskMode::None => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMaskMode::Proposed => "proposed",
            TrainMaskMode::Inverse => "inverse",
            TrainMaskMode::Cumulative => "cumulative",
            TrainMaskMode::Global => "global",
            TrainMaskMode::None => "none",
        }
    }
}

impl std::str::FromStr for TrainMaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMaskMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision `{s}`"))),
        }
    }
}

/// Per-group step sizes. Position rates are multiplied by the scene extent
/// and decay exponentially from `position` to `position_final` over the
/// main phase.
///
/// The defaults suit the 3000-iteration desk schedule: position and mask
/// rates are ten times the usual long-schedule values. See
/// [`LearningRates::long_schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub position_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    /// Degree-1 colour coefficients use `color / color_rest_divisor`.
    pub color_rest_divisor: f64,
    pub mask_logit: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-3,
            position_final: 1.6e-5,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            color_rest_divisor: 20.0,
            mask_logit: 1e-1,
        }
    }
}

impl LearningRates {
    /// Rates for the 30k-iteration schedule.
    pub fn long_schedule() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_final: 1.6e-6,
            mask_logit: 1e-2,
            ..Default::default()
        }
    }
}

/// Synthetic benchmark dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_teacher: usize,
    pub n_cams: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_teacher: 200,
            n_cams: 12,
            width: 64,
            height: 64,
        }
    }
}

/// How the student scene is seeded from the teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Keep every `subsample`-th teacher Gaussian.
    pub subsample: usize,
    pub position_noise: f64,
    pub color_noise: f64,
    pub opacity: f64,
    /// Added to every log-scale.
    pub log_scale_offset: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            subsample: 4,
            position_noise: 0.05,
            color_noise: 0.1,
            opacity: 0.5,
            log_scale_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_f: f64,
    pub lambda_m: f64,
    pub mask_mode: TrainMaskMode,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub precision: Precision,
    pub scene: SceneConfig,
    pub init: InitConfig,
    pub render: RenderOptions,
    pub temperature: f64,
    pub mask_logit_init: f64,
    pub rgb_loss: RgbLossKind,
    /// Let the spatial-mask loss also reach opacity and shape through α.
    pub mask_through_alpha: bool,
    pub eval_interval: usize,
    /// Serial rendering and reductions.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_f: 1e-4,
            lambda_m: 0.0,
            mask_mode: TrainMaskMode::Proposed,
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            schedule: ScheduleConfig::desk(),
            seed: 0,
            precision: Precision::F32,
            scene: SceneConfig::default(),
            init: InitConfig::default(),
            render: RenderOptions::default(),
            temperature: 0.5,
            mask_logit_init: 3.0,
            rgb_loss: RgbLossKind::PlainSum,
            mask_through_alpha: false,
            eval_interval: 100,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    /// Paper-length schedule (30k iterations plus 5k recovery).
    pub fn paper_scale() -> Self {
        TrainConfig {
            schedule: ScheduleConfig::default(),
            lr: LearningRates::long_schedule(),
            eval_interval: 1000,
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Switches the regularizer and moves the inactive weight to zero.
    pub fn with_mode(mut self, mode: TrainMaskMode, lambda: f64) -> Self {
        self.mask_mode = mode;
        match mode {
            TrainMaskMode::Global => {
                self.lambda_f = 0.0;
                self.lambda_m = lambda;
            }
            TrainMaskMode::None => {
                self.lambda_f = 0.0;
                self.lambda_m = 0.0;
            }
            _ => {
                self.lambda_f = lambda;
                self.lambda_m = 0.0;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_f >= 0.0 && self.lambda_m >= 0.0) {
            return Err(Error::Config("lambda values must be non-negative".into()));
        }
        match self.mask_mode {
            TrainMaskMode::Global if self.lambda_f != 0.0 => {
                return Err(Error::Config("global mode uses lambda_m; lambda_f must be 0".into()))
            }
            TrainMaskMode::None if self.lambda_f != 0.0 || self.lambda_m != 0.0 => {
                return Err(Error::Config("mask mode `none` takes no regularizer weight".into()))
            }
            m if m.spatial().is_some() && self.lambda_m != 0.0 => {
                return Err(Error::Config("spatial modes use lambda_f; lambda_m must be 0".into()))
            }
            _ => {}
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        if self.scene.n_teacher == 0 || self.scene.n_cams < 2 || self.scene.width == 0 || self.scene.height == 0 {
            return Err(Error::Config("scene needs >= 1 teacher, >= 2 cameras and non-empty images".into()));
        }
        if self.init.subsample == 0 {
            return Err(Error::Config("init.subsample must be >= 1".into()));
        }
        if self.render.tile_size == 0 {
            return Err(Error::Config("render.tile_size must be >= 1".into()));
        }
        self.schedule.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::paper_scale().validate().unwrap();
    }

    #[test]
    fn one_regularizer_at_a_time() {
        let mut cfg = TrainConfig::default();
        cfg.lambda_m = 1e-3;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig::default().with_mode(TrainMaskMode::Global, 1e-3);
        cfg.validate().unwrap();
        assert_eq!(cfg.lambda_f, 0.0);
        let mut cfg = TrainConfig::default().with_mode(TrainMaskMode::None, 0.0);
        cfg.validate().unwrap();
        cfg.lambda_m = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = TrainConfig::default().with_mode(TrainMaskMode::Cumulative, 2e-4);
        let back = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_toml("mask_mode = \"inverse\"\nseed = 7\n[schedule]\ntotal_iters = 2000\n").unwrap();
        assert_eq!(partial.mask_mode, TrainMaskMode::Inverse);
        assert_eq!(partial.schedule.total_iters, 2000);
        assert_eq!(partial.schedule.densify_start, ScheduleConfig::desk().densify_start);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }
}
