//! Synthetic benchmark, trainer and experiment runners.

mod config;
mod experiments;
mod synthetic;
mod train;
mod verify;

pub use config::{InitConfig, LearningRates, Precision, SceneConfig, TrainConfig, TrainMaskMode};
pub use experiments::{ablate_forwards, spatial_mask_image, sweep, AblationResult, AblationRow, SweepResult, SweepRow};
pub use synthetic::{coverage, generate_scene, init_scene, render_targets, ring_cameras, SyntheticScene};
pub use train::{evaluate, train, EvalReport, MetricsRecord, TrainResult};
pub use verify::{verify_gradients, VerifyConfig, VerifyReport, VerifyRow};
