//! Experiment harness: profiles and configuration, the training loop,
//! evaluation, the ablation runner, and the gradient-check battery.

pub mod ablate;
pub mod config;
pub mod gradsuite;
pub mod train;

pub use ablate::{run_ablation, AblationReport, VariantResult, REPORT_ORDER};
pub use config::{ExperimentConfig, Profile};
pub use gradsuite::{gradcheck_suite, SuiteCheck, COMPOSITE_TOLERANCE, PRIMITIVE_TOLERANCE};
pub use train::{build_cache, evaluate, train, Adam, CachedClip, TrainResult};
