//! Alignment experiments: optimizer, trial runner, gradient fields and
//! synthetic test images.

pub mod alignment;
pub mod experiment;
pub mod gradfield;
pub mod optimizer;
pub mod texture;

pub use alignment::{
    default_thresholds, make_alignment_pair, optimize_alignment, recall_curve, sample_perturbation, AlignmentReport,
    StopReason, TrajectoryPoint,
};
pub use experiment::{run_experiment, ExperimentResult, ExperimentSpec, ImageSource, SamplerEntry};
pub use gradfield::{gradient_field, GradFieldRow};
pub use optimizer::{Method, Optimizer, OptimizerConfig};
pub use texture::gen_texture;
