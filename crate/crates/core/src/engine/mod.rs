//! Reverse-mode differentiation, fork merging, optimization and gradient probes.

pub mod checkpoint;
pub mod merge;
pub mod network;
pub mod optim;
pub mod params;
pub mod probe;
pub mod study;
pub mod tape;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};
pub use merge::{
    backward_with_merge, pcgrad_merge, pcgrad_project, sample_kappa, BackwardResult, ForkStats, MergeStrategy, TaskGrad,
};
pub use network::{ActivationKind, Forward, HeadInit, LayerSpec, Network, NetworkConfig};
pub use optim::{ema_update, Sgd, SgdConfig};
pub use params::{Gradients, ParamBlock, ParamStore};
pub use probe::{fit_loglog_slope, grad_norm_probe, Partition};
pub use study::{GradReport, GradRow, StudyConfig, StudySetup};
pub use trainer::{example_gradients, EpochReport, Example, LossConfig, StepReport, TrainConfig, Trainer};
