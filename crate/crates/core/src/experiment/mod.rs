//! Config-driven experiment runs behind the command-line driver: embedding
//! caches, training with periodic checkpoints, sampling, evaluation, the
//! conditioning-dimension sweep and plots.

pub mod commands;
pub mod config;
pub mod data;
pub mod plot;
pub mod store;

pub use commands::{
    cmd_cache_embeddings, cmd_eval, cmd_sample, cmd_sweep_dim, cmd_train, compare_methods, CacheOutcome, EvalOptions, SampleOptions,
    SampleOutcome, Session, SweepRow, TrainOptions, TrainOutcome, TrainTarget,
};
pub use config::{DatasetKind, EmbedderKind, ExperimentConfig, SweepArm};
pub use plot::cmd_plot;
pub use store::{RunPaths, Which};
