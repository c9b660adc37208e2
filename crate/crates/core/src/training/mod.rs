//! Datasets, losses and the four training procedures.
//!
//! Phase 1 fits the static encoder and decoder on autonomous data. The
//! input-conditioned trainers then start from that bundle: the injection
//! and hypernetwork trainers keep the base maps frozen, the curriculum
//! fine-tunes them.

mod config;
mod dataset;
mod objective;
mod stages;
mod trainer;

pub use config::{HyperConfig, InjectionConfig, TrainConfig};
pub use dataset::{
    build_autonomous_dataset, build_forced_dataset, burn_steps, forced_kind, sample_box, AutonomousDataset,
    AutonomousSample, DatasetSample, ForcedBatch, ForcedDataset,
};
pub use objective::{
    decoder_objective, encoder_objective, hyper_objective, injection_objective, leaves, weight, Evaluation,
    Objective,
};
pub use stages::{
    curriculum_epochs, curriculum_stage, encoder_rates, stage, train_curriculum, train_dyn, train_obs,
    train_phase1,
};
pub use trainer::{strided_subset, EpochMetrics, MetricsSink, StageSummary, TrainSummary};
