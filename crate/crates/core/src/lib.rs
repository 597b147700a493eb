//! Simulation, policy optimization and reference bounds for sequential
//! Bayesian quantum-metrology experiments.

pub mod agents;
pub mod autodiff;
pub mod bounds;
pub mod complex;
pub mod particle_filter;
pub mod rng;
pub mod sensor_models_nv;
pub mod sensor_models_photonic;
pub mod training_engine;
pub mod checkpoint;
pub mod config;

pub use agents::{build_agent, Agent, AgentKind};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CheckpointMeta};
pub use config::{ConfigError, ExperimentConfig, ModelKind, PolicySpec};
pub use particle_filter::{ParameterSpace, ParticleEnsemble};
pub use training_engine::{
    evaluate, train, Budget, EvalRow, FilterSettings, Heuristic, LossMode, MetricsRow, Policy, Task, TrainSettings,
};
