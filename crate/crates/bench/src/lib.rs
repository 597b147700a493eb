//! Shared fixtures for the benchmarks under `benches/`.

use std::sync::Arc;

use qmetro_core::particle_filter::{Dim, ParameterSpace, ParticleEnsemble};
use qmetro_core::rng::stream;
use qmetro_core::{ExperimentConfig, ModelKind};
use qmetro_core::{Agent, Task};

/// Measurement-limited DC magnetometry with the default MLP agent.
pub fn dc_setup(measurements: f64, particles: usize) -> (Task, Box<dyn Agent>) {
    let mut cfg = ExperimentConfig::new(ModelKind::NvDc);
    cfg.budget.amount = measurements;
    cfg.filter.particles = particles;
    let task = cfg.build_task().expect("default DC configuration is valid");
    let agent = cfg.build_agent(&task).expect("default agent builds");
    (task, agent)
}

/// Uniform ensemble on the unit interval.
pub fn unit_ensemble(particles: usize) -> ParticleEnsemble {
    let space = Arc::new(ParameterSpace::new(vec![Dim::continuous("omega", 0.0, 1.0)], None).expect("valid space"));
    ParticleEnsemble::init_from_prior(space, particles, &mut stream(0, &[])).expect("enough particles")
}
