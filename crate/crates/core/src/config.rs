//! Experiment configuration files.
//!
//! A configuration is a TOML document. Every table rejects unknown keys and
//! every key except `model` has a default, so the smallest valid file is a
//! single line such as `model = "nv_dc"`. Frequencies are in MHz and times
//! in μs throughout.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    dc_prefactor, hyperfine_prefactor, AffineAgent, Agent, AgentError, AgentKind, BsNetworkAgent, Coherence,
    ControlTable, Mlp, Regime, TreeAgent, DEFAULT_HIDDEN,
};
use crate::bounds::printed::{ALPHA_M, ALPHA_T};
use crate::rng::{purpose, stream};
use crate::sensor_models_nv::{NvModel, NvParam, NvParams, NvSensor};
use crate::training_engine::{
    BsClassifierTask, Budget, DolinarTask, EtaForm, FilterSettings, Heuristic, LossMode, MultiphaseTask, NvTask,
    QmlTask, Task, TaskError, TrainSettings,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.into() }
}

/// Sensing task selected by the `model` key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    NvDc,
    NvAc,
    NvDec,
    NvHyperfine,
    Dolinar,
    Qml3,
    Multiphase,
    BsClassifier,
}

impl ModelKind {
    pub fn nv_model(self) -> Option<NvModel> {
        match self {
            ModelKind::NvDc => Some(NvModel::Dc),
            ModelKind::NvAc => Some(NvModel::Ac),
            ModelKind::NvDec => Some(NvModel::Decoherence),
            ModelKind::NvHyperfine => Some(NvModel::Hyperfine),
            _ => None,
        }
    }
}

/// Values of the model parameters that are not estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Known `1/T2` in MHz; 0 means no dephasing.
    pub inv_t2: f64,
    pub omega_drive: f64,
    pub dephasing_exponent: u8,
    pub hyperfine_phase: bool,
    pub beta: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams { inv_t2: 0.0, omega_drive: 0.2, dephasing_exponent: 1, hyperfine_phase: true, beta: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// An agent kind (`mlp`, `static_mlp`, `table`, `tree`, `affine`,
    /// `bs_network`) or a heuristic name (`pgh`, `sigma_inverse`, ...).
    pub kind: String,
    pub hidden: Vec<usize>,
    /// Prefactor `h` of the NV control map; derived from the budget when absent.
    pub prefactor: Option<f64>,
    /// Feature read by the affine agent and its initial `[a, b]`.
    pub feature: usize,
    pub affine_init: [f64; 2],
    /// Spread of the random initial values of photonic tables and networks.
    pub init_scale: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            kind: "mlp".into(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            prefactor: None,
            feature: 1,
            affine_init: [0.0, 0.0],
            init_scale: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    Measurements,
    Time,
    Photons,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    pub kind: BudgetKind,
    pub amount: f64,
    /// Step cap of time and photon budgets.
    pub max_steps: Option<usize>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig { kind: BudgetKind::Measurements, amount: 20.0, max_steps: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Diagonal of `G` keyed by parameter name. Missing entries default to 1
    /// for the parameters of interest and 0 for nuisance parameters.
    pub weights: BTreeMap<String, f64>,
    /// Normalize cumulative NV losses by `η` of this form.
    pub eta: Option<EtaForm>,
    pub dolinar_variant: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { mode: LossMode::Log, weights: BTreeMap::new(), eta: None, dolinar_variant: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhotonicConfig {
    /// Amplitude of the classifier tasks (prior half-width for `qml3`).
    pub alpha: f64,
    /// Prior interval of the Dolinar signal amplitude.
    pub alpha_range: [f64; 2],
    /// Reference copies (Dolinar, `qml3`) or repeated shots (`multiphase`).
    pub copies: usize,
    /// Real input amplitudes of the four interferometer arms.
    pub input: [f64; 4],
    /// Number of classes of the network classifier.
    pub d: usize,
    pub layers: usize,
}

impl Default for PhotonicConfig {
    fn default() -> Self {
        PhotonicConfig { alpha: 1.0, alpha_range: [0.0, 1.5], copies: 3, input: [1.0, 1.0, 0.0, 0.0], d: 3, layers: 2 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeuristicConfig {
    /// Use the coefficient exactly as printed in the inverse-time rule.
    pub inverse_time_literal: bool,
    /// Coefficient of the inverse-time rule; regime-dependent when absent.
    pub alpha: Option<f64>,
}

/// A full experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    #[serde(default)]
    pub seed: u64,
    /// Uniform priors `name = [lo, hi]`; model defaults apply when empty.
    #[serde(default)]
    pub prior: BTreeMap<String, [f64; 2]>,
    #[serde(default)]
    pub params: ModelParams,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub training: TrainSettings,
    #[serde(default)]
    pub filter: FilterSettings,
    #[serde(default)]
    pub photonic: PhotonicConfig,
    #[serde(default)]
    pub heuristics: HeuristicConfig,
}

/// What the `agent.kind` key selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicySpec {
    Agent(AgentKind),
    Heuristic(Heuristic),
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Agent(k) => k.fmt(f),
            PolicySpec::Heuristic(h) => h.fmt(f),
        }
    }
}

impl std::str::FromStr for PolicySpec {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        if let Ok(k) = s.parse::<AgentKind>() {
            return Ok(PolicySpec::Agent(k));
        }
        s.parse::<Heuristic>()
            .map(PolicySpec::Heuristic)
            .map_err(|_| invalid("agent.kind", format!("'{s}' is neither an agent kind nor a heuristic")))
    }
}

fn default_priors(model: NvModel) -> Vec<(NvParam, f64, f64)> {
    match model {
        NvModel::Dc => vec![(NvParam::Omega, 0.0, 1.0)],
        NvModel::Ac => vec![(NvParam::BigOmega, 0.0, 1.0)],
        NvModel::Decoherence => vec![(NvParam::InvT2, 0.01, 0.1), (NvParam::Beta, 1.5, 4.0)],
        NvModel::Hyperfine => vec![(NvParam::Omega0, 0.0, 1.0), (NvParam::Omega1, 0.0, 1.0)],
    }
}

/// Parameters entering the error with weight 1 unless configured otherwise.
fn is_primary(model: NvModel, p: NvParam) -> bool {
    match model {
        NvModel::Dc => p == NvParam::Omega,
        NvModel::Ac => p == NvParam::BigOmega,
        NvModel::Decoherence => p == NvParam::InvT2,
        NvModel::Hyperfine => matches!(p, NvParam::Omega0 | NvParam::Omega1),
    }
}

impl ExperimentConfig {
    /// A configuration with every optional key at its default.
    pub fn new(model: ModelKind) -> Self {
        ExperimentConfig {
            model,
            seed: 0,
            prior: BTreeMap::new(),
            params: ModelParams::default(),
            agent: AgentConfig::default(),
            budget: BudgetConfig::default(),
            loss: LossConfig::default(),
            training: TrainSettings::default(),
            filter: FilterSettings::default(),
            photonic: PhotonicConfig::default(),
            heuristics: HeuristicConfig::default(),
        }
    }

    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    /// The effective configuration with every default written out.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("configuration values are always representable in TOML")
    }

    /// SHA-256 of the parts of the snapshot that define the task and agent.
    ///
    /// The seed and the `[training]` table are excluded, so a checkpoint
    /// stays usable when only those change.
    pub fn model_hash(&self) -> String {
        let mut core = self.clone();
        core.seed = 0;
        core.training = TrainSettings::default();
        hex::encode(Sha256::digest(core.snapshot().as_bytes()))
    }

    pub fn policy(&self) -> Result<PolicySpec, ConfigError> {
        self.agent.kind.parse()
    }

    /// Checks the keys whose validity does not depend on building the task.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.policy()?;
        if self.agent.hidden.contains(&0) {
            return Err(invalid("agent.hidden", "layer widths must be positive"));
        }
        if let Some(h) = self.agent.prefactor {
            if !(h > 0.0 && h.is_finite()) {
                return Err(invalid("agent.prefactor", "must be positive"));
            }
        }
        if !(self.budget.amount >= 0.0 && self.budget.amount.is_finite()) {
            return Err(invalid("budget.amount", "must be a finite nonnegative number"));
        }
        if self.budget.kind == BudgetKind::Measurements && self.budget.amount.fract() != 0.0 {
            return Err(invalid("budget.amount", "a measurement budget must be a whole number"));
        }
        if self.training.batch_size == 0 {
            return Err(invalid("training.batch_size", "must be at least 1"));
        }
        if !(self.training.lr > 0.0) || !(self.training.t0 > 0.0) {
            return Err(invalid("training.lr", "learning rate and t0 must be positive"));
        }
        if self.training.max_grad_norm.is_some_and(|cap| !(cap > 0.0)) {
            return Err(invalid("training.max_grad_norm", "must be positive"));
        }
        if self.filter.particles == 0 {
            return Err(invalid("filter.particles", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.filter.ess_threshold) {
            return Err(invalid("filter.ess_threshold", "must lie in [0, 1]"));
        }
        if !matches!(self.params.dephasing_exponent, 1 | 2) {
            return Err(invalid("params.dephasing_exponent", "must be 1 or 2"));
        }
        if !(self.params.inv_t2 >= 0.0) {
            return Err(invalid("params.inv_t2", "must be nonnegative"));
        }
        if !(self.params.beta > 0.0) {
            return Err(invalid("params.beta", "must be positive"));
        }
        if self.loss.eta.is_some() && self.loss.mode != LossMode::Cumulative {
            return Err(invalid("loss.eta", "η normalization applies to the cumulative loss only"));
        }
        for (name, [lo, hi]) in &self.prior {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(invalid(&format!("prior.{name}"), "expected [lo, hi] with lo < hi"));
            }
        }
        if let Some(model) = self.model.nv_model() {
            self.nv_priors(model)?;
            self.nv_weights(model)?;
            self.nv_budget()?;
        } else if !self.prior.is_empty() {
            return Err(invalid("prior", "photonic priors are set in the [photonic] table"));
        }
        Ok(())
    }

    fn nv_priors(&self, model: NvModel) -> Result<Vec<(NvParam, f64, f64)>, ConfigError> {
        if self.prior.is_empty() {
            return Ok(default_priors(model));
        }
        for name in self.prior.keys() {
            match NvParam::from_name(name) {
                Some(p) if model.parameters().contains(&p) => {}
                _ => return Err(invalid(&format!("prior.{name}"), "not a parameter of this model")),
            }
        }
        let priors: Vec<_> = model
            .parameters()
            .iter()
            .filter_map(|p| self.prior.get(p.name()).map(|[lo, hi]| (*p, *lo, *hi)))
            .collect();
        if !priors.iter().any(|(p, _, _)| is_primary(model, *p)) {
            return Err(invalid("prior", "at least one parameter of interest must be estimated"));
        }
        Ok(priors)
    }

    fn nv_weights(&self, model: NvModel) -> Result<Vec<f64>, ConfigError> {
        let priors = self.nv_priors(model)?;
        for (name, w) in &self.loss.weights {
            if !priors.iter().any(|(p, _, _)| p.name() == name) {
                return Err(invalid(&format!("loss.weights.{name}"), "not an estimated parameter"));
            }
            if !(*w >= 0.0) {
                return Err(invalid(&format!("loss.weights.{name}"), "must be nonnegative"));
            }
        }
        Ok(priors
            .iter()
            .map(|(p, _, _)| {
                self.loss.weights.get(p.name()).copied().unwrap_or(if is_primary(model, *p) { 1.0 } else { 0.0 })
            })
            .collect())
    }

    fn nv_budget(&self) -> Result<Budget, ConfigError> {
        let b = &self.budget;
        match b.kind {
            BudgetKind::Measurements => Ok(Budget::Measurements(b.amount as usize)),
            BudgetKind::Time => {
                let max_steps =
                    b.max_steps.ok_or_else(|| invalid("budget.max_steps", "required for a time budget"))?;
                Ok(Budget::TotalTime { max: b.amount, max_steps })
            }
            BudgetKind::Photons => Err(invalid("budget.kind", "NV tasks consume time or measurements")),
        }
    }

    fn regime(&self) -> Regime {
        match self.budget.kind {
            BudgetKind::Time => Regime::Time,
            _ => Regime::Measurement,
        }
    }

    /// The prefactor `h` in μs used by the NV control map.
    pub fn prefactor(&self) -> Result<f64, ConfigError> {
        if let Some(h) = self.agent.prefactor {
            return Ok(h);
        }
        let Some(model) = self.model.nv_model() else {
            return Ok(1.0);
        };
        let priors = self.nv_priors(model)?;
        let inv_t2_prior = priors.iter().find(|(p, _, _)| *p == NvParam::InvT2);
        Ok(match model {
            NvModel::Dc => {
                let coherence = match inv_t2_prior {
                    Some(&(_, a, b)) => Coherence::Interval(a, b),
                    None if self.params.inv_t2 > 0.0 => Coherence::Known(1.0 / self.params.inv_t2),
                    None => Coherence::Infinite,
                };
                dc_prefactor(self.regime(), self.budget.amount, coherence)
            }
            NvModel::Hyperfine => {
                let inv = inv_t2_prior.map_or(self.params.inv_t2, |&(_, a, _)| a);
                hyperfine_prefactor(if inv > 0.0 { 1.0 / inv } else { f64::INFINITY })
            }
            NvModel::Ac => 1.0,
            NvModel::Decoherence => 100.0,
        })
    }

    pub fn build_task(&self) -> Result<Task, ConfigError> {
        self.validate()?;
        let ph = &self.photonic;
        Ok(match self.model {
            ModelKind::Dolinar => Task::Dolinar(DolinarTask::new(
                (ph.alpha_range[0], ph.alpha_range[1]),
                ph.copies,
                self.loss.dolinar_variant,
                self.filter,
            )?),
            ModelKind::Qml3 => Task::Qml(QmlTask::new(ph.alpha, ph.copies, self.filter)?),
            ModelKind::Multiphase => {
                let input = ph.input.map(|a| Complex64::new(a, 0.0));
                Task::Multiphase(MultiphaseTask::new(input, ph.copies)?)
            }
            ModelKind::BsClassifier => Task::BsClassifier(BsClassifierTask::new(ph.d, ph.alpha, ph.layers)?),
            nv => {
                let model = nv.nv_model().expect("remaining models are NV models");
                let sensor = NvSensor { model, hyperfine_phase: self.params.hyperfine_phase };
                let fixed = NvParams {
                    omega_drive: self.params.omega_drive,
                    inv_t2: self.params.inv_t2,
                    beta: self.params.beta,
                    dephasing_exponent: self.params.dephasing_exponent,
                    ..NvParams::default()
                };
                let mut task = NvTask::new(
                    sensor,
                    &self.nv_priors(model)?,
                    fixed,
                    self.nv_weights(model)?,
                    self.nv_budget()?,
                    self.prefactor()?,
                    self.filter,
                )?;
                task.eta = self.loss.eta;
                task.inverse_time_literal = self.heuristics.inverse_time_literal;
                task.inverse_time_alpha = self.heuristics.alpha.unwrap_or(match self.regime() {
                    Regime::Measurement => ALPHA_M,
                    Regime::Time => ALPHA_T,
                });
                Task::Nv(task)
            }
        })
    }

    /// A freshly initialized agent of the configured kind, sized for `task`.
    ///
    /// Initial values are drawn from a stream of the master seed reserved
    /// for initialization.
    pub fn build_agent(&self, task: &Task) -> Result<Box<dyn Agent>, ConfigError> {
        let PolicySpec::Agent(kind) = self.policy()? else {
            return Err(invalid("agent.kind", "a heuristic has no trainable parameters"));
        };
        let mut rng = stream(self.seed, &[purpose::INIT]);
        let outs = task.n_controls();
        let photonic = !matches!(task, Task::Nv(_));
        let scale = self.agent.init_scale;
        let agent: Box<dyn Agent> = match kind {
            AgentKind::Mlp => Box::new(Mlp::new(task.n_features(), &self.agent.hidden, outs, false, &mut rng)),
            AgentKind::StaticMlp => Box::new(Mlp::new(2, &self.agent.hidden, outs, true, &mut rng)),
            AgentKind::Table => {
                let n = task.horizon() * outs;
                let values =
                    if photonic { (0..n).map(|_| rng.random_range(-scale..=scale)).collect() } else { vec![0.0; n] };
                Box::new(ControlTable::from_values(task.horizon(), outs, values))
            }
            AgentKind::Tree => {
                let mut tree = TreeAgent::zeros(task.horizon().saturating_sub(1), outs);
                for p in tree.params_mut() {
                    *p = rng.random_range(-scale..=scale);
                }
                Box::new(tree)
            }
            AgentKind::Affine => {
                let n_in = task.n_features();
                if self.agent.feature >= n_in {
                    return Err(invalid("agent.feature", format!("the task has {n_in} features")));
                }
                Box::new(AffineAgent::new(n_in, self.agent.feature, self.agent.affine_init))
            }
            AgentKind::BsNetwork => {
                let Task::BsClassifier(bs) = task else {
                    return Err(invalid("agent.kind", "bs_network agents drive the bs_classifier task only"));
                };
                Box::new(BsNetworkAgent::random(bs.modes(), bs.layers, scale, &mut rng))
            }
        };
        task.check_policy(crate::training_engine::Policy::Agent(&*agent))?;
        Ok(agent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = ExperimentConfig::from_toml("model = \"nv_dc\"").unwrap();
        assert_eq!(cfg, ExperimentConfig::new(ModelKind::NvDc));
        assert_eq!(cfg.prefactor().unwrap(), 2f64.powf(20f64.sqrt()).ceil());
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = ExperimentConfig::from_toml("model = \"nv_dc\"\n[training]\nbatch = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("batch") && msg.contains("line 3"), "{msg}");
        assert!(ExperimentConfig::from_toml("model = \"nv_dc\"\ncolour = 1").is_err());
        assert!(ExperimentConfig::from_toml("model = \"nv_quantum\"").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let text = r#"
            model = "nv_dc"
            seed = 11
            [prior]
            omega = [0.0, 1.0]
            inv_t2 = [0.09, 0.11]
            [agent]
            kind = "sigma_inverse_t2"
            [budget]
            kind = "time"
            amount = 640.0
            max_steps = 300
            [loss]
            mode = "cumulative"
            eta = "variance"
            weights = { inv_t2 = 0.5 }
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.snapshot()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.model_hash(), again.model_hash());
        assert_eq!(cfg.prefactor().unwrap(), 32.0);
        let Task::Nv(t) = cfg.build_task().unwrap() else { panic!() };
        assert_eq!(t.weights, vec![1.0, 0.5]);
        assert_eq!(t.inverse_time_alpha, ALPHA_T);
    }

    #[test]
    fn hash_ignores_seed_and_training_only() {
        let a = ExperimentConfig::new(ModelKind::NvDc);
        let mut b = a.clone();
        b.seed = 9;
        b.training.steps = 3;
        assert_eq!(a.model_hash(), b.model_hash());
        b.filter.particles = 100;
        assert_ne!(a.model_hash(), b.model_hash());
    }

    #[test]
    fn validation_names_the_key() {
        let bad = [
            ("model = \"nv_dc\"\n[prior]\nbeta = [1.0, 2.0]", "prior.beta"),
            ("model = \"nv_dc\"\n[prior]\nomega = [1.0, 0.0]", "prior.omega"),
            ("model = \"nv_dc\"\n[budget]\nkind = \"time\"\namount = 10.0", "budget.max_steps"),
            ("model = \"nv_dc\"\n[agent]\nkind = \"oracle\"", "agent.kind"),
            ("model = \"nv_dc\"\n[loss]\neta = \"linear\"", "loss.eta"),
            ("model = \"nv_dc\"\n[training]\nmax_grad_norm = 0.0", "training.max_grad_norm"),
        ];
        for (text, key) in bad {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(matches!(&err, ConfigError::Invalid { key: k, .. } if k == key), "{text}: {err}");
        }
    }

    #[test]
    fn every_model_builds_its_default_agent() {
        for (model, kind) in [
            (ModelKind::NvDc, "mlp"),
            (ModelKind::NvAc, "static_mlp"),
            (ModelKind::NvDec, "table"),
            (ModelKind::NvHyperfine, "mlp"),
            (ModelKind::Dolinar, "mlp"),
            (ModelKind::Qml3, "tree"),
            (ModelKind::Multiphase, "table"),
            (ModelKind::BsClassifier, "bs_network"),
        ] {
            let mut cfg = ExperimentConfig::new(model);
            cfg.agent.kind = kind.into();
            cfg.agent.hidden = vec![4];
            cfg.filter.particles = 64;
            let task = cfg.build_task().unwrap();
            let agent = cfg.build_agent(&task).unwrap();
            assert_eq!(agent.kind().name(), kind);
        }
    }

    #[test]
    fn prefactor_rules() {
        let mut cfg = ExperimentConfig::new(ModelKind::NvHyperfine);
        cfg.params.inv_t2 = 0.1;
        assert_eq!(cfg.prefactor().unwrap(), 5.0);
        cfg.params.inv_t2 = 0.0;
        assert_eq!(cfg.prefactor().unwrap(), 40.0);
        let mut dc = ExperimentConfig::new(ModelKind::NvDc);
        dc.params.inv_t2 = 0.01;
        assert_eq!(dc.prefactor().unwrap(), 100.0);
    }

    #[test]
    fn init_depends_on_seed_only() {
        let mut cfg = ExperimentConfig::new(ModelKind::NvDc);
        cfg.agent.hidden = vec![3];
        let task = cfg.build_task().unwrap();
        let a = cfg.build_agent(&task).unwrap();
        let b = cfg.build_agent(&task).unwrap();
        assert_eq!(a.params(), b.params());
        cfg.seed = 1;
        assert_ne!(a.params(), cfg.build_agent(&task).unwrap().params());
    }
}
