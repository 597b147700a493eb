//! Subcommand implementations and run-directory layout.
//!
//! A training run directory holds `config.toml` (the effective
//! configuration), `metrics.csv`, `eval.csv`, `diagnostics.log` and a
//! `checkpoints/` folder whose sidecars carry the configuration hash.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::info;
use thiserror::Error;

use qmetro_core::bounds::{
    analytic_ramp, crb_curve, helstrom, maximize_fi_objectives, write_bound_csv, BoundCase, BoundCurve, BoundError,
    BoundSettings, BoundTask, Regime,
};
use qmetro_core::checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
use qmetro_core::training_engine::{
    evaluate, train as run_training, worker_pool, write_eval_csv, EvalRow, MetricsRow, Policy, TaskError,
    TrainError, TrainObserver,
};
use qmetro_core::{Agent, ConfigError, ExperimentConfig, PolicySpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{what} was produced with configuration {found} but the current one hashes to {expected}; pass --force to proceed anyway")]
    HashMismatch { what: String, found: String, expected: String },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::HashMismatch { .. } => 3,
            _ => 1,
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub force: bool,
}

pub struct EvalArgs {
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub agent: Option<String>,
    pub grid: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub force: bool,
}

fn load_config(path: &Path, seed: Option<u64>, workers: Option<usize>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(w) = workers {
        cfg.training.workers = w;
    }
    Ok(cfg)
}

struct RunObserver {
    metrics: csv::Writer<File>,
    diagnostics: File,
    checkpoints: PathBuf,
    hash: String,
}

impl TrainObserver for RunObserver {
    fn on_metrics(&mut self, row: &MetricsRow) -> Result<(), String> {
        self.metrics.serialize(row).and_then(|_| Ok(self.metrics.flush()?)).map_err(|e| e.to_string())
    }

    fn on_checkpoint(&mut self, step: usize, agent: &dyn Agent) -> Result<(), String> {
        let path = self.checkpoints.join(format!("step_{step}.qmck"));
        write_checkpoint(&path, agent, &self.hash, step).map(|_| ()).map_err(|e| e.to_string())
    }

    fn on_diagnostic(&mut self, message: &str) {
        if let Err(e) = writeln!(self.diagnostics, "{message}") {
            log::warn!("could not write diagnostics: {e}");
        }
    }
}

/// Refuses to reuse a run directory trained on another configuration.
fn check_run_dir(out: &Path, cfg: &ExperimentConfig, force: bool) -> Result<(), CliError> {
    let existing = out.join("config.toml");
    if !existing.exists() || force {
        return Ok(());
    }
    let old = ExperimentConfig::load(&existing)?;
    if old.model_hash() != cfg.model_hash() {
        return Err(CliError::HashMismatch {
            what: format!("run directory {}", out.display()),
            found: old.model_hash(),
            expected: cfg.model_hash(),
        });
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, args.seed, args.workers)?;
    if let PolicySpec::Heuristic(h) = cfg.policy()? {
        return Err(CliError::Usage(format!("'{h}' is a fixed strategy; evaluate it with `eval --agent {h}`")));
    }
    let task = cfg.build_task()?;
    let mut agent = cfg.build_agent(&task)?;
    check_run_dir(&args.out, &cfg, args.force)?;

    let ckpt_dir = args.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_at(&ckpt_dir))?;
    let cfg_path = args.out.join("config.toml");
    fs::write(&cfg_path, cfg.snapshot()).map_err(io_at(&cfg_path))?;
    let hash = cfg.model_hash();
    write_checkpoint(&ckpt_dir.join("step_0.qmck"), &*agent, &hash, 0)?;

    let metrics_path = args.out.join("metrics.csv");
    let diag_path = args.out.join("diagnostics.log");
    let mut observer = RunObserver {
        metrics: csv::Writer::from_path(&metrics_path)?,
        diagnostics: File::create(&diag_path).map_err(io_at(&diag_path))?,
        checkpoints: ckpt_dir.clone(),
        hash: hash.clone(),
    };
    // The header is written even when no step runs.
    if cfg.training.steps == 0 {
        observer.metrics.write_record(["step", "loss", "grad_norm", "lr", "ess_min", "aborted_episodes"])?;
        observer.metrics.flush().map_err(io_at(&metrics_path))?;
    }
    info!("training {} on {} for {} steps", cfg.agent.kind, task.name(), cfg.training.steps);
    let summary = run_training(&task, &mut *agent, cfg.loss.mode, &cfg.training, cfg.seed, &mut observer)?;
    observer.on_diagnostic(&format!(
        "finished {} steps ({} rejected), final loss {:e}",
        summary.steps_done, summary.rejected_steps, summary.final_loss
    ));
    write_checkpoint(&ckpt_dir.join("final.qmck"), &*agent, &hash, summary.steps_done)?;

    let eval_path = args.out.join("eval.csv");
    let rows = if cfg.training.eval_episodes > 0 {
        let pool = worker_pool(cfg.training.workers)?;
        let label = cfg.agent.kind.clone();
        pool.install(|| evaluate(&task, Policy::Agent(&*agent), &label, cfg.training.eval_episodes, cfg.seed, None))?
    } else {
        Vec::new()
    };
    write_eval_csv(&rows, File::create(&eval_path).map_err(io_at(&eval_path))?)?;
    if let Some(step) = summary.halted_at {
        eprintln!("warning: training halted at step {step} on a non-finite loss; see diagnostics.log");
    }
    Ok(())
}

/// Finds the configuration of a checkpoint stored in a run directory.
fn run_config_of(checkpoint: &Path) -> Option<PathBuf> {
    let run = checkpoint.parent()?.parent()?;
    let p = run.join("config.toml");
    p.exists().then_some(p)
}

fn output(out: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_at(dir))?;
            }
            Box::new(File::create(p).map_err(io_at(p))?)
        }
        None => Box::new(io::stdout().lock()),
    })
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg_path = match (&args.config, &args.checkpoint) {
        (Some(c), _) => c.clone(),
        (None, Some(ck)) => run_config_of(ck)
            .ok_or_else(|| CliError::Usage("no --config given and the checkpoint is not inside a run directory".into()))?,
        (None, None) => return Err(CliError::Usage("eval needs --config".into())),
    };
    let mut cfg = load_config(&cfg_path, args.seed, args.workers)?;
    if let Some(a) = &args.agent {
        cfg.agent.kind = a.clone();
    }
    let task = cfg.build_task()?;
    let pool = worker_pool(cfg.training.workers)?;
    let episodes = cfg.training.eval_episodes;
    let grid = args.grid.as_deref();
    let rows: Vec<EvalRow> = match (&args.checkpoint, cfg.policy()?) {
        (Some(_), PolicySpec::Heuristic(h)) if args.agent.is_some() => {
            return Err(CliError::Usage(format!("--agent {h} and --checkpoint are mutually exclusive")));
        }
        (Some(path), _) => {
            let (agent, meta) = read_checkpoint(path)?;
            if meta.config_hash != cfg.model_hash() && !args.force {
                return Err(CliError::HashMismatch {
                    what: format!("checkpoint {}", path.display()),
                    found: meta.config_hash,
                    expected: cfg.model_hash(),
                });
            }
            let label = agent.kind().to_string();
            pool.install(|| evaluate(&task, Policy::Agent(&*agent), &label, episodes, cfg.seed, grid))?
        }
        (None, PolicySpec::Heuristic(h)) => {
            pool.install(|| evaluate(&task, Policy::Heuristic(h), h.name(), episodes, cfg.seed, grid))?
        }
        (None, PolicySpec::Agent(k)) => {
            return Err(CliError::Usage(format!("evaluating a {k} agent needs --checkpoint; fixed strategies use --agent")));
        }
    };
    write_eval_csv(&rows, output(args.out.as_deref())?)?;
    Ok(())
}

pub fn bounds(task: &str, case: &str, regime: &str, grid: &[f64], out: Option<&Path>) -> Result<(), CliError> {
    let curves: Vec<BoundCurve> = match task {
        "ramp" => {
            let mut ramp = BoundCurve { task: "dc".into(), case: "ramp".into(), regime: "measurement".into(), points: vec![] };
            let mut floor = BoundCurve { case: "bit_floor".into(), ..ramp.clone() };
            for &m in grid {
                if m < 1.0 || m.fract() != 0.0 {
                    return Err(CliError::Usage(format!("ramp grid values must be whole measurement counts, got {m}")));
                }
                let r = analytic_ramp(m as u64, 2.0);
                ramp.points.push((m, r.bound));
                floor.points.push((m, r.bit_floor));
            }
            vec![ramp, floor]
        }
        "helstrom" => {
            let points = grid.iter().map(|&a| (a, helstrom(a, None))).collect();
            vec![BoundCurve { task: "dolinar".into(), case: "helstrom".into(), regime: "amplitude".into(), points }]
        }
        _ => {
            let t: BoundTask = task.parse()?;
            let settings = if t == BoundTask::Decoherence { BoundSettings::decoherence() } else { BoundSettings::default() };
            let k = maximize_fi_objectives();
            vec![crb_curve(t, case.parse::<BoundCase>()?, regime.parse::<Regime>()?, grid, &settings, &k)?]
        }
    };
    write_bound_csv(&curves, output(out)?)?;
    Ok(())
}

/// Reads the rows of one evaluation CSV.
fn read_eval(path: &Path) -> Result<Vec<EvalRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io { path: path.display().to_string(), source },
        other => CliError::Usage(format!("{}: {other:?}", path.display())),
    })?;
    Ok(r.deserialize().collect::<Result<Vec<EvalRow>, _>>()?)
}

pub fn compare(runs: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    // Column label → (resource bits → (mean, stderr)).
    let mut columns: Vec<(String, BTreeMap<u64, (f64, f64)>)> = Vec::new();
    let mut resources: Vec<f64> = Vec::new();
    let mut seen_resources = HashSet::new();
    for run in runs {
        let file = if run.is_dir() { run.join("eval.csv") } else { run.clone() };
        let source = run.file_stem().map_or_else(|| run.display().to_string(), |s| s.to_string_lossy().into_owned());
        let mut by_strategy: BTreeMap<String, BTreeMap<u64, (f64, f64)>> = BTreeMap::new();
        for row in read_eval(&file)? {
            if seen_resources.insert(row.resource.to_bits()) {
                resources.push(row.resource);
            }
            by_strategy.entry(row.strategy).or_default().insert(row.resource.to_bits(), (row.precision_mean, row.precision_stderr));
        }
        for (strategy, values) in by_strategy {
            let label = if columns.iter().any(|(l, _)| *l == strategy) { format!("{source}/{strategy}") } else { strategy };
            columns.push((label, values));
        }
    }
    resources.sort_by(f64::total_cmp);
    let mut w = csv::Writer::from_writer(output(out)?);
    let mut header = vec!["resource".to_string()];
    for (label, _) in &columns {
        header.push(format!("{label}_mean"));
        header.push(format!("{label}_stderr"));
    }
    w.write_record(&header)?;
    for r in resources {
        let mut rec = vec![r.to_string()];
        for (_, values) in &columns {
            match values.get(&r.to_bits()) {
                Some((m, s)) => rec.extend([m.to_string(), s.to_string()]),
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| CliError::Io { path: "output".into(), source })?;
    Ok(())
}
