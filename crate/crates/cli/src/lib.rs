//! Command-line front end for multi-environment sparse dynamics discovery.
//!
//! Every command reads one JSON [`RunConfig`], applies flag overrides and
//! writes its effective configuration next to its outputs. Run directory
//! layout under `--out`:
//!
//! ```text
//! dataset/                 generate
//! <method>/model.json      train
//! <method>/train_loss.csv  train (spreme only)
//! <method>/adapted.json    adapt
//! <method>/report.csv      evaluate
//! <method>/predictions/    evaluate
//! sweep-<kind>/sweep.csv   sweep
//! report.csv               report
//! ```

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use spreme_core::dataset::{read_dataset, write_dataset};
use spreme_core::eval::{
    adapt_model, horizon_csv, horizon_sweep, report_csv, train_method, variance_csv,
    variance_sweep, Evaluation, REPORT_HEADER,
};
use spreme_core::{
    build_dataset, evaluate_in_domain, evaluate_out_of_domain, seeds, Dataset, Error, Method,
    SpremeModel, SystemKind,
};

pub use config::{Effective, Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_COMPAT: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Training(_) => EXIT_TRAINING,
            CliError::Incompatible(_) => EXIT_COMPAT,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Format { .. } => CliError::Config(e.to_string()),
            Error::Incompatible(m) => CliError::Incompatible(m),
            Error::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Training(other.to_string()),
        }
    }
}

/// Errors of a training or adaptation stage: anything but IO and
/// compatibility problems counts as a training failure.
fn stage_err(e: Error) -> CliError {
    match e {
        Error::Io { .. } | Error::Incompatible(_) => e.into(),
        other => CliError::Training(other.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "dynodisco", version, about = "Sparse dynamics shared across environments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub system: Option<SystemKind>,
    #[arg(long, global = true)]
    pub method: Option<Method>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Parallel sweep cells.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    InDomain,
    OutOfDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Variance,
    Horizon,
}

impl SweepKind {
    fn name(self) -> &'static str {
        match self {
            SweepKind::Variance => "variance",
            SweepKind::Horizon => "horizon",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset into <out>/dataset.
    Generate,
    /// Train the selected method.
    Train {
        /// Dataset directory (default <out>/dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Fit coefficients for the held-out environments under a trained mask.
    Adapt {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Model file (default <out>/<method>/model.json).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Evaluate a trained model.
    Evaluate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Settings to evaluate (default both).
        #[arg(long, value_enum)]
        mode: Vec<Mode>,
    },
    /// Variance or horizon sweep on freshly generated data.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
    },
    /// Merge evaluation reports into <out>/report.csv.
    Report {
        /// Report files (default <out>/*/report.csv).
        #[arg(long)]
        input: Vec<PathBuf>,
    },
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            system: self.system,
            method: self.method,
            seed: self.seed,
            out: self.out.clone(),
            jobs: self.jobs,
        }
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn effective(global: &GlobalArgs, need_system: bool) -> Result<Effective, CliError> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&global.overrides());
    if !need_system && cfg.system.is_none() {
        // Report merging does not depend on the system.
        cfg.system = Some(SystemKind::Linear3D);
    }
    cfg.resolve()
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let needs_system = !matches!(cli.command, Command::Report { .. });
    let eff = effective(&cli.global, needs_system)?;
    let out = eff.config.out.clone();
    match &cli.command {
        Command::Generate => cmd_generate(&eff, &out.join("dataset")),
        Command::Train { dataset } => {
            let ds = dataset.clone().unwrap_or_else(|| out.join("dataset"));
            cmd_train(&eff, &ds, &out.join(eff.config.method.name()))
        }
        Command::Adapt { dataset, model } => {
            let ds = dataset.clone().unwrap_or_else(|| out.join("dataset"));
            let model = model.clone().unwrap_or_else(|| default_model(&eff));
            cmd_adapt(&eff, &model, &ds)
        }
        Command::Evaluate {
            dataset,
            model,
            mode,
        } => {
            let ds = dataset.clone().unwrap_or_else(|| out.join("dataset"));
            let model = model.clone().unwrap_or_else(|| default_model(&eff));
            let modes = if mode.is_empty() {
                vec![Mode::InDomain, Mode::OutOfDomain]
            } else {
                mode.clone()
            };
            cmd_evaluate(&eff, &model, &ds, &modes)
        }
        Command::Sweep { kind } => cmd_sweep(&eff, *kind, &out.join(format!("sweep-{}", kind.name()))),
        Command::Report { input } => {
            let inputs = if input.is_empty() {
                find_reports(&out)?
            } else {
                input.clone()
            };
            cmd_report(&inputs, &out.join("report.csv"))
        }
    }
}

fn default_model(eff: &Effective) -> PathBuf {
    eff.config.out.join(eff.config.method.name()).join("model.json")
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_config(eff: &Effective, dir: &Path) -> Result<(), CliError> {
    write_file(&dir.join("config.json"), &eff.to_json())
}

pub fn cmd_generate(eff: &Effective, dir: &Path) -> Result<(), CliError> {
    let dataset = build_dataset(eff.system, &eff.spec, eff.config.seed)?;
    if dir.exists() {
        // Stale trajectories from a larger earlier run would survive otherwise.
        fs::remove_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    write_dataset(&dataset, dir)?;
    write_config(eff, dir)?;
    log::info!(
        "wrote {} ({} train environments) to {}",
        eff.system,
        dataset.train.len(),
        dir.display()
    );
    Ok(())
}

fn load_dataset(eff: &Effective, path: &Path) -> Result<Dataset, CliError> {
    let ds = read_dataset(path)?;
    if ds.kind != eff.system {
        return Err(CliError::Incompatible(format!(
            "dataset {} holds {}, config selects {}",
            path.display(),
            ds.kind,
            eff.system
        )));
    }
    Ok(ds)
}

fn load_model(eff: &Effective, path: &Path) -> Result<SpremeModel, CliError> {
    let model = SpremeModel::load(path)?;
    if model.library != eff.library {
        return Err(CliError::Incompatible(format!(
            "model {} uses library {}, config selects {}",
            path.display(),
            model.library,
            eff.library
        )));
    }
    Ok(model)
}

pub fn cmd_train(eff: &Effective, dataset: &Path, dir: &Path) -> Result<(), CliError> {
    let ds = load_dataset(eff, dataset)?;
    let model = train_method(eff.config.method, &ds.train, &eff.library, &eff.config.hyper)
        .map_err(stage_err)?;
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    model.save(&dir.join("model.json"))?;
    let loss_path = dir.join("train_loss.csv");
    match &model.report {
        Some(report) => write_file(&loss_path, &report.to_csv())?,
        None if loss_path.exists() => {
            fs::remove_file(&loss_path).map_err(|e| CliError::Io(format!("{}: {e}", loss_path.display())))?
        }
        None => {}
    }
    write_config(eff, dir)?;
    log::info!("{} model: {} active entries", model.method, model.mask.count_ones());
    Ok(())
}

#[derive(Serialize)]
struct AdaptedEnv {
    id: usize,
    /// Row-major n×p.
    coefficients: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct AdaptedFile {
    system: SystemKind,
    method: Method,
    terms: Vec<String>,
    environments: Vec<AdaptedEnv>,
}

pub fn cmd_adapt(eff: &Effective, model_path: &Path, dataset: &Path) -> Result<(), CliError> {
    let ds = load_dataset(eff, dataset)?;
    let model = load_model(eff, model_path)?;
    let adapt_seed = seeds::substream(eff.config.seed, "adaptation");
    let mut environments = Vec::new();
    for (e, env) in ds.adaptation.iter().enumerate() {
        let xi = adapt_model(&model, &env.trajectories, seeds::child(adapt_seed, e as u64))
            .map_err(stage_err)?;
        environments.push(AdaptedEnv {
            id: env.id,
            coefficients: xi.row_iter().map(|r| r.iter().copied().collect()).collect(),
        });
    }
    let file = AdaptedFile {
        system: ds.kind,
        method: model.method,
        terms: model.library.term_names(),
        environments,
    };
    let text = serde_json::to_string_pretty(&file).expect("adapted coefficients serialize") + "\n";
    let dir = model_path.parent().unwrap_or(Path::new("."));
    write_file(&dir.join("adapted.json"), &text)?;
    write_config(eff, dir)
}

pub fn cmd_evaluate(
    eff: &Effective,
    model_path: &Path,
    dataset: &Path,
    modes: &[Mode],
) -> Result<(), CliError> {
    let ds = load_dataset(eff, dataset)?;
    let model = load_model(eff, model_path)?;
    let dir = model_path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for mode in [Mode::InDomain, Mode::OutOfDomain].into_iter().filter(|m| modes.contains(m)) {
        let ev: Evaluation = match mode {
            Mode::InDomain => evaluate_in_domain(&model, &ds)?,
            Mode::OutOfDomain => evaluate_out_of_domain(&model, &ds, eff.config.seed)?,
        };
        let pred_dir = dir.join("predictions");
        for p in &ev.predictions {
            p.write(&pred_dir, ev.record.setting.name())?;
        }
        records.push(ev.record);
    }
    write_file(&dir.join("report.csv"), &report_csv(&records))?;
    write_config(eff, dir)
}

pub fn cmd_sweep(eff: &Effective, kind: SweepKind, dir: &Path) -> Result<(), CliError> {
    let cfg = &eff.config;
    let sw = &cfg.sweep;
    let (csv, ok, total) = match kind {
        SweepKind::Variance => {
            if sw.variances.is_empty() || sw.methods.is_empty() {
                return Err(CliError::Config("sweep.variances and sweep.methods must be nonempty".into()));
            }
            let mut rows = variance_sweep(
                eff.system,
                &eff.spec,
                &sw.variances,
                &sw.methods,
                &eff.library,
                &cfg.hyper,
                cfg.seed,
                cfg.jobs,
            )?;
            if !cfg.timing {
                for r in rows.iter_mut() {
                    if let Ok(rec) = r.outcome.as_mut() {
                        rec.runtime_s = None;
                    }
                }
            }
            let ok = rows.iter().filter(|r| r.outcome.is_ok()).count();
            (variance_csv(&rows), ok, rows.len())
        }
        SweepKind::Horizon => {
            if sw.horizons.is_empty() {
                return Err(CliError::Config("sweep.horizons must be nonempty".into()));
            }
            let ds = build_dataset(eff.system, &eff.spec, cfg.seed)?;
            let mut rows = horizon_sweep(&ds, &sw.horizons, &eff.library, &cfg.hyper, cfg.seed, cfg.jobs)?;
            if !cfg.timing {
                for r in rows.iter_mut() {
                    if let Ok(h) = r.outcome.as_mut() {
                        h.train_seconds = None;
                    }
                }
            }
            let ok = rows.iter().filter(|r| r.outcome.is_ok()).count();
            (horizon_csv(&rows), ok, rows.len())
        }
    };
    write_file(&dir.join("sweep.csv"), &csv)?;
    write_config(eff, dir)?;
    if ok == 0 {
        return Err(CliError::Training(format!("all {total} sweep cells failed")));
    }
    if ok < total {
        log::warn!("{} of {total} sweep cells failed", total - ok);
    }
    Ok(())
}

fn find_reports(out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path().join("report.csv"))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(CliError::Config(format!("no reports found under {}", out.display())));
    }
    Ok(found)
}

fn row_key(row: &str) -> (String, usize, String) {
    let mut f = row.split(',');
    let system = f.next().unwrap_or_default().to_string();
    let method = f
        .next()
        .and_then(|m| m.parse::<Method>().ok())
        .and_then(|m| Method::ALL.iter().position(|&x| x == m))
        .unwrap_or(usize::MAX);
    let setting = f.next().unwrap_or_default().to_string();
    (system, method, setting)
}

/// Concatenates report CSVs, ordered by system, method and setting.
pub fn cmd_report(inputs: &[PathBuf], path: &Path) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for input in inputs {
        let text = fs::read_to_string(input).map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?;
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(CliError::Config(format!("{}: not an evaluation report", input.display())));
        }
        rows.extend(lines.filter(|l| !l.is_empty()).map(str::to_string));
    }
    rows.sort_by_key(|r| row_key(r));
    rows.dedup();
    let mut csv = format!("{REPORT_HEADER}\n");
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    write_file(path, &csv)?;
    print!("{csv}");
    Ok(())
}
