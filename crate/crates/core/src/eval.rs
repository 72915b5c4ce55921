//! Test metrics, in-domain and out-of-domain protocols, and sweeps.

use std::fmt;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_model, sindy_model, MaskAggregationRule};
use crate::dataset::{build_dataset, fmt_f64, Dataset, DatasetSpec, Environment, Trajectory};
use crate::error::{Error, Result};
use crate::library::FeatureLibrary;
use crate::seeds;
use crate::sindy::fit_environment;
use crate::spreme::rollout::RolloutEngine;
use crate::spreme::{adapt, train, BinaryMask, Horizon, Hyperparams, Method, SpremeModel};
use crate::systems::SystemKind;

/// Mean over all entries of squared differences.
pub fn mse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("mse of empty matrices"));
    }
    Ok((pred - truth).map(|d| d * d).sum() / pred.len() as f64)
}

/// (precision, recall) of a predicted support against the true one.
/// Precision is 1 for an empty prediction.
pub fn mask_precision_recall(predicted: &BinaryMask, truth: &BinaryMask) -> Result<(f64, f64)> {
    if predicted.shape() != truth.shape() {
        return Err(Error::invalid("mask shapes differ"));
    }
    let s = truth.count_ones();
    if s == 0 {
        return Err(Error::invalid("true support is empty"));
    }
    let p = predicted.count_ones();
    let hit = predicted
        .ones_positions()
        .into_iter()
        .filter(|&(r, c)| truth.get(r, c))
        .count();
    let precision = if p == 0 { 1.0 } else { hit as f64 / p as f64 };
    Ok((precision, hit as f64 / s as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    InDomain,
    OutOfDomain,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::InDomain => "in-domain",
            Setting::OutOfDomain => "out-of-domain",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-domain" => Ok(Setting::InDomain),
            "out-of-domain" => Ok(Setting::OutOfDomain),
            _ => Err(Error::invalid(format!(
                "unknown mode '{s}' (expected in-domain or out-of-domain)"
            ))),
        }
    }
}

/// One row of an evaluation report. Non-finite MSEs mark an unstable run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub system: SystemKind,
    pub method: Method,
    pub setting: Setting,
    pub mse_total: f64,
    pub mse_interp: f64,
    pub mse_extrap: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub runtime_s: Option<f64>,
}

impl EvalRecord {
    pub fn is_stable(&self) -> bool {
        self.mse_total.is_finite()
    }
}

pub const REPORT_HEADER: &str =
    "system,method,setting,mse_total,mse_interp,mse_extrap,precision,recall,runtime_s";

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:e}"),
        _ => "-".into(),
    }
}

impl EvalRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.system,
            self.method,
            self.setting,
            cell(Some(self.mse_total)),
            cell(Some(self.mse_interp)),
            cell(Some(self.mse_extrap)),
            cell(self.precision),
            cell(self.recall),
            cell(self.runtime_s)
        )
    }
}

pub fn report_csv(records: &[EvalRecord]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Prediction of one test trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub env: usize,
    pub traj: usize,
    pub times: Vec<f64>,
    pub truth: DMatrix<f64>,
    /// `None` when the rollout diverged.
    pub pred: Option<DMatrix<f64>>,
}

impl Prediction {
    /// CSV with columns `t,true_0..,pred_0..`; diverged predictions are
    /// written as `nan`.
    pub fn to_csv(&self) -> String {
        let n = self.truth.ncols();
        let mut out = String::from("t");
        for k in 0..n {
            out.push_str(&format!(",true_{k}"));
        }
        for k in 0..n {
            out.push_str(&format!(",pred_{k}"));
        }
        out.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            out.push_str(&fmt_f64(*t));
            for k in 0..n {
                out.push(',');
                out.push_str(&fmt_f64(self.truth[(i, k)]));
            }
            for k in 0..n {
                out.push(',');
                match &self.pred {
                    Some(p) => out.push_str(&fmt_f64(p[(i, k)])),
                    None => out.push_str("nan"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{prefix}_env{:02}_traj{:02}.csv", self.env, self.traj));
        std::fs::write(&path, self.to_csv()).map_err(|e| Error::io(&path, e))
    }
}

/// Squared-error sums split at a time horizon.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct ErrorSums {
    interp: f64,
    interp_count: usize,
    extrap: f64,
    extrap_count: usize,
    unstable: bool,
}

impl ErrorSums {
    fn add(&mut self, times: &[f64], truth: &DMatrix<f64>, pred: Option<&DMatrix<f64>>, split: f64) {
        let Some(pred) = pred else {
            self.unstable = true;
            return;
        };
        for (i, &t) in times.iter().enumerate() {
            let sq: f64 = (0..truth.ncols())
                .map(|k| (pred[(i, k)] - truth[(i, k)]).powi(2))
                .sum();
            if t <= split * (1.0 + 1e-9) {
                self.interp += sq;
                self.interp_count += truth.ncols();
            } else {
                self.extrap += sq;
                self.extrap_count += truth.ncols();
            }
        }
    }

    fn mean(sum: f64, count: usize, unstable: bool) -> f64 {
        if unstable {
            f64::INFINITY
        } else if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    fn totals(&self) -> (f64, f64, f64) {
        (
            Self::mean(
                self.interp + self.extrap,
                self.interp_count + self.extrap_count,
                self.unstable,
            ),
            Self::mean(self.interp, self.interp_count, self.unstable),
            Self::mean(self.extrap, self.extrap_count, self.unstable),
        )
    }
}

/// Continuous rollout of `weights` from the first state of `traj` over its
/// whole grid; `None` if the rollout diverges.
pub fn rollout_trajectory(
    lib: &FeatureLibrary,
    weights: &[f64],
    traj: &Trajectory,
    substeps: usize,
) -> Option<DMatrix<f64>> {
    let mut engine = RolloutEngine::new(
        lib,
        crate::spreme::RolloutSettings { substeps },
    );
    engine
        .rollout(weights, &traj.state(0), traj.dt, traj.len() - 1)
        .ok()
        .filter(|m| m.iter().all(|v| v.is_finite()))
}

/// Output of an evaluation protocol.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub record: EvalRecord,
    pub predictions: Vec<Prediction>,
    /// Coefficients used per evaluated environment (adapted ones out of
    /// domain).
    pub coefficients: Vec<DMatrix<f64>>,
}

fn support_metrics(model: &SpremeModel, kind: SystemKind, dataset: &Dataset) -> (Option<f64>, Option<f64>) {
    if !dataset.has_ground_truth() {
        return (None, None);
    }
    match kind.true_support(&model.library) {
        Ok(truth) => match mask_precision_recall(&model.mask, &truth) {
            Ok((p, r)) => (Some(p), Some(r)),
            Err(_) => (None, None),
        },
        Err(_) => (None, None),
    }
}

fn check_compatible(model: &SpremeModel, dataset: &Dataset) -> Result<()> {
    if model.library.n() != dataset.kind.dim() {
        return Err(Error::Incompatible(format!(
            "model state dimension {} does not match {} ({})",
            model.library.n(),
            dataset.kind,
            dataset.kind.dim()
        )));
    }
    Ok(())
}

fn evaluate_envs(
    model: &SpremeModel,
    weights: &[Vec<f64>],
    envs: &[Environment],
    split: f64,
) -> (ErrorSums, Vec<Prediction>) {
    let mut sums = ErrorSums::default();
    let mut predictions = Vec::new();
    for (e, env) in envs.iter().enumerate() {
        for (k, traj) in env.trajectories.iter().enumerate() {
            let pred = rollout_trajectory(&model.library, &weights[e], traj, model.hyper.substeps);
            sums.add(&traj.times, &traj.states, pred.as_ref(), split);
            predictions.push(Prediction {
                env: e,
                traj: k,
                times: traj.times.clone(),
                truth: traj.states.clone(),
                pred,
            });
        }
    }
    (sums, predictions)
}

/// Rolls the model out on test-resolution trajectories of every training
/// environment with that environment's coefficients.
pub fn evaluate_in_domain(model: &SpremeModel, dataset: &Dataset) -> Result<Evaluation> {
    check_compatible(model, dataset)?;
    if model.envs() != dataset.test_in_domain.len() {
        return Err(Error::Incompatible(format!(
            "model has {} environments, dataset has {}",
            model.envs(),
            dataset.test_in_domain.len()
        )));
    }
    let weights = (0..model.envs())
        .map(|e| model.weights(e))
        .collect::<Result<Vec<_>>>()?;
    let (sums, predictions) =
        evaluate_envs(model, &weights, &dataset.test_in_domain, dataset.spec.train.horizon);
    let (mse_total, mse_interp, mse_extrap) = sums.totals();
    let (precision, recall) = support_metrics(model, dataset.kind, dataset);
    Ok(Evaluation {
        record: EvalRecord {
            system: dataset.kind,
            method: model.method,
            setting: Setting::InDomain,
            mse_total,
            mse_interp,
            mse_extrap,
            precision,
            recall,
            runtime_s: None,
        },
        predictions,
        coefficients: model.coefficients.0.clone(),
    })
}

/// Fresh coefficients for a new environment: adaptation under the frozen
/// mask, or independent sparse regression for plain SINDy.
pub fn adapt_model(model: &SpremeModel, trajs: &[Trajectory], seed: u64) -> Result<DMatrix<f64>> {
    match model.method {
        Method::Sindy => fit_environment(trajs, &model.library, &model.hyper.fit_settings()),
        _ => Ok(adapt(&model.library, &model.mask, trajs, &model.hyper, seed)?.coefficients),
    }
}

/// Adapts to each held-out environment's adaptation data, then rolls out
/// on its test trajectories.
pub fn evaluate_out_of_domain(model: &SpremeModel, dataset: &Dataset, seed: u64) -> Result<Evaluation> {
    check_compatible(model, dataset)?;
    if dataset.adaptation.len() != dataset.test.len() {
        return Err(Error::Incompatible("adaptation and test environments differ".into()));
    }
    let mut unstable = false;
    let mut coefficients = Vec::new();
    let mut weights = Vec::new();
    let adapt_seed = seeds::substream(seed, "adaptation");
    for (e, env) in dataset.adaptation.iter().enumerate() {
        match adapt_model(model, &env.trajectories, seeds::child(adapt_seed, e as u64)) {
            Ok(xi) => {
                let w = if model.method == Method::Sindy {
                    let (n, p) = xi.shape();
                    (0..n).flat_map(|r| (0..p).map(move |c| (r, c))).map(|(r, c)| xi[(r, c)]).collect()
                } else {
                    model.weights_with(&xi)?
                };
                weights.push(w);
                coefficients.push(xi);
            }
            Err(err @ (Error::AdaptationFailure(_) | Error::InitializationFailure(_))) => {
                log::warn!("adaptation to held-out environment {e} failed: {err}");
                unstable = true;
                let (n, p) = model.mask.shape();
                weights.push(vec![0.0; n * p]);
                coefficients.push(DMatrix::from_element(n, p, f64::NAN));
            }
            Err(err) => return Err(err),
        }
    }
    let (mut sums, predictions) =
        evaluate_envs(model, &weights, &dataset.test, dataset.spec.adaptation.horizon);
    sums.unstable |= unstable;
    let (mse_total, mse_interp, mse_extrap) = sums.totals();
    let (precision, recall) = support_metrics(model, dataset.kind, dataset);
    Ok(Evaluation {
        record: EvalRecord {
            system: dataset.kind,
            method: model.method,
            setting: Setting::OutOfDomain,
            mse_total,
            mse_interp,
            mse_extrap,
            precision,
            recall,
            runtime_s: None,
        },
        predictions,
        coefficients,
    })
}

/// Trains `method` on the training environments.
pub fn train_method(
    method: Method,
    envs: &[Environment],
    lib: &FeatureLibrary,
    hyper: &Hyperparams,
) -> Result<SpremeModel> {
    match method {
        Method::Spreme => train(envs, lib, hyper),
        Method::Sindy => sindy_model(envs, lib, hyper),
        Method::SindyIntersection => baseline_model(MaskAggregationRule::Intersection, envs, lib, hyper),
        Method::SindyUnion => baseline_model(MaskAggregationRule::Union, envs, lib, hyper),
    }
}

/// Runs `f` over `items` on `jobs` worker threads; results keep item order.
pub fn run_cells<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.max(1).min(items.len().max(1));
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

#[derive(Debug, Clone)]
pub struct VarianceRow {
    pub variance: f64,
    pub method: Method,
    /// Out-of-domain record, or the error message of a failed cell.
    pub outcome: std::result::Result<EvalRecord, String>,
}

pub const VARIANCE_HEADER: &str =
    "variance,method,mse_total,mse_interp,mse_extrap,precision,recall,runtime_s,status";

pub fn variance_csv(rows: &[VarianceRow]) -> String {
    let mut out = format!("{VARIANCE_HEADER}\n");
    for r in rows {
        match &r.outcome {
            Ok(rec) => out.push_str(&format!(
                "{:e},{},{},{},{},{},{},{},{}\n",
                r.variance,
                r.method,
                cell(Some(rec.mse_total)),
                cell(Some(rec.mse_interp)),
                cell(Some(rec.mse_extrap)),
                cell(rec.precision),
                cell(rec.recall),
                cell(rec.runtime_s),
                if rec.is_stable() { "ok" } else { "unstable" }
            )),
            Err(msg) => out.push_str(&format!(
                "{:e},{},-,-,-,-,-,-,failed: {}\n",
                r.variance,
                r.method,
                msg.replace([',', '\n'], ";")
            )),
        }
    }
    out
}

/// Regenerates the dataset at each parameter variance and evaluates every
/// method out of domain. Failed cells are recorded and the sweep continues.
pub fn variance_sweep(
    kind: SystemKind,
    base: &DatasetSpec,
    variances: &[f64],
    methods: &[Method],
    lib: &FeatureLibrary,
    hyper: &Hyperparams,
    seed: u64,
    jobs: usize,
) -> Result<Vec<VarianceRow>> {
    if variances.is_empty() || methods.is_empty() {
        return Err(Error::invalid("sweep needs at least one variance and one method"));
    }
    if variances.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("variances must be positive"));
    }
    let datasets: Vec<std::result::Result<Dataset, String>> = run_cells(variances, jobs, |&v| {
        let spec = DatasetSpec {
            param_variance: v,
            ..base.clone()
        };
        build_dataset(kind, &spec, seed).map_err(|e| e.to_string())
    });
    let cells: Vec<(usize, Method)> = (0..variances.len())
        .flat_map(|i| methods.iter().map(move |&m| (i, m)))
        .collect();
    Ok(run_cells(&cells, jobs, |&(i, method)| {
        let outcome = datasets[i].clone().and_then(|ds| {
            let start = Instant::now();
            let model = train_method(method, &ds.train, lib, hyper).map_err(|e| e.to_string())?;
            let mut ev = evaluate_out_of_domain(&model, &ds, seed).map_err(|e| e.to_string())?;
            ev.record.runtime_s = Some(start.elapsed().as_secs_f64());
            Ok(ev.record)
        });
        VarianceRow {
            variance: variances[i],
            method,
            outcome,
        }
    }))
}

#[derive(Debug, Clone)]
pub struct HorizonRow {
    pub eta: Horizon,
    pub outcome: std::result::Result<HorizonResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonResult {
    pub mse: f64,
    pub train_seconds: Option<f64>,
    pub solver_steps: u64,
}

pub const HORIZON_HEADER: &str = "eta,mse,train_seconds,solver_steps,status";

pub fn horizon_csv(rows: &[HorizonRow]) -> String {
    let mut out = format!("{HORIZON_HEADER}\n");
    for r in rows {
        let eta = match r.eta {
            Horizon::Steps(k) => k.to_string(),
            Horizon::Full(_) => "full".into(),
        };
        match &r.outcome {
            Ok(h) => out.push_str(&format!(
                "{eta},{},{},{},{}\n",
                cell(Some(h.mse)),
                cell(h.train_seconds),
                h.solver_steps,
                if h.mse.is_finite() { "ok" } else { "unstable" }
            )),
            Err(msg) => out.push_str(&format!(
                "{eta},-,-,-,failed: {}\n",
                msg.replace([',', '\n'], ";")
            )),
        }
    }
    out
}

/// Trains SpReME with each mask horizon and reports the out-of-domain MSE,
/// wall-clock training time and total solver steps.
pub fn horizon_sweep(
    dataset: &Dataset,
    etas: &[Horizon],
    lib: &FeatureLibrary,
    hyper: &Hyperparams,
    seed: u64,
    jobs: usize,
) -> Result<Vec<HorizonRow>> {
    if etas.is_empty() {
        return Err(Error::invalid("sweep needs at least one horizon"));
    }
    if etas.iter().any(|e| matches!(e, Horizon::Steps(0))) {
        return Err(Error::invalid("horizons must be ≥ 1"));
    }
    Ok(run_cells(etas, jobs, |&eta| {
        let h = Hyperparams {
            eta_mask: eta,
            ..hyper.clone()
        };
        let outcome = (|| {
            let start = Instant::now();
            let model = train(&dataset.train, lib, &h).map_err(|e| e.to_string())?;
            let train_seconds = Some(start.elapsed().as_secs_f64());
            let ev = evaluate_out_of_domain(&model, dataset, seed).map_err(|e| e.to_string())?;
            Ok(HorizonResult {
                mse: ev.record.mse_total,
                train_seconds,
                solver_steps: model.report.map_or(0, |r| r.solver_steps),
            })
        })();
        HorizonRow { eta, outcome }
    }))
}
