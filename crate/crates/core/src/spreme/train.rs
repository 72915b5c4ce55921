//! Alternating optimization of per-environment coefficients and the shared
//! relaxed mask.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{
    coefficient_loss_grad, feature_scales, mask_loss_grad, regularizer_weight, validation_loss, EnvData,
};
use super::mask::{
    init_relaxed_mask, prune_coefficients, prune_relaxed_mask, quantize_mask, BinaryMask,
    CoefficientSet, RelaxedMask,
};
use super::model::{Method, SpremeModel};
use super::optim::{guarded_step, Adam, MAX_HALVINGS};
use super::Hyperparams;
use crate::dataset::Environment;
use crate::error::{Error, Result};
use crate::library::FeatureLibrary;
use crate::sindy::fit_environment;

/// Serde helper writing non-finite losses as `null` (read back as +∞).
pub(crate) mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationRecord {
    pub iteration: usize,
    #[serde(with = "nullable")]
    pub coefficient_loss: f64,
    #[serde(with = "nullable")]
    pub mask_loss: f64,
    #[serde(with = "nullable")]
    pub mask_penalty: f64,
    #[serde(with = "nullable")]
    pub validation_loss: f64,
    /// Non-pruned mask entries after this iteration's prune steps.
    pub active_entries: usize,
    pub nonzero_coefficients: usize,
    /// Cumulative RK4 steps executed so far.
    pub solver_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    pub initial_active: usize,
    #[serde(with = "nullable")]
    pub initial_validation: f64,
    /// Iteration of the returned snapshot (0 = initialization).
    pub best_iteration: usize,
    pub step_halvings: usize,
    pub solver_steps: u64,
    pub iterations: Vec<IterationRecord>,
}

impl TrainReport {
    /// Whether the active-entry count never increased.
    pub fn pruning_is_monotone(&self) -> bool {
        let mut prev = self.initial_active;
        self.iterations.iter().all(|r| {
            let ok = r.active_entries <= prev;
            prev = r.active_entries;
            ok
        })
    }

    /// Per-iteration CSV with a header row.
    pub fn to_csv(&self) -> String {
        let fmt = |v: f64| if v.is_finite() { format!("{v:.17e}") } else { "inf".into() };
        let mut out = String::from(
            "iteration,coefficient_loss,mask_loss,mask_penalty,validation_loss,active_entries,nonzero_coefficients,solver_steps\n",
        );
        for r in &self.iterations {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.iteration,
                fmt(r.coefficient_loss),
                fmt(r.mask_loss),
                fmt(r.mask_penalty),
                fmt(r.validation_loss),
                r.active_entries,
                r.nonzero_coefficients,
                r.solver_steps
            ));
        }
        out
    }
}

/// Sparse regression in each environment independently.
pub fn init_coefficients(
    envs: &[Environment],
    lib: &FeatureLibrary,
    hyper: &Hyperparams,
) -> Result<CoefficientSet> {
    if envs.is_empty() {
        return Err(Error::invalid("need at least one training environment"));
    }
    let settings = hyper.fit_settings();
    let fits: Vec<Result<DMatrix<f64>>> = envs
        .par_iter()
        .map(|env| {
            fit_environment(&env.trajectories, lib, &settings)
        })
        .collect();
    fits.into_iter().collect::<Result<Vec<_>>>().map(CoefficientSet)
}

fn flatten(coeffs: &CoefficientSet) -> Vec<f64> {
    coeffs.0.iter().flat_map(|m| m.iter().copied()).collect()
}

fn unflatten(flat: &[f64], envs: usize, n: usize, p: usize) -> CoefficientSet {
    CoefficientSet(
        (0..envs)
            .map(|e| DMatrix::from_column_slice(n, p, &flat[e * n * p..(e + 1) * n * p]))
            .collect(),
    )
}

struct Snapshot {
    iteration: usize,
    relaxed: RelaxedMask,
    coeffs: CoefficientSet,
    validation: f64,
}

fn failure(e: Error) -> Error {
    match e {
        Error::TrainingFailure(_) | Error::InvalidArgument(_) | Error::InitializationFailure(_) => e,
        other => Error::TrainingFailure(other.to_string()),
    }
}

/// Optimization state shared by the two alternating phases.
struct Trainer<'a> {
    lib: &'a FeatureLibrary,
    hyper: &'a Hyperparams,
    data: EnvData,
    envs: usize,
    coeffs: CoefficientSet,
    relaxed: RelaxedMask,
    /// Per-parameter scale of the coefficient optimizer's coordinates.
    scales: Vec<f64>,
    adam_xi: Adam,
    adam_m: Adam,
    halvings: usize,
    steps: u64,
}

impl Trainer<'_> {
    /// `inner_steps` Adam steps on every Ξ^(e) under the binary mask, then
    /// coefficient pruning. Returns the last coefficient loss.
    fn coefficient_phase(&mut self, tau: usize) -> Result<f64> {
        let (lib, data, envs) = (self.lib, &self.data, self.envs);
        let (n, p) = (lib.n(), lib.p());
        let term = self.hyper.coefficient_term();
        let mask = quantize_mask(&self.relaxed);
        let (steps, scales) = (&mut self.steps, &self.scales);
        let mut eval = |u: &[f64], want: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let flat: Vec<f64> = u.iter().zip(scales).map(|(a, s)| a / s).collect();
            let cs = unflatten(&flat, envs, n, p);
            let ev = coefficient_loss_grad(lib, &cs, &mask, data, term, want)?;
            *steps += ev.steps;
            let g = ev.grads.map(|gs| {
                gs.iter()
                    .flat_map(|m| m.iter().copied())
                    .zip(scales)
                    .map(|(g, s)| g / s)
                    .collect()
            });
            Ok((ev.loss, g))
        };
        let mut u: Vec<f64> = flatten(&self.coeffs).iter().zip(scales).map(|(a, s)| a * s).collect();
        let frozen: Vec<bool> = (0..envs)
            .flat_map(|_| (0..p).flat_map(|c| (0..n).map(move |r| (r, c))))
            .map(|(r, c)| !mask.get(r, c))
            .collect();
        let (mut loss, mut grad) = eval(&u, true)?;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure(format!(
                "coefficient loss became infinite at iteration {tau}"
            )));
        }
        for k in 0..self.hyper.inner_steps {
            let g = grad.take().expect("gradient requested");
            let want = k + 1 < self.hyper.inner_steps;
            let out = guarded_step(&mut self.adam_xi, &mut u, &g, Some(&frozen), want, &mut eval)
                .map_err(failure)?;
            self.halvings += out.halvings;
            loss = out.loss;
            grad = out.grad;
        }
        let flat: Vec<f64> = u.iter().zip(scales).map(|(a, s)| a / s).collect();
        self.coeffs = unflatten(&flat, envs, n, p);
        prune_coefficients(&mut self.coeffs, self.hyper.kappa_xi);
        Ok(loss)
    }

    /// `inner_steps` Adam steps on M̃ against the mask loss at iteration
    /// `tau`, then mask pruning. Returns (mask loss, penalty), or `None` if
    /// the mask loss is infinite at the starting point.
    fn mask_phase(&mut self, tau: usize) -> Result<Option<(f64, f64)>> {
        let (lib, data, coeffs) = (self.lib, &self.data, &self.coeffs);
        let (n, p) = (lib.n(), lib.p());
        let term = self.hyper.mask_term();
        let reg = regularizer_weight(self.hyper.lambda, self.hyper.s, tau as u32);
        let steps = &mut self.steps;
        let mut penalty = 0.0;
        let mut eval = |flat: &[f64], want: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let rm = RelaxedMask(DMatrix::from_column_slice(n, p, flat));
            let ev = mask_loss_grad(lib, &rm, coeffs, data, term, reg, want)?;
            *steps += ev.steps;
            penalty = ev.penalty;
            Ok((ev.loss, ev.grad.map(|g| g.as_slice().to_vec())))
        };
        let mut flat = self.relaxed.0.as_slice().to_vec();
        let frozen: Vec<bool> = flat.iter().map(|v| *v == f64::NEG_INFINITY).collect();
        let (mut loss, mut grad) = eval(&flat, true)?;
        if !loss.is_finite() {
            return Ok(None);
        }
        for k in 0..self.hyper.inner_steps {
            let g = grad.take().expect("gradient requested");
            let want = k + 1 < self.hyper.inner_steps;
            let out = guarded_step(&mut self.adam_m, &mut flat, &g, Some(&frozen), want, &mut eval)
                .map_err(failure)?;
            self.halvings += out.halvings;
            loss = out.loss;
            grad = out.grad;
        }
        self.relaxed = RelaxedMask(DMatrix::from_column_slice(n, p, &flat));
        prune_relaxed_mask(&mut self.relaxed, &self.coeffs, self.hyper.kappa_m);
        Ok(Some((loss, penalty)))
    }

    /// One outer iteration. If the coefficient step leaves the relaxed
    /// rollout unstable, the step is undone and retried with a halved
    /// coefficient step size.
    fn iterate(&mut self, tau: usize) -> Result<(f64, f64, f64)> {
        let saved = (self.coeffs.clone(), self.adam_xi.clone());
        for _ in 0..=MAX_HALVINGS {
            let coefficient_loss = self.coefficient_phase(tau)?;
            if let Some((mask_loss, penalty)) = self.mask_phase(tau)? {
                return Ok((coefficient_loss, mask_loss, penalty));
            }
            log::debug!("mask loss infinite at iteration {tau}; halving the coefficient step");
            self.coeffs = saved.0.clone();
            let lr = self.adam_xi.lr * 0.5;
            self.adam_xi = saved.1.clone();
            self.adam_xi.lr = lr;
            self.halvings += 1;
        }
        Err(Error::TrainingFailure(format!(
            "mask loss stayed infinite at iteration {tau} after {MAX_HALVINGS} step-size halvings"
        )))
    }
}

/// Runs the alternating optimization and returns the snapshot with the
/// lowest validation loss.
pub fn train(envs: &[Environment], lib: &FeatureLibrary, hyper: &Hyperparams) -> Result<SpremeModel> {
    hyper.validate()?;
    if envs.is_empty() || envs.iter().any(|e| e.trajectories.is_empty()) {
        return Err(Error::invalid("every training environment needs trajectories"));
    }
    let full = EnvData::from_environments(envs);
    let data = full.training_part(hyper.validation_fraction);
    let (n, p) = (lib.n(), lib.p());
    let settings = hyper.rollout_settings();

    let coeffs = init_coefficients(envs, lib, hyper)?;
    let relaxed = init_relaxed_mask(&coeffs, hyper.init_alpha)?;
    let initial_mask = quantize_mask(&relaxed);
    let initial_loss =
        coefficient_loss_grad(lib, &coeffs, &initial_mask, &data, hyper.coefficient_term(), false)?;
    if !initial_loss.loss.is_finite() {
        return Err(Error::TrainingFailure(
            "coefficient loss is infinite at initialization".into(),
        ));
    }
    let initial_validation =
        validation_loss(lib, &initial_mask, &coeffs, &full, hyper.validation_fraction, settings)?;
    let mut report = TrainReport {
        initial_active: relaxed.active_count(),
        initial_validation,
        ..TrainReport::default()
    };
    let mut best = Snapshot {
        iteration: 0,
        relaxed: relaxed.clone(),
        coeffs: coeffs.clone(),
        validation: initial_validation,
    };
    let column_scales = feature_scales(lib, &data);
    let scales: Vec<f64> = (0..envs.len())
        .flat_map(|_| column_scales.iter().flat_map(|&s| std::iter::repeat(s).take(n)))
        .collect();
    let mut t = Trainer {
        lib,
        hyper,
        data,
        envs: envs.len(),
        coeffs,
        relaxed,
        scales,
        adam_xi: Adam::new(envs.len() * n * p, hyper.alpha_xi),
        adam_m: Adam::new(n * p, hyper.alpha_m),
        halvings: 0,
        steps: initial_loss.steps,
    };

    for tau in 1..=hyper.outer_iters {
        let (coefficient_loss, mask_loss, mask_penalty) = t.iterate(tau)?;
        let mask = quantize_mask(&t.relaxed);
        let validation =
            validation_loss(lib, &mask, &t.coeffs, &full, hyper.validation_fraction, settings)?;
        report.iterations.push(IterationRecord {
            iteration: tau,
            coefficient_loss,
            mask_loss,
            mask_penalty,
            validation_loss: validation,
            active_entries: t.relaxed.active_count(),
            nonzero_coefficients: (0..n)
                .flat_map(|r| (0..p).map(move |c| (r, c)))
                .filter(|&(r, c)| mask.get(r, c) && t.coeffs.nonzero_count(r, c) > 0)
                .count(),
            solver_steps: t.steps,
        });
        if tau % 25 == 0 || tau == hyper.outer_iters {
            log::info!(
                "iteration {tau}: coefficient loss {coefficient_loss:.3e}, mask loss {mask_loss:.3e}, validation {validation:.3e}, active {}",
                t.relaxed.active_count()
            );
        }
        // Iteration 0 only competes when there are no iterations; ties go to
        // the later, sparser snapshot.
        if best.iteration == 0 || validation <= best.validation {
            best = Snapshot {
                iteration: tau,
                relaxed: t.relaxed.clone(),
                coeffs: t.coeffs.clone(),
                validation,
            };
        }
    }

    report.best_iteration = best.iteration;
    report.step_halvings = t.halvings;
    report.solver_steps = t.steps;
    let mask = quantize_mask(&best.relaxed);
    Ok(SpremeModel {
        method: Method::Spreme,
        library: lib.clone(),
        relaxed: best.relaxed,
        mask,
        coefficients: best.coeffs,
        hyper: hyper.clone(),
        report: Some(report),
    })
}

/// Support of a model restricted to entries that are both unmasked and
/// nonzero in some environment.
pub fn effective_support(model: &SpremeModel) -> BinaryMask {
    let (n, p) = model.mask.shape();
    BinaryMask::from_fn(n, p, |r, c| {
        model.mask.get(r, c) && model.coefficients.nonzero_count(r, c) > 0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trip() {
        let cs = CoefficientSet(vec![
            DMatrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64),
            DMatrix::from_fn(2, 3, |r, c| -((r * 3 + c) as f64)),
        ]);
        assert_eq!(unflatten(&flatten(&cs), 2, 2, 3), cs);
    }

    #[test]
    fn monotone_check() {
        let rec = |a| IterationRecord {
            iteration: 0,
            coefficient_loss: 0.0,
            mask_loss: 0.0,
            mask_penalty: 0.0,
            validation_loss: f64::INFINITY,
            active_entries: a,
            nonzero_coefficients: 0,
            solver_steps: 0,
        };
        let mut r = TrainReport {
            initial_active: 5,
            iterations: vec![rec(5), rec(3), rec(3)],
            ..Default::default()
        };
        assert!(r.pruning_is_monotone());
        r.iterations.push(rec(4));
        assert!(!r.pruning_is_monotone());
        let text = serde_json::to_string(&r).unwrap();
        let back: TrainReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }
}
