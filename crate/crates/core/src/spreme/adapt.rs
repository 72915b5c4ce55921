//! Fitting fresh coefficients for a new environment under a frozen mask.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::{coefficient_loss_grad, feature_scales, EnvData};
use super::mask::{BinaryMask, CoefficientSet};
use super::optim::{guarded_step, Adam};
use super::Hyperparams;
use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::library::FeatureLibrary;
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub lr: f64,
    pub max_steps: usize,
    /// Steps over which the relative loss decrease is measured.
    pub window: usize,
    /// Stop once the best loss improved by less than this fraction over
    /// `window` steps.
    pub tol: f64,
    /// Standard deviation of the random initialization.
    pub init_std: f64,
    /// Steps without a new best loss before the step size is decayed.
    pub patience: usize,
    pub decay: f64,
    pub min_lr: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            max_steps: 20_000,
            window: 200,
            tol: 1e-8,
            init_std: 0.1,
            patience: 50,
            decay: 0.5,
            min_lr: 1e-7,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.max_steps >= 1
            && self.window >= 1
            && self.tol >= 0.0
            && self.init_std >= 0.0
            && self.patience >= 1
            && self.decay > 0.0
            && self.decay <= 1.0
            && self.min_lr > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("invalid adaptation settings"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    /// n×p coefficients, zero outside the mask.
    pub coefficients: DMatrix<f64>,
    pub loss: f64,
    pub steps: usize,
    pub solver_steps: u64,
    pub converged: bool,
    pub warning: Option<String>,
}

/// Random initialization at masked positions (row-major draw order), zero
/// elsewhere.
pub fn init_adaptation(mask: &BinaryMask, std: f64, seed: u64) -> Result<DMatrix<f64>> {
    let (n, p) = mask.shape();
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seeds::rng(seed);
    let mut xi = DMatrix::zeros(n, p);
    for (r, c) in mask.ones_positions() {
        xi[(r, c)] = normal.sample(&mut rng);
    }
    Ok(xi)
}

/// Minimizes the coefficient loss on `trajs` (one new environment) over the
/// entries selected by `mask`.
pub fn adapt(
    lib: &FeatureLibrary,
    mask: &BinaryMask,
    trajs: &[Trajectory],
    hyper: &Hyperparams,
    seed: u64,
) -> Result<AdaptOutcome> {
    let cfg = &hyper.adapt;
    cfg.validate()?;
    let (n, p) = (lib.n(), lib.p());
    if mask.shape() != (n, p) {
        return Err(Error::invalid("mask shape does not match library"));
    }
    if trajs.is_empty() {
        return Err(Error::invalid("adaptation needs at least one trajectory"));
    }
    let data = EnvData::single(trajs.to_vec());
    let term = hyper.coefficient_term();
    let init = init_adaptation(mask, cfg.init_std, seed)?;

    // Column-major parameter order, so entry k belongs to column k / n.
    let scales: Vec<f64> = feature_scales(lib, &data)
        .into_iter()
        .flat_map(|s| std::iter::repeat(s).take(n))
        .collect();
    let unscale = |u: &[f64]| -> Vec<f64> { u.iter().zip(&scales).map(|(a, s)| a / s).collect() };

    let mut solver_steps = 0u64;
    let mut eval = |u: &[f64], want: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let cs = CoefficientSet(vec![DMatrix::from_column_slice(n, p, &unscale(u))]);
        let ev = coefficient_loss_grad(lib, &cs, mask, &data, term, want)?;
        solver_steps += ev.steps;
        let g = ev.grads.map(|g| g[0].iter().zip(&scales).map(|(g, s)| g / s).collect());
        Ok((ev.loss, g))
    };

    let mut params: Vec<f64> = init.iter().zip(&scales).map(|(a, s)| a * s).collect();
    let (loss0, grad0) = eval(&params, true)?;
    if !loss0.is_finite() {
        return Err(Error::AdaptationFailure("loss is infinite at initialization".into()));
    }
    if mask.count_ones() == 0 {
        let warning = "mask is empty; the adaptation loss is constant".to_string();
        log::warn!("{warning}");
        return Ok(AdaptOutcome {
            coefficients: init,
            loss: loss0,
            steps: 0,
            solver_steps,
            converged: true,
            warning: Some(warning),
        });
    }

    let frozen: Vec<bool> = (0..p)
        .flat_map(|c| (0..n).map(move |r| (r, c)))
        .map(|(r, c)| !mask.get(r, c))
        .collect();
    let mut adam = Adam::new(n * p, cfg.lr);
    let mut grad = grad0.expect("gradient requested");
    let mut best = (loss0, params.clone());
    let mut best_history = vec![loss0];
    let mut since_best = 0;
    let mut converged = false;
    let mut steps = 0;
    while steps < cfg.max_steps {
        let out = guarded_step(&mut adam, &mut params, &grad, Some(&frozen), true, &mut eval)
            .map_err(|e| Error::AdaptationFailure(e.to_string()))?;
        steps += 1;
        grad = out.grad.expect("gradient requested");
        if out.loss < best.0 {
            best = (out.loss, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience && adam.lr > cfg.min_lr {
                adam.lr = (adam.lr * cfg.decay).max(cfg.min_lr);
                since_best = 0;
            }
        }
        best_history.push(best.0);
        if best.0 == 0.0 {
            converged = true;
            break;
        }
        if steps >= cfg.window {
            let before = best_history[steps - cfg.window];
            if (before - best.0) / before < cfg.tol {
                converged = true;
                break;
            }
        }
    }
    Ok(AdaptOutcome {
        coefficients: DMatrix::from_column_slice(n, p, &unscale(&best.1)),
        loss: best.0,
        steps,
        solver_steps,
        converged,
        warning: None,
    })
}
