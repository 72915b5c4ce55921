//! Coefficient loss (η-step Huber), mask loss (squared error plus scheduled
//! L1 on σ(M̃)), their gradients, and the extrapolation validation loss.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::mask::{BinaryMask, CoefficientSet, RelaxedMask};
use super::rollout::{eta_segments, AnchorRule, Penalty, RolloutEngine, RolloutSettings, Segment};
use crate::dataset::{Environment, Trajectory};
use crate::error::{Error, Result};
use crate::library::{sigmoid, FeatureLibrary, MaskWeights};

/// Trajectories grouped by environment.
#[derive(Debug, Clone)]
pub struct EnvData {
    pub envs: Vec<Vec<Trajectory>>,
}

impl EnvData {
    pub fn from_environments(envs: &[Environment]) -> Self {
        Self {
            envs: envs.iter().map(|e| e.trajectories.clone()).collect(),
        }
    }

    pub fn single(trajs: Vec<Trajectory>) -> Self {
        Self { envs: vec![trajs] }
    }

    pub fn env_count(&self) -> usize {
        self.envs.len()
    }

    /// Index of the first validation point, v = ⌊fraction·m⌋ (as a count of
    /// training points).
    pub fn split_point(m: usize, fraction: f64) -> usize {
        ((fraction * m as f64).floor() as usize).clamp(2, m.saturating_sub(1).max(2))
    }

    /// Training part of every trajectory: its first v points.
    pub fn training_part(&self, fraction: f64) -> EnvData {
        EnvData {
            envs: self
                .envs
                .iter()
                .map(|ts| {
                    ts.iter()
                        .map(|t| t.head(Self::split_point(t.len(), fraction)))
                        .collect()
                })
                .collect(),
        }
    }

    fn jobs(&self) -> Vec<(usize, &Trajectory)> {
        self.envs
            .iter()
            .enumerate()
            .flat_map(|(e, ts)| ts.iter().map(move |t| (e, t)))
            .collect()
    }
}

/// Root-mean-square of every library column over all states in `data`
/// (1 for columns that vanish identically). Coefficient optimizers step in
/// units of `ξ · scale`, which keeps large-valued features from dominating.
pub fn feature_scales(lib: &FeatureLibrary, data: &EnvData) -> Vec<f64> {
    let p = lib.p();
    let mut sum = vec![0.0; p];
    let mut phi = vec![0.0; p];
    let mut count = 0usize;
    for traj in data.envs.iter().flatten() {
        for i in 0..traj.len() {
            lib.eval_into(&traj.state(i), &mut phi);
            for (a, b) in sum.iter_mut().zip(&phi) {
                *a += b * b;
            }
            count += 1;
        }
    }
    sum.iter()
        .map(|&s| {
            let rms = (s / count.max(1) as f64).sqrt();
            if rms.is_finite() && rms > 0.0 {
                rms
            } else {
                1.0
            }
        })
        .collect()
}

/// Effective weights `factor(mask) ∘ Ξ`, row-major.
pub(crate) fn effective_weights<M: MaskWeights + ?Sized>(mask: &M, xi: &DMatrix<f64>) -> Vec<f64> {
    let (n, p) = xi.shape();
    let mut w = vec![0.0; n * p];
    for r in 0..n {
        for c in 0..p {
            let f = mask.factor(r, c);
            // Keep masked-out entries exactly zero even when Ξ is huge or
            // non-finite there.
            w[r * p + c] = if f == 0.0 { 0.0 } else { f * xi[(r, c)] };
        }
    }
    w
}

/// Settings of a data term.
#[derive(Debug, Clone, Copy)]
pub struct DataTerm {
    pub eta: usize,
    /// Use the whole trajectory as one segment regardless of `eta`.
    pub full: bool,
    pub rule: AnchorRule,
    pub penalty: Penalty,
    pub settings: RolloutSettings,
}

impl DataTerm {
    fn segments(&self, len: usize) -> Vec<Segment> {
        if self.full || self.eta >= len {
            if len < 2 {
                Vec::new()
            } else {
                vec![Segment {
                    anchor: 0,
                    last: len - 1,
                }]
            }
        } else {
            eta_segments(len, self.eta, self.rule)
        }
    }
}

/// Result of evaluating a data term over all environments.
#[derive(Debug, Clone)]
pub struct DataEval {
    pub loss: f64,
    /// ∂L/∂W^(e) for each environment (row-major n×p), if requested.
    pub grads: Option<Vec<Vec<f64>>>,
    pub steps: u64,
}

/// Library columns with a nonzero weight in some environment.
pub(crate) fn active_columns(p: usize, weights: &[Vec<f64>]) -> Vec<usize> {
    (0..p)
        .filter(|&c| weights.iter().any(|w| w.chunks(p).any(|row| row[c] != 0.0)))
        .collect()
}

/// Σ_e Σ_traj Σ_targets penalty(pred − obs) with per-environment weights
/// `weights[e]`. Integration failures give an infinite loss.
///
/// Features are evaluated only on `cols` (default: columns with a nonzero
/// weight), so gradients are exact on those columns and zero elsewhere.
pub fn data_term(
    lib: &FeatureLibrary,
    weights: &[Vec<f64>],
    data: &EnvData,
    term: DataTerm,
    cols: Option<&[usize]>,
    with_grad: bool,
) -> DataEval {
    let np = lib.n() * lib.p();
    let cols = cols.map_or_else(|| active_columns(lib.p(), weights), <[usize]>::to_vec);
    let per_job: Vec<(usize, Result<f64>, Vec<f64>, u64)> = data
        .jobs()
        .into_par_iter()
        .map(|(e, traj)| {
            let mut engine = RolloutEngine::new(lib, term.settings).with_columns(cols.clone());
            let mut g = if with_grad { vec![0.0; np] } else { Vec::new() };
            let mut total = 0.0;
            for seg in term.segments(traj.len()) {
                let grad = if with_grad { Some(g.as_mut_slice()) } else { None };
                match engine.segment(&weights[e], traj, seg, term.penalty, grad) {
                    Ok(l) => total += l,
                    Err(err) => return (e, Err(err), g, engine.steps),
                }
            }
            (e, Ok(total), g, engine.steps)
        })
        .collect();

    let mut loss = 0.0;
    let mut steps = 0;
    let mut grads = with_grad.then(|| vec![vec![0.0; np]; data.env_count()]);
    for (e, l, g, s) in per_job {
        steps += s;
        match l {
            Ok(l) => loss += l,
            Err(_) => {
                return DataEval {
                    loss: f64::INFINITY,
                    grads: None,
                    steps,
                }
            }
        }
        if let Some(grads) = grads.as_mut() {
            for (a, b) in grads[e].iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    DataEval { loss, grads, steps }
}

/// Coefficient loss with a binary mask and its gradient w.r.t. each Ξ^(e).
#[derive(Debug, Clone)]
pub struct CoefficientEval {
    pub loss: f64,
    pub grads: Option<Vec<DMatrix<f64>>>,
    pub steps: u64,
}

pub fn coefficient_loss_grad(
    lib: &FeatureLibrary,
    coeffs: &CoefficientSet,
    mask: &BinaryMask,
    data: &EnvData,
    term: DataTerm,
    with_grad: bool,
) -> Result<CoefficientEval> {
    check_shapes(lib, coeffs, mask.shape(), data)?;
    let weights: Vec<Vec<f64>> = coeffs.0.iter().map(|xi| effective_weights(mask, xi)).collect();
    let cols: Vec<usize> = (0..lib.p())
        .filter(|&c| (0..lib.n()).any(|r| mask.get(r, c)))
        .collect();
    let eval = data_term(lib, &weights, data, term, Some(&cols), with_grad);
    let (n, p) = (lib.n(), lib.p());
    let grads = eval.grads.map(|gw| {
        gw.iter()
            .map(|g| DMatrix::from_fn(n, p, |r, c| if mask.get(r, c) { g[r * p + c] } else { 0.0 }))
            .collect()
    });
    Ok(CoefficientEval {
        loss: eval.loss,
        grads,
        steps: eval.steps,
    })
}

fn check_shapes(
    lib: &FeatureLibrary,
    coeffs: &CoefficientSet,
    mask_shape: (usize, usize),
    data: &EnvData,
) -> Result<()> {
    let shape = (lib.n(), lib.p());
    if mask_shape != shape {
        return Err(Error::invalid("mask shape does not match library"));
    }
    coeffs.check_shape(shape.0, shape.1)?;
    if coeffs.envs() != data.env_count() {
        return Err(Error::invalid(format!(
            "{} coefficient matrices for {} environments",
            coeffs.envs(),
            data.env_count()
        )));
    }
    if data.envs.iter().flatten().any(|t| t.dim() != lib.n()) {
        return Err(Error::invalid("trajectory dimension does not match library"));
    }
    Ok(())
}

/// Scheduled regularizer weight λ(1+s)^τ.
pub fn regularizer_weight(lambda: f64, s: f64, tau: u32) -> f64 {
    lambda * (1.0 + s).powi(tau as i32)
}

#[derive(Debug, Clone)]
pub struct MaskEval {
    pub loss: f64,
    pub data_loss: f64,
    pub penalty: f64,
    pub grad: Option<DMatrix<f64>>,
    pub steps: u64,
}

/// Mask loss: squared-error data term with σ(M̃) ∘ Ξ^(e) plus
/// `reg_weight · E · Σ σ(M̃ᵢⱼ)` over non-pruned entries.
pub fn mask_loss_grad(
    lib: &FeatureLibrary,
    relaxed: &RelaxedMask,
    coeffs: &CoefficientSet,
    data: &EnvData,
    term: DataTerm,
    reg_weight: f64,
    with_grad: bool,
) -> Result<MaskEval> {
    check_shapes(lib, coeffs, relaxed.shape(), data)?;
    let weights: Vec<Vec<f64>> = coeffs
        .0
        .iter()
        .map(|xi| effective_weights(relaxed, xi))
        .collect();
    let eval = data_term(lib, &weights, data, term, None, with_grad);
    let envs = coeffs.envs() as f64;
    let penalty = reg_weight * envs * relaxed.l1();
    let (n, p) = (lib.n(), lib.p());
    let grad = eval.grads.map(|gw| {
        DMatrix::from_fn(n, p, |r, c| {
            if relaxed.is_pruned(r, c) {
                return 0.0;
            }
            let z = relaxed.0[(r, c)];
            let s = sigmoid(z);
            let ds = s * (1.0 - s);
            let data: f64 = gw
                .iter()
                .zip(&coeffs.0)
                .map(|(g, xi)| g[r * p + c] * xi[(r, c)])
                .sum();
            data * ds + reg_weight * envs * ds
        })
    });
    Ok(MaskEval {
        loss: eval.loss + penalty,
        data_loss: eval.loss,
        penalty,
        grad,
        steps: eval.steps,
    })
}

/// Mean squared error of the continuous rollout from the observed state at
/// the last training point (index v−1) over the held-out tail, averaged over
/// every tail entry of every trajectory. +∞ on integration failure.
pub fn validation_loss<M: MaskWeights + ?Sized>(
    lib: &FeatureLibrary,
    mask: &M,
    coeffs: &CoefficientSet,
    data: &EnvData,
    fraction: f64,
    settings: RolloutSettings,
) -> Result<f64> {
    check_shapes(lib, coeffs, mask.shape(), data)?;
    let weights: Vec<Vec<f64>> = coeffs.0.iter().map(|xi| effective_weights(mask, xi)).collect();
    let cols = active_columns(lib.p(), &weights);
    let jobs = data.jobs();
    if let Some((_, t)) = jobs.iter().find(|(_, t)| t.len() < 5) {
        return Err(Error::invalid(format!(
            "validation needs at least 5 points per trajectory, got {}",
            t.len()
        )));
    }
    let results: Vec<Option<(f64, usize)>> = jobs
        .par_iter()
        .map(|&(e, traj)| {
            let m = traj.len();
            let v = EnvData::split_point(m, fraction);
            let seg = Segment {
                anchor: v - 1,
                last: m - 1,
            };
            let mut engine = RolloutEngine::new(lib, settings).with_columns(cols.clone());
            engine
                .segment(&weights[e], traj, seg, Penalty::Squared, None)
                .ok()
                .map(|l| (l, (m - v) * traj.dim()))
        })
        .collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in results {
        match r {
            Some((l, c)) => {
                sum += l;
                count += c;
            }
            None => return Ok(f64::INFINITY),
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spreme::mask::quantize_mask;

    #[test]
    fn split_points() {
        assert_eq!(EnvData::split_point(10, 0.8), 8);
        assert_eq!(EnvData::split_point(81, 0.8), 64);
    }

    #[test]
    fn regularizer_schedule() {
        assert_eq!(regularizer_weight(2.0, 0.0, 7), 2.0);
        assert!((regularizer_weight(1.0, 0.1, 10) - 1.1f64.powi(10)).abs() < 1e-15);
    }

    #[test]
    fn pruned_entries_carry_no_penalty() {
        let lib = FeatureLibrary::new(2, 1, false).unwrap();
        let relaxed = RelaxedMask(DMatrix::from_element(2, 3, f64::NEG_INFINITY));
        assert_eq!(relaxed.l1(), 0.0);
        assert_eq!(quantize_mask(&relaxed).count_ones(), 0);
        let _ = lib;
    }
}
