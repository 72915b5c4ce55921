//! Single-environment sparse regression: finite-difference derivatives and
//! sequentially thresholded least squares (STLSQ).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::library::FeatureLibrary;
use crate::spreme::loss::{validation_loss, EnvData};
use crate::spreme::{BinaryMask, CoefficientSet, RolloutSettings};

/// Ridge damping applied to the column-normalized least-squares problems.
pub const RIDGE: f64 = 1e-10;

/// Default threshold grid searched by [`fit_environment`].
pub const DEFAULT_THRESHOLDS: [f64; 6] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5];

/// Finite-difference stencil used for derivative estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeScheme {
    /// Central differences, three-point one-sided at both ends.
    #[default]
    SecondOrder,
    /// Five-point central differences, five-point one-sided near the ends.
    FourthOrder,
}

impl DerivativeScheme {
    pub fn min_points(self) -> usize {
        match self {
            DerivativeScheme::SecondOrder => 3,
            DerivativeScheme::FourthOrder => 5,
        }
    }
}

/// Second-order finite differences: central in the interior, three-point
/// one-sided at both ends. Returns an m×n matrix.
pub fn estimate_derivatives(traj: &Trajectory) -> Result<DMatrix<f64>> {
    estimate_derivatives_with(traj, DerivativeScheme::SecondOrder)
}

pub fn estimate_derivatives_with(traj: &Trajectory, scheme: DerivativeScheme) -> Result<DMatrix<f64>> {
    let m = traj.len();
    if m < scheme.min_points() {
        return Err(Error::invalid(format!(
            "derivative estimation needs at least {} points, got {m}",
            scheme.min_points()
        )));
    }
    let x = &traj.states;
    let h = traj.dt;
    let n = traj.dim();
    let mut d = DMatrix::zeros(m, n);
    for k in 0..n {
        let v = |i: usize| x[(i, k)];
        match scheme {
            DerivativeScheme::SecondOrder => {
                d[(0, k)] = (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h);
                for i in 1..m - 1 {
                    d[(i, k)] = (v(i + 1) - v(i - 1)) / (2.0 * h);
                }
                d[(m - 1, k)] = (3.0 * v(m - 1) - 4.0 * v(m - 2) + v(m - 3)) / (2.0 * h);
            }
            DerivativeScheme::FourthOrder => {
                let c = 12.0 * h;
                d[(0, k)] = (-25.0 * v(0) + 48.0 * v(1) - 36.0 * v(2) + 16.0 * v(3) - 3.0 * v(4)) / c;
                d[(1, k)] = (-3.0 * v(0) - 10.0 * v(1) + 18.0 * v(2) - 6.0 * v(3) + v(4)) / c;
                for i in 2..m - 2 {
                    d[(i, k)] = (v(i - 2) - 8.0 * v(i - 1) + 8.0 * v(i + 1) - v(i + 2)) / c;
                }
                let e = m - 1;
                d[(e - 1, k)] =
                    (3.0 * v(e) + 10.0 * v(e - 1) - 18.0 * v(e - 2) + 6.0 * v(e - 3) - v(e - 4)) / c;
                d[(e, k)] =
                    (25.0 * v(e) - 48.0 * v(e - 1) + 36.0 * v(e - 2) - 16.0 * v(e - 3) + 3.0 * v(e - 4)) / c;
            }
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StlsqConfig {
    pub prune_threshold: f64,
    pub l1_weight: f64,
    pub max_rounds: usize,
}

impl Default for StlsqConfig {
    fn default() -> Self {
        Self {
            prune_threshold: 0.05,
            l1_weight: 0.0,
            max_rounds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StlsqFit {
    /// n×p coefficients.
    pub coefficients: DMatrix<f64>,
    /// Output dimensions whose every column was pruned.
    pub empty_rows: Vec<usize>,
    /// Active-column count per output dimension after each round.
    pub active_history: Vec<Vec<usize>>,
}

/// A least-squares problem `derivs ≈ features · Ξᵀ` prepared once and reused
/// across thresholds: columns are scaled to unit norm and reduced by QR.
#[derive(Debug, Clone)]
pub struct StlsqProblem {
    /// Column norms of the feature matrix (0 for all-zero columns).
    scales: Vec<f64>,
    /// Upper-triangular factor of the scaled features (r×p, r = min(m, p)).
    r: DMatrix<f64>,
    /// Qᵀ · derivs (r×n).
    qtb: DMatrix<f64>,
}

impl StlsqProblem {
    pub fn new(features: &DMatrix<f64>, derivs: &DMatrix<f64>) -> Result<Self> {
        let (m, p) = features.shape();
        if derivs.nrows() != m {
            return Err(Error::invalid(format!(
                "{m} feature rows but {} derivative rows",
                derivs.nrows()
            )));
        }
        if features.iter().chain(derivs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("regression data must be finite"));
        }
        let scales: Vec<f64> = (0..p).map(|c| features.column(c).norm()).collect();
        let scaled = DMatrix::from_fn(m, p, |r, c| {
            if scales[c] > 0.0 {
                features[(r, c)] / scales[c]
            } else {
                0.0
            }
        });
        let qr = scaled.qr();
        let q = qr.q();
        let r = qr.r();
        let qtb = q.transpose() * derivs;
        Ok(Self { scales, r, qtb })
    }

    pub fn n_outputs(&self) -> usize {
        self.qtb.ncols()
    }

    pub fn n_features(&self) -> usize {
        self.scales.len()
    }

    /// Ridge-damped least squares over `active` columns for output `k`;
    /// returns unscaled coefficients for those columns.
    fn solve_active(&self, active: &[usize], k: usize, l1_weight: f64) -> Vec<f64> {
        if active.is_empty() {
            return Vec::new();
        }
        let rs = DMatrix::from_fn(self.r.nrows(), active.len(), |r, c| self.r[(r, active[c])]);
        let b: DVector<f64> = self.qtb.column(k).into_owned();
        let svd = rs.clone().svd(true, true);
        let u = svd.u.as_ref().expect("u requested");
        let vt = svd.v_t.as_ref().expect("v_t requested");
        let utb = u.transpose() * &b;
        let mut z = DVector::zeros(active.len());
        for (i, &s) in svd.singular_values.iter().enumerate() {
            let f = s / (s * s + RIDGE);
            z += vt.row(i).transpose() * (f * utb[i]);
        }
        if l1_weight > 0.0 {
            z = self.proximal_l1(&rs, &b, z, active, l1_weight, svd.singular_values.max());
        }
        active
            .iter()
            .zip(z.iter())
            .map(|(&c, &zi)| zi / self.scales[c])
            .collect()
    }

    /// ISTA on ‖R z − b‖² + Σ (λ/dᵢ)|zᵢ|, the column-scaled form of
    /// ‖X − Φ ξ‖² + λ‖ξ‖₁.
    fn proximal_l1(
        &self,
        rs: &DMatrix<f64>,
        b: &DVector<f64>,
        mut z: DVector<f64>,
        active: &[usize],
        l1_weight: f64,
        smax: f64,
    ) -> DVector<f64> {
        let lipschitz = 2.0 * smax * smax;
        if lipschitz == 0.0 {
            return z;
        }
        let step = 1.0 / lipschitz;
        let rtr = rs.transpose() * rs;
        let rtb = rs.transpose() * b;
        for _ in 0..5000 {
            let grad = (&rtr * &z - &rtb) * 2.0;
            let mut delta = 0.0f64;
            for i in 0..z.len() {
                let thr = step * l1_weight / self.scales[active[i]];
                let v = z[i] - step * grad[i];
                let next = v.signum() * (v.abs() - thr).max(0.0);
                delta = delta.max((next - z[i]).abs());
                z[i] = next;
            }
            if delta < 1e-14 {
                break;
            }
        }
        z
    }

    pub fn fit(&self, cfg: &StlsqConfig) -> Result<StlsqFit> {
        if !(cfg.prune_threshold >= 0.0) || !(cfg.l1_weight >= 0.0) || cfg.max_rounds == 0 {
            return Err(Error::invalid(
                "thresholds must be ≥ 0 and max_rounds ≥ 1",
            ));
        }
        let (n, p) = (self.n_outputs(), self.n_features());
        let mut coefficients = DMatrix::zeros(n, p);
        let mut empty_rows = Vec::new();
        let mut active_history = vec![Vec::new(); n];
        for k in 0..n {
            let mut active: Vec<usize> = (0..p).filter(|&c| self.scales[c] > 0.0).collect();
            let mut values = Vec::new();
            for _ in 0..cfg.max_rounds {
                values = self.solve_active(&active, k, cfg.l1_weight);
                let keep: Vec<usize> = (0..active.len())
                    .filter(|&i| values[i].abs() >= cfg.prune_threshold && values[i] != 0.0)
                    .collect();
                let changed = keep.len() != active.len();
                active = keep.iter().map(|&i| active[i]).collect();
                values = keep.iter().map(|&i| values[i]).collect();
                active_history[k].push(active.len());
                if !changed || active.is_empty() {
                    break;
                }
            }
            // Final refit on the surviving support so coefficients are
            // consistent with it.
            if !active.is_empty() {
                let refit = self.solve_active(&active, k, cfg.l1_weight);
                if refit.iter().all(|v| v.abs() >= cfg.prune_threshold) {
                    values = refit;
                }
            }
            if active.is_empty() {
                empty_rows.push(k);
                log::debug!("STLSQ pruned every candidate for output {k}");
            }
            for (&c, &v) in active.iter().zip(&values) {
                coefficients[(k, c)] = v;
            }
        }
        Ok(StlsqFit {
            coefficients,
            empty_rows,
            active_history,
        })
    }
}

/// STLSQ on `features` (m×p) against `derivs` (m×n); returns n×p Ξ.
pub fn stlsq_fit(
    features: &DMatrix<f64>,
    derivs: &DMatrix<f64>,
    cfg: &StlsqConfig,
) -> Result<StlsqFit> {
    StlsqProblem::new(features, derivs)?.fit(cfg)
}

/// Stacked features and finite-difference derivatives of several
/// trajectories.
pub fn regression_data(
    trajs: &[Trajectory],
    lib: &FeatureLibrary,
    scheme: DerivativeScheme,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut feats = Vec::new();
    let mut ders = Vec::new();
    for t in trajs {
        feats.push(lib.feature_matrix(&t.states)?);
        ders.push(estimate_derivatives_with(t, scheme)?);
    }
    let rows: usize = feats.iter().map(|f| f.nrows()).sum();
    let mut features = DMatrix::zeros(rows, lib.p());
    let mut derivs = DMatrix::zeros(rows, lib.n());
    let mut at = 0;
    for (f, d) in feats.iter().zip(&ders) {
        features.rows_mut(at, f.nrows()).copy_from(f);
        derivs.rows_mut(at, d.nrows()).copy_from(d);
        at += f.nrows();
    }
    Ok((features, derivs))
}

/// Settings of per-environment sparse regression with model selection.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub thresholds: Vec<f64>,
    pub scheme: DerivativeScheme,
    pub validation_fraction: f64,
    pub rollout: RolloutSettings,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            scheme: DerivativeScheme::SecondOrder,
            validation_fraction: 0.8,
            rollout: RolloutSettings::default(),
        }
    }
}

/// A scored STLSQ candidate.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub threshold: f64,
    pub coefficients: DMatrix<f64>,
    pub validation: f64,
}

/// Fits STLSQ on the training part of each trajectory for every threshold
/// and scores each fit by its extrapolation validation loss.
pub fn fit_environment_candidates(
    trajs: &[Trajectory],
    lib: &FeatureLibrary,
    settings: &FitSettings,
) -> Result<Vec<Candidate>> {
    if trajs.is_empty() {
        return Err(Error::invalid("need at least one trajectory"));
    }
    if settings.thresholds.is_empty() {
        return Err(Error::invalid("threshold grid is empty"));
    }
    let fraction = settings.validation_fraction;
    let data = EnvData::single(trajs.to_vec());
    let train = data.training_part(fraction);
    let (features, derivs) = regression_data(&train.envs[0], lib, settings.scheme)?;
    let problem = StlsqProblem::new(&features, &derivs)?;
    settings
        .thresholds
        .iter()
        .map(|&threshold| {
            let fit = problem.fit(&StlsqConfig {
                prune_threshold: threshold,
                ..StlsqConfig::default()
            })?;
            let coeffs = CoefficientSet(vec![fit.coefficients.clone()]);
            let support = BinaryMask::support_of(&fit.coefficients);
            let validation =
                validation_loss(lib, &support, &coeffs, &data, fraction, settings.rollout)?;
            Ok(Candidate {
                threshold,
                coefficients: fit.coefficients,
                validation,
            })
        })
        .collect()
}

/// Best candidate of [`fit_environment_candidates`] (first one on ties).
pub fn fit_environment(trajs: &[Trajectory], lib: &FeatureLibrary, settings: &FitSettings) -> Result<DMatrix<f64>> {
    let candidates = fit_environment_candidates(trajs, lib, settings)?;
    let mut best: Option<&Candidate> = None;
    for c in &candidates {
        if c.validation.is_finite() && best.is_none_or(|b| c.validation < b.validation) {
            best = Some(c);
        }
    }
    best.map(|c| c.coefficients.clone()).ok_or_else(|| {
        Error::InitializationFailure("every sparse-regression candidate diverged".into())
    })
}
