//! η-step rollouts of the linear model through RK4 and their exact reverse
//! pass (discretize-then-differentiate).
//!
//! Every quantity here is a function of the effective weight matrix
//! `W = mask ∘ Ξ` (row-major n×p). The reverse pass accumulates ∂L/∂W; the
//! chain rule to Ξ or M̃ is applied by the callers.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::library::FeatureLibrary;

/// How anchors for η-step prediction are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorRule {
    /// Anchor of target j is η·⌊(j−1)/η⌋.
    #[default]
    Floor,
    /// Anchor of target j = i + η is η·⌈i/η⌉ (clamped at 0).
    Ceiling,
}

/// Most recent multiple of `eta` not exceeding `i`.
pub fn eta_anchor(i: usize, eta: usize) -> usize {
    assert!(eta >= 1, "eta must be at least 1");
    eta * (i / eta)
}

/// Anchor index for target `j ≥ 1` under `rule`.
pub fn target_anchor(j: usize, eta: usize, rule: AnchorRule) -> usize {
    assert!(j >= 1 && eta >= 1);
    match rule {
        AnchorRule::Floor => eta_anchor(j - 1, eta),
        AnchorRule::Ceiling => {
            // i = j - η may be negative; ⌈i/η⌉ is then 0.
            let i = j as i64 - eta as i64;
            if i <= 0 {
                0
            } else {
                eta * (i as usize).div_ceil(eta)
            }
        }
    }
}

/// Prediction horizon: a fixed number of steps, or the whole trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Horizon {
    Steps(usize),
    Full(FullHorizon),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullHorizon {
    Full,
}

impl Horizon {
    pub const FULL: Horizon = Horizon::Full(FullHorizon::Full);

    /// η for a trajectory with `m` points.
    pub fn steps_for(self, m: usize) -> usize {
        match self {
            Horizon::Steps(k) => k.max(1),
            Horizon::Full(_) => m.max(1),
        }
    }
}

/// Elementwise residual penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Huber(f64),
    Squared,
}

impl Penalty {
    pub fn value(self, r: f64) -> f64 {
        match self {
            Penalty::Huber(delta) => {
                let a = r.abs();
                if a <= delta {
                    0.5 * r * r
                } else {
                    delta * (a - 0.5 * delta)
                }
            }
            Penalty::Squared => r * r,
        }
    }

    pub fn derivative(self, r: f64) -> f64 {
        match self {
            Penalty::Huber(delta) => {
                if r.abs() <= delta {
                    r
                } else {
                    delta * r.signum()
                }
            }
            Penalty::Squared => 2.0 * r,
        }
    }
}

/// A continuous rollout from the observed state at `anchor` with losses at
/// every index in `anchor+1 ..= last`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub anchor: usize,
    pub last: usize,
}

/// Splits targets `1 ..= len-1` into segments sharing an anchor.
pub fn eta_segments(len: usize, eta: usize, rule: AnchorRule) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for j in 1..len {
        let a = target_anchor(j, eta, rule);
        match out.last_mut() {
            Some(seg) if seg.anchor == a && seg.last + 1 == j => seg.last = j,
            _ => out.push(Segment { anchor: a, last: j }),
        }
    }
    out
}

/// Solver settings shared by all rollouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSettings {
    /// RK4 steps per observation interval.
    pub substeps: usize,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        Self { substeps: 1 }
    }
}

/// Reusable buffers for forward and reverse passes over one library.
pub struct RolloutEngine<'a> {
    lib: &'a FeatureLibrary,
    settings: RolloutSettings,
    /// Feature columns evaluated; weights outside them must be zero and
    /// their gradient entries are left untouched.
    cols: Vec<usize>,
    /// Stage inputs y1..y4 for each RK4 substep of the current segment.
    stages: Vec<f64>,
    /// Loss derivative w.r.t. the prediction at each target of the segment.
    dpred: Vec<f64>,
    phi: Vec<f64>,
    jac: Vec<f64>,
    ks: [Vec<f64>; 4],
    x: Vec<f64>,
    y: Vec<f64>,
    pub steps: u64,
}

impl<'a> RolloutEngine<'a> {
    pub fn new(lib: &'a FeatureLibrary, settings: RolloutSettings) -> Self {
        let (n, p) = (lib.n(), lib.p());
        Self {
            lib,
            settings: RolloutSettings {
                substeps: settings.substeps.max(1),
            },
            cols: (0..p).collect(),
            stages: Vec::new(),
            dpred: Vec::new(),
            phi: vec![0.0; p],
            jac: vec![0.0; p * n],
            ks: std::array::from_fn(|_| vec![0.0; n]),
            x: vec![0.0; n],
            y: vec![0.0; n],
            steps: 0,
        }
    }

    /// Restricts evaluation to the feature columns `cols`.
    pub fn with_columns(mut self, cols: Vec<usize>) -> Self {
        let n = self.lib.n();
        self.phi = vec![0.0; cols.len()];
        self.jac = vec![0.0; cols.len() * n];
        self.cols = cols;
        self
    }

    fn apply(&mut self, w: &[f64], y: &[f64], out_k: usize) {
        let (n, p) = (self.lib.n(), self.lib.p());
        self.lib.eval_columns_into(y, &self.cols, &mut self.phi);
        let k = &mut self.ks[out_k];
        for r in 0..n {
            let row = &w[r * p..(r + 1) * p];
            k[r] = self.cols.iter().zip(&self.phi).map(|(&c, b)| row[c] * b).sum();
        }
    }

    /// One RK4 step of size `h` on `self.x`, storing the stage inputs at
    /// `stages[base..]` when `base` is given.
    fn substep(&mut self, w: &[f64], h: f64, base: Option<usize>) {
        let n = self.lib.n();
        let mut y = std::mem::take(&mut self.y);
        y.copy_from_slice(&self.x);
        for stage in 0..4 {
            if stage > 0 {
                let c = if stage == 3 { h } else { 0.5 * h };
                for k in 0..n {
                    y[k] = self.x[k] + c * self.ks[stage - 1][k];
                }
            }
            if let Some(b) = base {
                self.stages[b + stage * n..b + (stage + 1) * n].copy_from_slice(&y);
            }
            self.apply(w, &y, stage);
        }
        for k in 0..n {
            self.x[k] += h / 6.0 * (self.ks[0][k] + 2.0 * self.ks[1][k] + 2.0 * self.ks[2][k] + self.ks[3][k]);
        }
        self.y = y;
        self.steps += 1;
    }

    /// Loss of one segment and, if `grad` is given, accumulation of ∂L/∂W.
    /// Returns `Err` with the failing target index on a non-finite state.
    pub fn segment(
        &mut self,
        w: &[f64],
        traj: &Trajectory,
        seg: Segment,
        penalty: Penalty,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        let n = self.lib.n();
        let sub = self.settings.substeps;
        let h = traj.dt / sub as f64;
        let targets = seg.last - seg.anchor;
        let record = grad.is_some();
        if record {
            self.stages.resize(targets * sub * 4 * n, 0.0);
            self.dpred.resize(targets * n, 0.0);
        }
        for k in 0..n {
            self.x[k] = traj.states[(seg.anchor, k)];
        }
        let mut loss = 0.0;
        for t in 0..targets {
            for s in 0..sub {
                let base = record.then_some(((t * sub + s) * 4) * n);
                self.substep(w, h, base);
            }
            let j = seg.anchor + t + 1;
            if self.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationFailure {
                    step: j,
                    time: traj.times[j],
                    reason: "non-finite model rollout".into(),
                });
            }
            for k in 0..n {
                let r = self.x[k] - traj.states[(j, k)];
                loss += penalty.value(r);
                if record {
                    self.dpred[t * n + k] = penalty.derivative(r);
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::IntegrationFailure {
                step: seg.last,
                time: traj.times[seg.last],
                reason: "non-finite loss".into(),
            });
        }
        if let Some(grad) = grad {
            self.reverse(w, targets, h, grad);
        }
        Ok(loss)
    }

    fn reverse(&mut self, w: &[f64], targets: usize, h: f64, grad: &mut [f64]) {
        let (n, p) = (self.lib.n(), self.lib.p());
        let sub = self.settings.substeps;
        let mut xbar = vec![0.0; n];
        let mut kbar: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
        let q = self.cols.len();
        let mut g = vec![0.0; q];
        let mut ybar = vec![0.0; n];
        for t in (0..targets).rev() {
            for k in 0..n {
                xbar[k] += self.dpred[t * n + k];
            }
            for s in (0..sub).rev() {
                let base = ((t * sub + s) * 4) * n;
                for k in 0..n {
                    kbar[0][k] = h / 6.0 * xbar[k];
                    kbar[1][k] = h / 3.0 * xbar[k];
                    kbar[2][k] = h / 3.0 * xbar[k];
                    kbar[3][k] = h / 6.0 * xbar[k];
                }
                // Stages in reverse: y4 = x + h k3, y3 = x + h/2 k2, y2 = x + h/2 k1, y1 = x.
                for stage in (0..4).rev() {
                    let y = &self.stages[base + stage * n..base + (stage + 1) * n];
                    self.lib
                        .eval_columns_with_jacobian(y, &self.cols, &mut self.phi, &mut self.jac);
                    let kb = &kbar[stage];
                    // ∂L/∂W += k̄ ⊗ Φ(y); g = Wᵀ k̄.
                    g.fill(0.0);
                    for r in 0..n {
                        let kr = kb[r];
                        if kr == 0.0 {
                            continue;
                        }
                        let wrow = &w[r * p..(r + 1) * p];
                        let grow = &mut grad[r * p..(r + 1) * p];
                        for (j, &c) in self.cols.iter().enumerate() {
                            grow[c] += kr * self.phi[j];
                            g[j] += wrow[c] * kr;
                        }
                    }
                    // ȳ = Jᵀ g.
                    ybar.fill(0.0);
                    for i in 0..q {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for k in 0..n {
                            ybar[k] += gi * self.jac[i * n + k];
                        }
                    }
                    for k in 0..n {
                        xbar[k] += ybar[k];
                    }
                    let coef = match stage {
                        3 => h,
                        2 | 1 => 0.5 * h,
                        _ => 0.0,
                    };
                    if stage > 0 {
                        for k in 0..n {
                            kbar[stage - 1][k] += coef * ybar[k];
                        }
                    }
                }
            }
        }
    }

    /// Plain forward rollout of `steps` observation intervals from `x0` with
    /// the given interval `dt`; returns the (steps+1)×n state matrix.
    pub fn rollout(&mut self, w: &[f64], x0: &[f64], dt: f64, steps: usize) -> Result<DMatrix<f64>> {
        let (n, p) = (self.lib.n(), self.lib.p());
        if w.len() != n * p || x0.len() != n {
            return Err(Error::invalid("weights or initial state do not match the library"));
        }
        let sub = self.settings.substeps;
        let h = dt / sub as f64;
        let mut out = DMatrix::zeros(steps + 1, n);
        self.x.copy_from_slice(x0);
        out.row_mut(0).copy_from_slice(&self.x);
        for i in 0..steps {
            for _ in 0..sub {
                self.substep(w, h, None);
            }
            if self.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationFailure {
                    step: i + 1,
                    time: (i + 1) as f64 * dt,
                    reason: "non-finite model rollout".into(),
                });
            }
            out.row_mut(i + 1).copy_from_slice(&self.x);
        }
        Ok(out)
    }
}

/// η-step predictions for every index of `traj`: row 0 is the observed
/// initial state; row j is the rollout from the observed anchor of j.
pub fn predict_states(
    lib: &FeatureLibrary,
    weights: &[f64],
    traj: &Trajectory,
    eta: usize,
    rule: AnchorRule,
    settings: RolloutSettings,
) -> Result<DMatrix<f64>> {
    if eta == 0 {
        return Err(Error::invalid("eta must be at least 1"));
    }
    if traj.dim() != lib.n() {
        return Err(Error::invalid("trajectory dimension does not match library"));
    }
    let m = traj.len();
    let mut engine = RolloutEngine::new(lib, settings);
    let mut out = DMatrix::zeros(m, lib.n());
    out.row_mut(0).copy_from_slice(&traj.state(0));
    for seg in eta_segments(m, eta, rule) {
        let roll = engine.rollout(
            weights,
            &traj.state(seg.anchor),
            traj.dt,
            seg.last - seg.anchor,
        )?;
        for t in 1..roll.nrows() {
            out.row_mut(seg.anchor + t).copy_from(&roll.row(t));
        }
    }
    Ok(out)
}
