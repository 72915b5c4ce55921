//! Fixed-step RK4 (the solver used inside training) and an adaptive
//! Dormand–Prince 5(4) reference solver used to generate data.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Right-hand side of an autonomous-or-not ODE: `rhs(x, t, out)` writes dx/dt
/// into `out`, which has the same length as `x`.
pub trait Rhs {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]);
}

impl<F> Rhs for F
where
    F: Fn(&[f64], f64, &mut [f64]),
{
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self(x, t, out)
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Scratch buffers for RK4 so hot loops do not allocate.
#[derive(Debug, Clone)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    /// Advances `x` in place by one classical RK4 step. Returns `false` if any
    /// stage or the result is non-finite (in which case `x` may be garbage).
    pub fn step<R: Rhs + ?Sized>(&mut self, rhs: &R, x: &mut [f64], t: f64, dt: f64) -> bool {
        let n = x.len();
        let half = 0.5 * dt;
        rhs.eval(x, t, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + half * self.k1[i];
        }
        rhs.eval(&self.tmp, t + half, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + half * self.k2[i];
        }
        rhs.eval(&self.tmp, t + half, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + dt * self.k3[i];
        }
        rhs.eval(&self.tmp, t + dt, &mut self.k4);
        let sixth = dt / 6.0;
        for i in 0..n {
            x[i] += sixth * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        all_finite(&self.k1)
            && all_finite(&self.k2)
            && all_finite(&self.k3)
            && all_finite(&self.k4)
            && all_finite(x)
    }
}

/// One classical RK4 step from `(x, t)` with step `dt`.
pub fn rk4_step<R: Rhs + ?Sized>(rhs: &R, x: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {dt}")));
    }
    let mut ws = Rk4Workspace::new(x.len());
    let mut out = x.to_vec();
    if ws.step(rhs, &mut out, t, dt) {
        Ok(out)
    } else {
        Err(Error::IntegrationFailure {
            step: 0,
            time: t,
            reason: "non-finite RK4 stage".into(),
        })
    }
}

/// Number of grid intervals for a span, requiring it to be within 0.5 of an
/// integer multiple of `dt`.
pub fn grid_intervals(span: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive and finite, got {dt}")));
    }
    if !(span > 0.0) || !span.is_finite() {
        return Err(Error::invalid(format!("time span must be positive, got {span}")));
    }
    let ratio = span / dt;
    let k = ratio.round();
    if (ratio - k).abs() > 0.5 || k < 1.0 {
        return Err(Error::invalid(format!("span {span} is not a multiple of dt {dt}")));
    }
    Ok(k as usize)
}

/// A fixed-step RK4 solve on a uniform grid.
pub struct SolveRequest<'a, R: Rhs + ?Sized> {
    pub x0: &'a [f64],
    pub rhs: &'a R,
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
}

/// Repeated RK4 steps on the uniform grid `t_start, t_start + dt, ..., t_end`.
/// Row `i` of the result is the state at grid point `i`; row 0 is `x0`.
pub fn ode_solve<R: Rhs + ?Sized>(req: &SolveRequest<'_, R>) -> Result<DMatrix<f64>> {
    let steps = grid_intervals(req.t_end - req.t_start, req.dt)?;
    let n = req.x0.len();
    let mut out = DMatrix::zeros(steps + 1, n);
    let mut x = req.x0.to_vec();
    out.row_mut(0).copy_from_slice(&x);
    let mut ws = Rk4Workspace::new(n);
    for i in 0..steps {
        let t = req.t_start + i as f64 * req.dt;
        if !ws.step(req.rhs, &mut x, t, req.dt) {
            return Err(Error::IntegrationFailure {
                step: i + 1,
                time: t,
                reason: "non-finite RK4 stage".into(),
            });
        }
        out.row_mut(i + 1).copy_from_slice(&x);
    }
    Ok(out)
}

/// Absolute tolerance of [`reference_solve`].
pub const REFERENCE_ATOL: f64 = 1e-10;
/// Relative tolerance of [`reference_solve`].
pub const REFERENCE_RTOL: f64 = 1e-9;

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Error coefficients: fifth-order weights minus the embedded fourth-order ones.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct Dopri5<'a, R: Rhs + ?Sized> {
    rhs: &'a R,
    k: [Vec<f64>; 7],
    stage: Vec<f64>,
    y_new: Vec<f64>,
}

impl<'a, R: Rhs + ?Sized> Dopri5<'a, R> {
    fn new(rhs: &'a R, n: usize) -> Self {
        Self {
            rhs,
            k: std::array::from_fn(|_| vec![0.0; n]),
            stage: vec![0.0; n],
            y_new: vec![0.0; n],
        }
    }

    /// Attempts a step of size `h` from `(t, y)`, where `k[0]` already holds
    /// f(t, y). Leaves the candidate in `y_new`, f(t+h, y_new) in `k[6]`, and
    /// returns the scaled error norm.
    fn attempt(&mut self, t: f64, y: &[f64], h: f64) -> f64 {
        let n = y.len();
        let rows: [(f64, &[f64]); 5] = [
            (C2, &[A21]),
            (C3, &[A31, A32]),
            (C4, &[A41, A42, A43]),
            (C5, &[A51, A52, A53, A54]),
            (1.0, &[A61, A62, A63, A64, A65]),
        ];
        for (s, (c, a)) in rows.iter().enumerate() {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, aj) in a.iter().enumerate() {
                    acc += aj * self.k[j][i];
                }
                self.stage[i] = y[i] + h * acc;
            }
            self.rhs.eval(&self.stage, t + c * h, &mut self.k[s + 1]);
        }
        for i in 0..n {
            self.y_new[i] = y[i]
                + h * (B1 * self.k[0][i]
                    + B3 * self.k[2][i]
                    + B4 * self.k[3][i]
                    + B5 * self.k[4][i]
                    + B6 * self.k[5][i]);
        }
        self.rhs.eval(&self.y_new, t + h, &mut self.k[6]);
        let mut sum = 0.0;
        for i in 0..n {
            let err = h
                * (E1 * self.k[0][i]
                    + E3 * self.k[2][i]
                    + E4 * self.k[3][i]
                    + E5 * self.k[4][i]
                    + E6 * self.k[5][i]
                    + E7 * self.k[6][i]);
            let scale = REFERENCE_ATOL + REFERENCE_RTOL * y[i].abs().max(self.y_new[i].abs());
            sum += (err / scale).powi(2);
        }
        (sum / n as f64).sqrt()
    }
}

/// Adaptive Dormand–Prince 5(4) solve sampled on `grid`. Steps are clipped so
/// every grid point is hit exactly; row `i` is the state at `grid[i]`.
pub fn reference_solve<R: Rhs + ?Sized>(rhs: &R, x0: &[f64], grid: &[f64]) -> Result<DMatrix<f64>> {
    let n = x0.len();
    if grid.is_empty() {
        return Err(Error::invalid("empty time grid"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("time grid must be strictly increasing"));
    }
    if !all_finite(x0) {
        return Err(Error::invalid("initial state is not finite"));
    }
    let mut out = DMatrix::zeros(grid.len(), n);
    out.row_mut(0).copy_from_slice(x0);
    if grid.len() == 1 {
        return Ok(out);
    }

    let mut solver = Dopri5::new(rhs, n);
    let mut t = grid[0];
    let mut y = x0.to_vec();
    rhs.eval(&y, t, &mut solver.k[0]);
    let mut h = initial_step(&y, &solver.k[0], grid[grid.len() - 1] - t);
    let mut steps = 0usize;

    for (gi, &target) in grid.iter().enumerate().skip(1) {
        while t < target {
            let remaining = target - t;
            // Land exactly on the grid point when close.
            let clipped = remaining <= h * 1.000_001;
            let h_try = if clipped { remaining } else { h };
            let min_step = 16.0 * f64::EPSILON * t.abs().max(1.0);
            if h_try < min_step {
                return Err(Error::IntegrationFailure {
                    step: steps,
                    time: t,
                    reason: "step size underflow".into(),
                });
            }
            let err = solver.attempt(t, &y, h_try);
            let finite = err.is_finite() && all_finite(&solver.y_new);
            if finite && err <= 1.0 {
                t = if clipped { target } else { t + h_try };
                y.copy_from_slice(&solver.y_new);
                let (first, rest) = solver.k.split_at_mut(1);
                first[0].copy_from_slice(&rest[5]);
                steps += 1;
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                if !clipped || factor < 1.0 {
                    h = h_try * factor;
                }
            } else {
                let factor = if finite {
                    (0.9 * err.powf(-0.2)).clamp(0.1, 0.9)
                } else {
                    0.25
                };
                h = h_try * factor;
            }
        }
        if !all_finite(&y) {
            return Err(Error::IntegrationFailure {
                step: steps,
                time: t,
                reason: "non-finite state".into(),
            });
        }
        out.row_mut(gi).copy_from_slice(&y);
    }
    Ok(out)
}

fn initial_step(y: &[f64], f0: &[f64], span: f64) -> f64 {
    let scale = |i: usize| REFERENCE_ATOL + REFERENCE_RTOL * y[i].abs();
    let d0 = (0..y.len()).map(|i| (y[i] / scale(i)).powi(2)).sum::<f64>().sqrt();
    let d1 = (0..y.len()).map(|i| (f0[i] / scale(i)).powi(2)).sum::<f64>().sqrt();
    let h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h.min(span).max(1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = -x[0];
    }

    #[test]
    fn zero_field_is_identity() {
        let zero = |_: &[f64], _: f64, out: &mut [f64]| out.fill(0.0);
        let x = rk4_step(&zero, &[1.5, -2.0], 0.0, 0.3).unwrap();
        assert_eq!(x, vec![1.5, -2.0]);
    }

    #[test]
    fn constant_field_is_exact() {
        let c = |_: &[f64], _: f64, out: &mut [f64]| out.copy_from_slice(&[2.0, -0.5]);
        let x = rk4_step(&c, &[1.0, 1.0], 0.0, 0.1).unwrap();
        assert!((x[0] - 1.2).abs() < 1e-15);
        assert!((x[1] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn single_decay_step_matches_exponential() {
        let x = rk4_step(&decay, &[1.0], 0.0, 0.1).unwrap();
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn nonpositive_step_rejected() {
        assert!(matches!(
            rk4_step(&decay, &[1.0], 0.0, 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn non_finite_stage_is_integration_failure() {
        let blow = |x: &[f64], _: f64, out: &mut [f64]| out[0] = 1.0 / (x[0] - 1.0);
        assert!(matches!(
            rk4_step(&blow, &[1.0], 0.0, 0.1),
            Err(Error::IntegrationFailure { .. })
        ));
    }

    #[test]
    fn ode_solve_grid_and_accuracy() {
        let req = SolveRequest {
            x0: &[1.0],
            rhs: &decay,
            t_start: 0.0,
            t_end: 1.0,
            dt: 0.05,
        };
        let out = ode_solve(&req).unwrap();
        assert_eq!(out.nrows(), 21);
        assert_eq!(out[(0, 0)], 1.0);
        assert!((out[(20, 0)] - (-1.0f64).exp()).abs() < 1e-7);

        let one = SolveRequest {
            t_end: 0.05,
            ..req
        };
        let out = ode_solve(&one).unwrap();
        assert_eq!(out.nrows(), 2);
        assert_eq!(out[(1, 0)], rk4_step(&decay, &[1.0], 0.0, 0.05).unwrap()[0]);
    }

    #[test]
    fn ode_solve_rejects_bad_requests() {
        let bad = SolveRequest {
            x0: &[1.0],
            rhs: &decay,
            t_start: 1.0,
            t_end: 0.0,
            dt: 0.1,
        };
        assert!(ode_solve(&bad).is_err());
    }

    /// Global error at t = 1 for dx/dt = -x.
    pub(crate) fn decay_global_error(dt: f64) -> f64 {
        let req = SolveRequest {
            x0: &[1.0],
            rhs: &decay,
            t_start: 0.0,
            t_end: 1.0,
            dt,
        };
        let out = ode_solve(&req).unwrap();
        (out[(out.nrows() - 1, 0)] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn rk4_convergence_order() {
        for dt in [0.1, 0.05] {
            let r = decay_global_error(dt) / decay_global_error(dt / 2.0);
            assert!((14.0..=18.0).contains(&r), "error ratio {r} at dt {dt}");
        }
    }

    #[test]
    fn reference_single_point_grid() {
        let out = reference_solve(&decay, &[3.0], &[0.0]).unwrap();
        assert_eq!(out.nrows(), 1);
        assert_eq!(out[(0, 0)], 3.0);
    }

    #[test]
    fn reference_harmonic_period() {
        let osc = |x: &[f64], _: f64, out: &mut [f64]| {
            out[0] = x[1];
            out[1] = -x[0];
        };
        let period = 2.0 * std::f64::consts::PI;
        let out = reference_solve(&osc, &[1.0, 0.0], &[0.0, period / 2.0, period]).unwrap();
        assert!((out[(2, 0)] - 1.0).abs() < 1e-7);
        assert!(out[(2, 1)].abs() < 1e-7);
        assert!((out[(1, 0)] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn reference_rejects_unsorted_grid() {
        assert!(reference_solve(&decay, &[1.0], &[0.0, 0.2, 0.1]).is_err());
    }

    #[test]
    fn reference_matches_fine_rk4_on_lorenz() {
        let lorenz = |x: &[f64], _: f64, out: &mut [f64]| {
            out[0] = 10.0 * (x[1] - x[0]);
            out[1] = x[0] * (28.0 - x[2]) - x[1];
            out[2] = x[0] * x[1] - 8.0 / 3.0 * x[2];
        };
        let x0 = [1.0, 1.0, 1.0];
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
        let reference = reference_solve(&lorenz, &x0, &grid).unwrap();
        let fine = ode_solve(&SolveRequest {
            x0: &x0,
            rhs: &lorenz,
            t_start: 0.0,
            t_end: 1.0,
            dt: 0.0005,
        })
        .unwrap();
        for i in 0..grid.len() {
            for k in 0..3 {
                let d = (reference[(i, k)] - fine[(i * 100, k)]).abs();
                assert!(d < 1e-6, "row {i} dim {k}: {d}");
            }
        }
    }

    #[test]
    fn time_translation_invariance() {
        let a = ode_solve(&SolveRequest {
            x0: &[0.7],
            rhs: &decay,
            t_start: 0.0,
            t_end: 2.0,
            dt: 0.1,
        })
        .unwrap();
        let b = ode_solve(&SolveRequest {
            x0: &[0.7],
            rhs: &decay,
            t_start: 5.0,
            t_end: 7.0,
            dt: 0.1,
        })
        .unwrap();
        assert_eq!(a, b);
    }
}
