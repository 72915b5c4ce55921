//! The four benchmark systems: equations, parameter and initial-state
//! samplers, and their ground-truth sparse structure in a feature library.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::Rhs;
use crate::library::{FeatureLibrary, FeatureTerm, TrigTerm};
use crate::spreme::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    #[serde(rename = "linear")]
    Linear3D,
    Lorenz,
    LotkaVolterra,
    DampedPendulum,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [
        SystemKind::Linear3D,
        SystemKind::Lorenz,
        SystemKind::LotkaVolterra,
        SystemKind::DampedPendulum,
    ];

    pub fn dim(self) -> usize {
        match self {
            SystemKind::Linear3D | SystemKind::Lorenz => 3,
            SystemKind::LotkaVolterra | SystemKind::DampedPendulum => 2,
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            SystemKind::Linear3D => &["alpha", "beta", "gamma", "delta", "omega"],
            SystemKind::Lorenz => &["sigma", "rho", "beta"],
            SystemKind::LotkaVolterra => &["alpha", "beta", "gamma", "delta"],
            SystemKind::DampedPendulum => &["alpha", "omega0"],
        }
    }

    /// Means of the environment-parameter distribution, in `param_names`
    /// order.
    pub fn default_param_mean(self) -> Vec<f64> {
        match self {
            SystemKind::Linear3D => vec![-0.1, 2.0, -2.0, -0.1, -0.3],
            SystemKind::Lorenz => vec![10.0, 28.0, 8.0 / 3.0],
            SystemKind::LotkaVolterra => vec![0.5, 0.75, 0.5, 0.75],
            SystemKind::DampedPendulum => vec![0.5, 0.98],
        }
    }

    pub fn default_param_variance(self) -> f64 {
        match self {
            SystemKind::Linear3D | SystemKind::DampedPendulum => 0.01,
            SystemKind::Lorenz => 0.02,
            SystemKind::LotkaVolterra => 0.0,
        }
    }

    /// Candidate library used for this system: degree-5 polynomials, plus
    /// trig terms for the pendulum.
    pub fn default_library(self) -> FeatureLibrary {
        FeatureLibrary::new(self.dim(), 5, self == SystemKind::DampedPendulum)
            .expect("built-in library parameters are valid")
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Linear3D => "linear",
            SystemKind::Lorenz => "lorenz",
            SystemKind::LotkaVolterra => "lotka-volterra",
            SystemKind::DampedPendulum => "damped-pendulum",
        }
    }

    /// Ground-truth terms: `(row, term, sign/param expression)` is encoded by
    /// [`true_coefficients`]; this is just the support.
    pub fn true_support(self, lib: &FeatureLibrary) -> Result<BinaryMask> {
        let params = SystemParams::new(self, vec![1.0; self.param_names().len()])?;
        let coeffs = true_coefficients(&params, lib)?;
        Ok(BinaryMask::from_fn(lib.n(), lib.p(), |k, i| coeffs[(k, i)] != 0.0))
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "linear" | "linear3d" => Ok(SystemKind::Linear3D),
            "lorenz" => Ok(SystemKind::Lorenz),
            "lotka-volterra" | "lv" => Ok(SystemKind::LotkaVolterra),
            "damped-pendulum" | "dp" | "pendulum" => Ok(SystemKind::DampedPendulum),
            other => Err(Error::invalid(format!("unknown system '{other}'"))),
        }
    }
}

/// Named real parameters of one environment, stored in
/// [`SystemKind::param_names`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub kind: SystemKind,
    pub values: Vec<f64>,
}

impl SystemParams {
    pub fn new(kind: SystemKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != kind.param_names().len() {
            return Err(Error::invalid(format!(
                "{kind} takes {} parameters, got {}",
                kind.param_names().len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(Self { kind, values })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.kind
            .param_names()
            .iter()
            .position(|&n| n == name)
            .map(|i| self.values[i])
    }
}

/// True right-hand side of a system as an [`Rhs`].
#[derive(Debug, Clone)]
pub struct TrueRhs {
    params: SystemParams,
}

impl TrueRhs {
    pub fn new(params: SystemParams) -> Self {
        Self { params }
    }
}

impl Rhs for TrueRhs {
    fn eval(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        rhs_unchecked(&self.params, x, out);
    }
}

fn rhs_unchecked(params: &SystemParams, x: &[f64], out: &mut [f64]) {
    let p = &params.values;
    match params.kind {
        SystemKind::Linear3D => {
            out[0] = p[0] * x[0] + p[1] * x[1];
            out[1] = p[2] * x[0] + p[3] * x[1];
            out[2] = p[4] * x[2];
        }
        SystemKind::Lorenz => {
            let (sigma, rho, beta) = (p[0], p[1], p[2]);
            out[0] = sigma * (x[1] - x[0]);
            out[1] = x[0] * (rho - x[2]) - x[1];
            out[2] = x[0] * x[1] - beta * x[2];
        }
        SystemKind::LotkaVolterra => {
            let (alpha, beta, gamma, delta) = (p[0], p[1], p[2], p[3]);
            out[0] = alpha * x[0] - beta * x[0] * x[1];
            out[1] = delta * x[0] * x[1] - gamma * x[1];
        }
        SystemKind::DampedPendulum => {
            let (alpha, omega0) = (p[0], p[1]);
            out[0] = x[1];
            out[1] = -alpha * x[1] - omega0 * omega0 * x[0].sin();
        }
    }
}

/// dx/dt of the system at `state`.
pub fn eval_true_rhs(params: &SystemParams, state: &[f64]) -> Result<Vec<f64>> {
    let n = params.kind.dim();
    if state.len() != n {
        return Err(Error::invalid(format!(
            "{} state must have dimension {n}, got {}",
            params.kind,
            state.len()
        )));
    }
    let mut out = vec![0.0; n];
    rhs_unchecked(params, state, &mut out);
    Ok(out)
}

/// Coefficient matrix Ξ (n×p) that reproduces the system's equations in
/// `lib`. Fails if the library lacks a needed term.
pub fn true_coefficients(params: &SystemParams, lib: &FeatureLibrary) -> Result<DMatrix<f64>> {
    let kind = params.kind;
    if lib.n() != kind.dim() {
        return Err(Error::invalid(format!(
            "library dimension {} does not match {kind}",
            lib.n()
        )));
    }
    let p = &params.values;
    let mono = |e: &[u32]| FeatureTerm::Monomial(e.to_vec());
    let entries: Vec<(usize, FeatureTerm, f64)> = match kind {
        SystemKind::Linear3D => vec![
            (0, mono(&[1, 0, 0]), p[0]),
            (0, mono(&[0, 1, 0]), p[1]),
            (1, mono(&[1, 0, 0]), p[2]),
            (1, mono(&[0, 1, 0]), p[3]),
            (2, mono(&[0, 0, 1]), p[4]),
        ],
        SystemKind::Lorenz => vec![
            (0, mono(&[1, 0, 0]), -p[0]),
            (0, mono(&[0, 1, 0]), p[0]),
            (1, mono(&[1, 0, 0]), p[1]),
            (1, mono(&[0, 1, 0]), -1.0),
            (1, mono(&[1, 0, 1]), -1.0),
            (2, mono(&[1, 1, 0]), 1.0),
            (2, mono(&[0, 0, 1]), -p[2]),
        ],
        SystemKind::LotkaVolterra => vec![
            (0, mono(&[1, 0]), p[0]),
            (0, mono(&[1, 1]), -p[1]),
            (1, mono(&[1, 1]), p[3]),
            (1, mono(&[0, 1]), -p[2]),
        ],
        SystemKind::DampedPendulum => vec![
            (0, mono(&[0, 1]), 1.0),
            (1, mono(&[0, 1]), -p[0]),
            (1, FeatureTerm::Trig(TrigTerm::SinX1), -p[1] * p[1]),
        ],
    };
    let mut xi = DMatrix::zeros(lib.n(), lib.p());
    for (row, term, value) in entries {
        let col = lib
            .index_of(&term)
            .ok_or_else(|| Error::invalid(format!("library lacks a term needed by {kind}")))?;
        xi[(row, col)] = value;
    }
    Ok(xi)
}

/// Fixed 3×3 Lotka–Volterra environment grid: α = γ = 0.5,
/// β, δ ∈ {0.5, 0.75, 1.0}.
pub fn lotka_volterra_grid() -> Vec<SystemParams> {
    let levels = [0.5, 0.75, 1.0];
    let mut out = Vec::with_capacity(9);
    for &beta in &levels {
        for &delta in &levels {
            out.push(SystemParams {
                kind: SystemKind::LotkaVolterra,
                values: vec![0.5, beta, 0.5, delta],
            });
        }
    }
    out
}

/// Draws environment parameters. Each parameter is Normal(mean_i, variance);
/// Lorenz draws are resampled until all parameters are positive. For
/// Lotka–Volterra a uniformly chosen entry of [`lotka_volterra_grid`] is
/// returned and `mean`/`variance` only need to be well-formed.
pub fn sample_params<R: Rng + ?Sized>(
    kind: SystemKind,
    mean: &[f64],
    variance: f64,
    rng: &mut R,
) -> Result<SystemParams> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::invalid(format!("variance must be ≥ 0, got {variance}")));
    }
    if mean.len() != kind.param_names().len() {
        return Err(Error::invalid(format!(
            "{kind} takes {} parameter means, got {}",
            kind.param_names().len(),
            mean.len()
        )));
    }
    if kind == SystemKind::LotkaVolterra {
        let grid = lotka_volterra_grid();
        let i = rng.random_range(0..grid.len());
        return Ok(grid[i].clone());
    }
    let std = variance.sqrt();
    loop {
        let values: Vec<f64> = mean
            .iter()
            .map(|&m| {
                if std == 0.0 {
                    m
                } else {
                    Normal::new(m, std).expect("finite std").sample(rng)
                }
            })
            .collect();
        if kind == SystemKind::Lorenz && values.iter().any(|&v| v <= 0.0) {
            continue;
        }
        return SystemParams::new(kind, values);
    }
}

/// Parameters of a held-out Lotka–Volterra environment: β, δ uniform in
/// [0.5, 1.0], α = γ = 0.5.
pub fn sample_heldout_lotka_volterra<R: Rng + ?Sized>(rng: &mut R) -> SystemParams {
    let beta = rng.random_range(0.5..=1.0);
    let delta = rng.random_range(0.5..=1.0);
    SystemParams {
        kind: SystemKind::LotkaVolterra,
        values: vec![0.5, beta, 0.5, delta],
    }
}

/// Radius of the excluded neighborhood around the pendulum's equilibrium.
const PENDULUM_MIN_ANGLE: f64 = 0.1;

pub fn sample_initial_state<R: Rng + ?Sized>(kind: SystemKind, rng: &mut R) -> Vec<f64> {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    match kind {
        SystemKind::Linear3D | SystemKind::Lorenz => {
            (0..3).map(|_| std_normal.sample(rng)).collect()
        }
        SystemKind::LotkaVolterra => (0..2)
            .map(|_| loop {
                let v = 1.0 + std_normal.sample(rng);
                if v > 0.0 {
                    break v;
                }
            })
            .collect(),
        SystemKind::DampedPendulum => {
            // |θ| uniform on [0.1, π/2] with a random sign.
            let mag = rng.random_range(PENDULUM_MIN_ANGLE..=FRAC_PI_2);
            let theta = if rng.random_bool(0.5) { mag } else { -mag };
            vec![theta, 0.0]
        }
    }
}
