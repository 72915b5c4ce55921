//! Shared sparse mask with per-environment coefficients, trained by
//! alternating gradient steps through the RK4 solver.

pub mod adapt;
pub mod loss;
pub mod mask;
pub mod model;
pub mod optim;
pub mod rollout;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sindy::{DerivativeScheme, FitSettings, DEFAULT_THRESHOLDS};

pub use adapt::{adapt, AdaptConfig, AdaptOutcome};
pub use loss::{
    coefficient_loss_grad, mask_loss_grad, regularizer_weight, validation_loss, DataTerm, EnvData,
};
pub use mask::{
    init_relaxed_mask, prune_coefficients, prune_relaxed_mask, quantize_mask, BinaryMask,
    CoefficientSet, RelaxedMask,
};
pub use model::{Method, SpremeModel};
pub use rollout::{
    eta_anchor, predict_states, target_anchor, AnchorRule, Horizon, Penalty, RolloutSettings,
};
pub use train::{init_coefficients, train, IterationRecord, TrainReport};

/// Training and adaptation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Weight of the L1 penalty on σ(M̃).
    pub lambda: f64,
    /// Growth rate of the penalty schedule (1+s)^τ.
    pub s: f64,
    pub alpha_xi: f64,
    pub alpha_m: f64,
    pub kappa_xi: f64,
    pub kappa_m: f64,
    /// Prediction horizon of the coefficient loss.
    pub eta_coeff: usize,
    /// Prediction horizon of the mask loss.
    pub eta_mask: Horizon,
    pub outer_iters: usize,
    pub init_alpha: f64,
    pub huber_delta: f64,
    pub inner_steps: usize,
    /// RK4 steps per observation interval.
    pub substeps: usize,
    pub anchor_rule: AnchorRule,
    pub validation_fraction: f64,
    /// STLSQ thresholds searched during initialization.
    pub init_thresholds: Vec<f64>,
    /// Finite-difference stencil of the sparse-regression initialization.
    pub derivative_scheme: DerivativeScheme,
    pub adapt: AdaptConfig,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            s: 0.01,
            alpha_xi: 1e-2,
            alpha_m: 1e-1,
            kappa_xi: 0.05,
            kappa_m: 0.05,
            eta_coeff: 1,
            eta_mask: Horizon::FULL,
            outer_iters: 200,
            init_alpha: 0.7,
            huber_delta: 1.0,
            inner_steps: 1,
            substeps: 1,
            anchor_rule: AnchorRule::Floor,
            validation_fraction: 0.8,
            init_thresholds: DEFAULT_THRESHOLDS.to_vec(),
            derivative_scheme: DerivativeScheme::SecondOrder,
            adapt: AdaptConfig::default(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::invalid(msg)) };
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be ≥ 0")?;
        check(self.s >= 0.0 && self.s.is_finite(), "s must be ≥ 0")?;
        check(self.alpha_xi > 0.0 && self.alpha_m > 0.0, "step sizes must be > 0")?;
        check(self.kappa_xi >= 0.0, "kappa_xi must be ≥ 0")?;
        check(self.kappa_m > 0.0 && self.kappa_m < 1.0, "kappa_m must lie in (0, 1)")?;
        check(self.eta_coeff >= 1, "eta_coeff must be ≥ 1")?;
        check(
            !matches!(self.eta_mask, Horizon::Steps(0)),
            "eta_mask must be ≥ 1",
        )?;
        check(self.init_alpha > 0.0 && self.init_alpha < 1.0, "init_alpha must lie in (0, 1)")?;
        check(self.huber_delta > 0.0, "huber_delta must be > 0")?;
        check(self.inner_steps >= 1, "inner_steps must be ≥ 1")?;
        check(self.substeps >= 1, "substeps must be ≥ 1")?;
        check(
            self.validation_fraction > 0.0 && self.validation_fraction < 1.0,
            "validation_fraction must lie in (0, 1)",
        )?;
        check(
            !self.init_thresholds.is_empty() && self.init_thresholds.iter().all(|t| *t >= 0.0),
            "init_thresholds must be a nonempty list of values ≥ 0",
        )?;
        self.adapt.validate()
    }

    pub fn rollout_settings(&self) -> RolloutSettings {
        RolloutSettings {
            substeps: self.substeps,
        }
    }

    pub fn fit_settings(&self) -> FitSettings {
        FitSettings {
            thresholds: self.init_thresholds.clone(),
            scheme: self.derivative_scheme,
            validation_fraction: self.validation_fraction,
            rollout: self.rollout_settings(),
        }
    }

    pub fn coefficient_term(&self) -> DataTerm {
        DataTerm {
            eta: self.eta_coeff,
            full: false,
            rule: self.anchor_rule,
            penalty: Penalty::Huber(self.huber_delta),
            settings: self.rollout_settings(),
        }
    }

    pub fn mask_term(&self) -> DataTerm {
        let (eta, full) = match self.eta_mask {
            Horizon::Steps(k) => (k, false),
            Horizon::Full(_) => (usize::MAX, true),
        };
        DataTerm {
            eta,
            full,
            rule: self.anchor_rule,
            penalty: Penalty::Squared,
            settings: self.rollout_settings(),
        }
    }
}
