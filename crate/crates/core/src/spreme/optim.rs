//! Adam over a flat parameter vector, with step-size halving when a trial
//! point has an infinite loss.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
pub const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Applies one update in place; entries with `frozen[i]` are untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], frozen: Option<&[bool]>) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for i in 0..params.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grad[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + EPSILON);
        }
    }
}

/// Outcome of one guarded step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad: Option<Vec<f64>>,
    pub halvings: usize,
}

/// Takes an Adam step from `params` along `grad`. If the loss at the trial
/// point is infinite the step size is halved (persistently) and the step is
/// retried, at most [`MAX_HALVINGS`] times. `eval(params, with_grad)` returns
/// the loss and, when asked, the gradient.
pub fn guarded_step<F>(
    adam: &mut Adam,
    params: &mut Vec<f64>,
    grad: &[f64],
    frozen: Option<&[bool]>,
    want_grad: bool,
    mut eval: F,
) -> Result<StepOutcome>
where
    F: FnMut(&[f64], bool) -> Result<(f64, Option<Vec<f64>>)>,
{
    let mut halvings = 0;
    loop {
        let mut trial_adam = adam.clone();
        let mut trial = params.clone();
        trial_adam.step(&mut trial, grad, frozen);
        let (loss, g) = eval(&trial, want_grad)?;
        if loss.is_finite() {
            *adam = trial_adam;
            *params = trial;
            return Ok(StepOutcome {
                loss,
                grad: g,
                halvings,
            });
        }
        if halvings == MAX_HALVINGS {
            return Err(Error::TrainingFailure(format!(
                "loss stayed infinite after {MAX_HALVINGS} step-size halvings"
            )));
        }
        halvings += 1;
        adam.lr *= 0.5;
        log::debug!("infinite loss; step size halved to {}", adam.lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[3.0, -0.5], None);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_entries_untouched() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = vec![1.0, 1.0];
        adam.step(&mut p, &[1.0, 1.0], Some(&[true, false]));
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::new(1, 0.05);
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0)];
            adam.step(&mut p, &g, None);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn halves_until_finite() {
        let mut adam = Adam::new(1, 1.0);
        let mut p = vec![0.0];
        // Finite only within 0.1 of the start.
        let out = guarded_step(&mut adam, &mut p, &[-1.0], None, false, |x, _| {
            Ok((if x[0].abs() < 0.1 { 0.0 } else { f64::INFINITY }, None))
        })
        .unwrap();
        assert_eq!(out.halvings, 4);
        assert_eq!(adam.lr, 1.0 / 16.0);
        assert!(p[0] > 0.0 && p[0] < 0.1);
    }

    #[test]
    fn fails_after_max_halvings() {
        let mut adam = Adam::new(1, 1.0);
        let mut p = vec![0.0];
        let r = guarded_step(&mut adam, &mut p, &[1.0], None, false, |_, _| {
            Ok((f64::INFINITY, None))
        });
        assert!(matches!(r, Err(Error::TrainingFailure(_))));
        assert_eq!(p, vec![0.0]);
    }
}
