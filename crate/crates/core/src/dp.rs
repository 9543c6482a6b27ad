//! Gaussian mechanism: noise calibration, sampling, closed-form KL between
//! noise sources, and the privacy accountant that gates the training loop.
//!
//! Calibration follows the analytic Gaussian formula
//! `sigma = sqrt(2 ln(1.25/delta)) * sensitivity / epsilon`. The accountant
//! composes linearly: each noised aggregation charges one `delta_round`
//! against the budget, the simplest reading of a scalar per-round spend.
//! A moments accountant is deliberately out of scope.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Per-round privacy knobs: privacy loss, per-round spend, and sensitivity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta_round: f64,
    pub sensitivity: f64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, delta_round: f64, sensitivity: f64) -> Result<PrivacyParams> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(delta_round > 0.0 && delta_round < 1.0) {
            return Err(Error::Config(format!(
                "delta_round must be in (0, 1), got {delta_round}"
            )));
        }
        if !(sensitivity > 0.0) {
            return Err(Error::Config(format!(
                "sensitivity must be > 0, got {sensitivity}"
            )));
        }
        Ok(PrivacyParams {
            epsilon,
            delta_round,
            sensitivity,
        })
    }
}

/// A univariate Gaussian noise source: mean and standard deviation. In the
/// aggregation pipeline the scale is the calibrated sigma times the round's
/// sensitivity; an attacked source carries a shifted mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    pub mean: f64,
    pub scale: f64,
}

impl GaussianSpec {
    pub fn new(mean: f64, scale: f64) -> Result<GaussianSpec> {
        if !(scale > 0.0) {
            return Err(Error::Config(format!("scale must be > 0, got {scale}")));
        }
        Ok(GaussianSpec { mean, scale })
    }
}

/// Standard deviation of the Gaussian mechanism for the given parameters:
/// `sqrt(2 ln(1.25/delta)) * sensitivity / epsilon`.
pub fn calibrate_sigma(p: &PrivacyParams) -> Result<f64> {
    if !(p.epsilon > 0.0) {
        return Err(Error::Calibration(format!(
            "epsilon must be > 0, got {}",
            p.epsilon
        )));
    }
    if !(p.sensitivity > 0.0) {
        return Err(Error::Calibration(format!(
            "sensitivity must be > 0, got {}",
            p.sensitivity
        )));
    }
    if !(p.delta_round > 0.0) || p.delta_round >= 1.25 {
        return Err(Error::Calibration(format!(
            "delta_round must be in (0, 1.25) for the Gaussian formula, got {}",
            p.delta_round
        )));
    }
    Ok((2.0 * (1.25 / p.delta_round).ln()).sqrt() * p.sensitivity / p.epsilon)
}

/// Scale of the Laplace mechanism, `sensitivity / epsilon`. Calibration
/// variant only; the training loop always deploys the Gaussian mechanism.
pub fn calibrate_laplace_scale(p: &PrivacyParams) -> Result<f64> {
    if !(p.epsilon > 0.0) || !(p.sensitivity > 0.0) {
        return Err(Error::Calibration(
            "epsilon and sensitivity must be > 0".into(),
        ));
    }
    Ok(p.sensitivity / p.epsilon)
}

/// `dim` i.i.d. standard normal draws from the given stream.
pub fn sample_standard<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Shift and scale standard draws into the given noise source, preserving
/// the underlying stream so two sources can share identical draws.
pub fn apply_spec(spec: &GaussianSpec, standard: &[f64]) -> Vec<f64> {
    standard.iter().map(|z| spec.mean + spec.scale * z).collect()
}

/// `dim` i.i.d. draws from `Normal(mean, scale^2)`; deterministic per stream.
pub fn sample_noise<R: Rng>(spec: &GaussianSpec, dim: usize, rng: &mut R) -> Vec<f64> {
    apply_spec(spec, &sample_standard(dim, rng))
}

/// Closed-form KL divergence `D_KL(fa || f0)` between two Gaussians:
/// `ln(s0/sa) + (sa^2 + (ma - m0)^2) / (2 s0^2) - 1/2`.
pub fn gaussian_kl(fa: &GaussianSpec, f0: &GaussianSpec) -> f64 {
    debug_assert!(fa.scale > 0.0 && f0.scale > 0.0);
    let mean_diff = fa.mean - f0.mean;
    (f0.scale / fa.scale).ln()
        + (fa.scale * fa.scale + mean_diff * mean_diff) / (2.0 * f0.scale * f0.scale)
        - 0.5
}

/// Result of trying to charge one round of privacy spend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChargeOutcome {
    Ok,
    /// The charge would overshoot the budget; the accountant is unchanged
    /// and the caller must finalize the previous global model.
    BudgetExhausted,
}

/// Tracks cumulative per-round privacy spend against a fixed budget.
///
/// Spend is recomputed as `rounds_charged * delta_round` on every charge
/// (rather than incrementally accumulated), so the linear-composition
/// invariant holds exactly in floating point.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyAccountant {
    budget: f64,
    spent: f64,
    rounds_charged: u64,
}

impl PrivacyAccountant {
    pub fn new(budget: f64) -> Result<PrivacyAccountant> {
        if !(budget >= 0.0) {
            return Err(Error::Config(format!("budget must be >= 0, got {budget}")));
        }
        Ok(PrivacyAccountant {
            budget,
            spent: 0.0,
            rounds_charged: 0,
        })
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn spent(&self) -> f64 {
        self.spent
    }

    pub fn rounds_charged(&self) -> u64 {
        self.rounds_charged
    }

    pub fn charge(&mut self, p: &PrivacyParams) -> ChargeOutcome {
        let next_spent = (self.rounds_charged + 1) as f64 * p.delta_round;
        if next_spent > self.budget {
            ChargeOutcome::BudgetExhausted
        } else {
            self.rounds_charged += 1;
            self.spent = next_spent;
            ChargeOutcome::Ok
        }
    }
}
