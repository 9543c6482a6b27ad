//! Stealthy noise poisoning: replaces the benign zero-mean aggregation noise
//! with a mean-shifted Gaussian of identical variance.
//!
//! The shift is `sqrt(2*gamma) * sigma`, where `gamma` is the attacker's
//! stealth tolerance and `sigma` the deployed noise scale. That shift makes
//! the KL divergence between attack and benign sources exactly `gamma`: the
//! attack saturates its stealth budget and never exceeds it. The shift is
//! applied identically to every coordinate of the aggregated update, since
//! the noise itself is i.i.d. per coordinate.

use crate::dp::{gaussian_kl, GaussianSpec};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{argmax, forward, ModelSpec, ParamVector, Targets, Task};

/// The attacker's knobs: stealth tolerance and an on/off switch. The attack
/// point is the aggregation noise source, the only place this threat model
/// touches the pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackProfile {
    pub gamma: f64,
    pub enabled: bool,
}

impl AttackProfile {
    pub fn new(gamma: f64, enabled: bool) -> Result<AttackProfile> {
        if !(gamma >= 0.0) {
            return Err(Error::Domain(format!("gamma must be >= 0, got {gamma}")));
        }
        Ok(AttackProfile { gamma, enabled })
    }

    pub fn disabled() -> AttackProfile {
        AttackProfile {
            gamma: 0.0,
            enabled: false,
        }
    }
}

/// Summary of a deployed attack: realized mean shift, its KL divergence from
/// the benign source, and the adversarial objective on the test set.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub mu_a: f64,
    pub kl: f64,
    /// Misclassification count; `None` for regression runs.
    pub misclassified: Option<usize>,
    /// The objective value: misclassified count for classification, summed
    /// absolute residual for regression. Never mixed between tasks.
    pub objective_value: f64,
}

/// Optimal attack mean: `theta + sqrt(2*gamma) * sigma`.
pub fn attack_mean_shift(theta: f64, sigma: f64, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::Domain(format!("gamma must be >= 0, got {gamma}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(theta + (2.0 * gamma).sqrt() * sigma)
}

/// The malicious noise source for a benign one: same scale, mean shifted by
/// [`attack_mean_shift`] using the benign (deployed) scale as sigma.
pub fn malicious_spec(benign: &GaussianSpec, profile: &AttackProfile) -> Result<GaussianSpec> {
    if !profile.enabled {
        return Err(Error::Domain(
            "malicious_spec requires an enabled attack profile".into(),
        ));
    }
    let mean = attack_mean_shift(benign.mean, benign.scale, profile.gamma)?;
    GaussianSpec::new(mean, benign.scale)
}

/// Count of argmax misclassifications of the model over a labeled test set,
/// which is also the adversarial objective value for classification.
pub fn adversarial_objective(
    spec: &ModelSpec,
    params: &ParamVector,
    test_inputs: &Matrix,
    test_targets: &Targets,
) -> Result<(usize, f64)> {
    if spec.task() != Task::Classification {
        return Err(Error::TaskMismatch(
            "adversarial_objective requires a classification task".into(),
        ));
    }
    let labels = match test_targets {
        Targets::Labels(l) => l,
        Targets::Values(_) => {
            return Err(Error::TaskMismatch(
                "classification objective needs labeled targets".into(),
            ))
        }
    };
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let outputs = forward(spec, params, test_inputs)?;
    let misclassified = labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax(outputs.row(i)) != label)
        .count();
    Ok((misclassified, misclassified as f64))
}

/// Regression analogue of the adversarial objective: summed absolute
/// residual over the test set. Reported separately from classification.
pub fn regression_residual_objective(
    spec: &ModelSpec,
    params: &ParamVector,
    test_inputs: &Matrix,
    test_targets: &Targets,
) -> Result<f64> {
    if spec.task() != Task::Regression {
        return Err(Error::TaskMismatch(
            "regression_residual_objective requires a regression task".into(),
        ));
    }
    let values = match test_targets {
        Targets::Values(v) => v,
        Targets::Labels(_) => {
            return Err(Error::TaskMismatch(
                "regression objective needs value targets".into(),
            ))
        }
    };
    if values.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let outputs = forward(spec, params, test_inputs)?;
    let mut total = 0.0;
    for i in 0..outputs.rows() {
        for j in 0..outputs.cols() {
            total += (outputs.get(i, j) - values.get(i, j)).abs();
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stealth {
    Stealthy,
    Violated,
}

/// Whether the deployed noise source keeps its KL divergence from the benign
/// source within the attacker's tolerance.
pub fn stealthiness_check(
    profile: &AttackProfile,
    fa: &GaussianSpec,
    f0: &GaussianSpec,
) -> Stealth {
    if gaussian_kl(fa, f0) <= profile.gamma + 1e-12 {
        Stealth::Stealthy
    } else {
        Stealth::Violated
    }
}
