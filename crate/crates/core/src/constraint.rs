//! KL trust region: the token-averaged KL estimator, the squared-hinge
//! penalty and the plain KL-regularization alternative.

use std::fmt;
use std::str::FromStr;

use crate::error::{DiscoError, Result};
use crate::policy::{GradientVector, PolicyParams, Rollout};

pub const DEFAULT_DELTA: f64 = 1e-4;
pub const DEFAULT_BETA: f64 = 1e3;
pub const DEFAULT_PLAIN_COEFF: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KlMode {
    /// No KL term at all.
    None,
    /// `beta * max(D - delta, 0)^2`
    Hinge,
    /// `coeff * D`, always on.
    Plain { coeff: f64 },
}

impl KlMode {
    pub fn name(&self) -> &'static str {
        match self {
            KlMode::None => "none",
            KlMode::Hinge => "hinge",
            KlMode::Plain { .. } => "plain",
        }
    }
}

impl fmt::Display for KlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KlMode {
    type Err = DiscoError;

    /// `plain` parses with the default coefficient.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(KlMode::None),
            "hinge" => Ok(KlMode::Hinge),
            "plain" => Ok(KlMode::Plain {
                coeff: DEFAULT_PLAIN_COEFF,
            }),
            other => Err(DiscoError::Config(format!(
                "unknown kl mode `{other}` (expected none, hinge or plain)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrustRegionSpec {
    pub delta: f64,
    pub beta: f64,
    pub mode: KlMode,
}

impl Default for TrustRegionSpec {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            beta: DEFAULT_BETA,
            mode: KlMode::Hinge,
        }
    }
}

impl TrustRegionSpec {
    pub fn disabled() -> Self {
        Self {
            mode: KlMode::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(DiscoError::Config(format!(
                "kl.delta must be > 0, got {}",
                self.delta
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(DiscoError::Config(format!(
                "kl.beta must be > 0, got {}",
                self.beta
            )));
        }
        if let KlMode::Plain { coeff } = self.mode {
            if !(coeff >= 0.0 && coeff.is_finite()) {
                return Err(DiscoError::Config(format!(
                    "kl.coeff must be >= 0, got {coeff}"
                )));
            }
        }
        Ok(())
    }
}

/// `(1 / total tokens) * sum over tokens of log(pi_old / pi_theta)`.
///
/// Unbiased for the token-averaged `KL(pi_old || pi_theta)` on samples from
/// `pi_old`; may be negative on finite samples.
pub fn kl_estimate<'r>(
    theta: &PolicyParams,
    old: &PolicyParams,
    rollouts: impl IntoIterator<Item = &'r Rollout>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for r in rollouts {
        let lt = theta.log_prob(&r.sequence)?;
        let lo = old.log_prob(&r.sequence)?;
        total += lo.iter().zip(&lt).map(|(o, t)| o - t).sum::<f64>();
        tokens += lt.len();
    }
    if tokens == 0 {
        return Err(DiscoError::Domain(
            "KL estimate needs at least one token".into(),
        ));
    }
    Ok(total / tokens as f64)
}

/// Exact gradient of [`kl_estimate`] with respect to `theta`.
pub fn kl_gradient<'r>(
    theta: &PolicyParams,
    old: &PolicyParams,
    rollouts: impl IntoIterator<Item = &'r Rollout>,
) -> Result<GradientVector> {
    if !theta.same_shape(old) {
        return Err(DiscoError::Domain(
            "policies have different table shapes".into(),
        ));
    }
    let rollouts: Vec<&Rollout> = rollouts.into_iter().collect();
    let tokens: usize = rollouts.iter().map(|r| r.sequence.len()).sum();
    if tokens == 0 {
        return Err(DiscoError::Domain(
            "KL estimate needs at least one token".into(),
        ));
    }
    let w = -1.0 / tokens as f64;
    let mut grad = theta.zero_gradient();
    for r in rollouts {
        theta.validate(&r.sequence)?;
        for t in 0..r.sequence.len() {
            theta.accumulate_token_grad(&r.sequence, t, w, &mut grad);
        }
    }
    Ok(grad)
}

/// Penalty value `beta * max(d - delta, 0)^2` and the factor
/// `2 beta max(d - delta, 0)` that multiplies the estimator's gradient.
pub fn hinge_penalty(kl_hat: f64, spec: &TrustRegionSpec) -> (f64, f64) {
    let excess = (kl_hat - spec.delta).max(0.0);
    (spec.beta * excess * excess, 2.0 * spec.beta * excess)
}

/// `coeff * D` and `coeff * grad D`, never gated.
pub fn plain_kl_regularizer<'r>(
    theta: &PolicyParams,
    old: &PolicyParams,
    rollouts: impl IntoIterator<Item = &'r Rollout> + Clone,
    coeff: f64,
) -> Result<(f64, GradientVector)> {
    if !(coeff >= 0.0) {
        return Err(DiscoError::Domain(format!(
            "coefficient must be >= 0, got {coeff}"
        )));
    }
    let kl = kl_estimate(theta, old, rollouts.clone())?;
    let mut grad = kl_gradient(theta, old, rollouts)?;
    grad.scale(coeff);
    Ok((coeff * kl, grad))
}

/// Result of evaluating the KL term on one minibatch.
#[derive(Clone, Debug)]
pub struct ConstraintTerm {
    pub kl_hat: f64,
    /// Penalty subtracted from the objective.
    pub penalty: f64,
    /// Gradient of `penalty`; the ascent direction is `G1 - gradient`.
    pub gradient: GradientVector,
}

/// KL estimate, penalty and penalty gradient for the configured mode.
pub fn constraint_term<'r>(
    spec: &TrustRegionSpec,
    theta: &PolicyParams,
    old: &PolicyParams,
    rollouts: impl IntoIterator<Item = &'r Rollout> + Clone,
) -> Result<ConstraintTerm> {
    let kl_hat = kl_estimate(theta, old, rollouts.clone())?;
    let (penalty, gradient) = match spec.mode {
        KlMode::None => (0.0, theta.zero_gradient()),
        KlMode::Hinge => {
            let (value, factor) = hinge_penalty(kl_hat, spec);
            if factor == 0.0 {
                (0.0, theta.zero_gradient())
            } else {
                let mut g = kl_gradient(theta, old, rollouts)?;
                g.scale(factor);
                (value, g)
            }
        }
        KlMode::Plain { coeff } => plain_kl_regularizer(theta, old, rollouts, coeff)?,
    };
    Ok(ConstraintTerm {
        kl_hat,
        penalty,
        gradient,
    })
}
