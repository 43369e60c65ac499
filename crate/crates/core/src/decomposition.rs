//! Question-level weights of the group-relative objectives and their exact
//! weighted discriminative form.
//!
//! On every non-degenerate group, GRPO, Dr. GRPO, DAPO and GPG equal
//! `omega(p_hat) * (mean positive score - mean negative score)` with a
//! method-specific weight `omega` and scoring pair. The identity is exact on
//! finite groups because the advantage uses the group's own mean and
//! population standard deviation.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;

use crate::error::{DiscoError, Result};
use crate::objectives::{
    self, group_scores, LengthNorm, ObjectiveKind, ObjectiveSpec, Policies, ScoreVariant,
    ScoringKind,
};
use crate::policy::PolicyParams;
use crate::tasks::RolloutGroup;

/// Relative tolerance of the identity check.
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

pub const TRPA_NOTE: &str = "not an f-form objective; identity check not applicable";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Grpo,
    DrGrpo,
    Dapo,
    Gpg,
    Trpa,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Grpo,
        Method::DrGrpo,
        Method::Dapo,
        Method::Gpg,
        Method::Trpa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Grpo => "grpo",
            Method::DrGrpo => "dr-grpo",
            Method::Dapo => "dapo",
            Method::Gpg => "gpg",
            Method::Trpa => "trpa",
        }
    }

    /// Whether the method is a clipped-surrogate objective with a weighted
    /// discriminative form.
    pub fn has_identity(self) -> bool {
        self != Method::Trpa
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = DiscoError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                DiscoError::Config(format!(
                    "unknown method `{s}` (expected grpo, dr-grpo, dapo, gpg or trpa)"
                ))
            })
    }
}

/// Hyperparameters the direct and decomposed forms share.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodParams {
    pub eps_low: f64,
    pub eps_high: f64,
    pub alpha: f64,
}

impl MethodParams {
    pub fn default_for(method: Method) -> Self {
        let eps_high = if method == Method::Dapo {
            objectives::DEFAULT_DAPO_EPS_HIGH
        } else {
            objectives::DEFAULT_CLIP_EPS
        };
        Self {
            eps_low: objectives::DEFAULT_CLIP_EPS,
            eps_high,
            alpha: 1.0,
        }
    }
}

/// The weight `omega(p)` a method puts on a question with success
/// probability `p`.
pub fn weight_omega(method: Method, p: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DiscoError::Domain(format!(
            "probability must lie in [0, 1], got {p}"
        )));
    }
    let v = p * (1.0 - p);
    Ok(match method {
        Method::Grpo | Method::Dapo => v.sqrt(),
        Method::DrGrpo => v,
        Method::Gpg => alpha * v,
        Method::Trpa => 1.0,
    })
}

/// The method's positive/negative scoring pair.
pub fn scoring_for(method: Method, params: &MethodParams) -> ScoringKind {
    let clipped = |norm| ScoringKind::clipped(params.eps_low, params.eps_high, norm);
    match method {
        Method::Grpo => clipped(LengthNorm::PerToken),
        Method::DrGrpo => clipped(LengthNorm::None),
        Method::Dapo => clipped(LengthNorm::BatchToken),
        Method::Gpg => ScoringKind {
            variant: ScoreVariant::LogL,
            length_norm: LengthNorm::BatchToken,
        },
        Method::Trpa => ScoringKind::log_ratio_ref(),
    }
}

/// The method's objective with every regularizer switched off.
pub fn direct_spec(method: Method, params: &MethodParams) -> ObjectiveSpec {
    let kind = match method {
        Method::Grpo => ObjectiveKind::Grpo {
            beta_ref: 0.0,
            entropy_coeff: 0.0,
        },
        Method::DrGrpo => ObjectiveKind::DrGrpo,
        Method::Dapo => ObjectiveKind::Dapo,
        Method::Gpg => ObjectiveKind::Gpg {
            alpha: params.alpha,
        },
        Method::Trpa => ObjectiveKind::Trpa {
            beta: 1.0,
            kl_coeff: 0.0,
        },
    };
    ObjectiveSpec {
        kind,
        scoring: scoring_for(method, params),
        skip_degenerate: true,
    }
}

/// `omega(p_hat) * (mean positive score - mean negative score)`.
pub fn decomposed_objective(
    method: Method,
    params: &MethodParams,
    group: &RolloutGroup,
    policies: &Policies,
) -> Result<f64> {
    if group.is_degenerate() {
        return Err(DiscoError::DegenerateGroup {
            question_id: group.question_id,
            p_hat: group.p_hat,
        });
    }
    let scores = group_scores(scoring_for(method, params), policies, group)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let omega = weight_omega(method, group.p_hat, params.alpha)?;
    Ok(omega * (mean(&scores.positive) - mean(&scores.negative)))
}

/// Direct evaluation of the method's objective on a single group.
pub fn direct_objective(
    method: Method,
    params: &MethodParams,
    group: &RolloutGroup,
    policies: &Policies,
) -> Result<f64> {
    objectives::objective_value(
        &direct_spec(method, params),
        policies,
        std::slice::from_ref(group),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    pub direct: f64,
    pub decomposed: f64,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityReport {
    pub method: Method,
    pub rows: Vec<TrialRow>,
    pub max_deviation: f64,
    /// Trials whose deviation exceeds `IDENTITY_TOLERANCE * (1 + |direct|)`.
    pub violations: usize,
    /// Set when the check does not apply to the method.
    pub note: Option<&'static str>,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    /// `trial,direct,decomposed,deviation` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial,direct,decomposed,deviation\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?}",
                r.trial, r.direct, r.decomposed, r.deviation
            );
        }
        out
    }
}

/// A random single-question instance: policies, rewards and rollouts drawn
/// from the old policy, with at least one success and one failure.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
) -> Result<(PolicyParams, PolicyParams, RolloutGroup)> {
    let vocab = rng.gen_range(2..=4);
    let len = rng.gen_range(1..=4);
    let order = rng.gen_range(0..=1);
    let old = PolicyParams::random(1, vocab, len, order, 1.0, rng)?;
    let mut theta = old.clone();
    let spread = rng.gen_range(0.05..0.6);
    theta
        .logits_mut()
        .iter_mut()
        .for_each(|x| *x += rng.gen_range(-spread..spread));
    let n = rng.gen_range(2..=16);
    let successes = rng.gen_range(1..n);
    let mut rewards: Vec<bool> = (0..n).map(|i| i < successes).collect();
    for i in (1..n).rev() {
        rewards.swap(i, rng.gen_range(0..=i));
    }
    let rollouts = rewards
        .into_iter()
        .map(|reward| {
            let mut r = old.sample(0, 1.0, rng)?;
            r.reward = reward;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let group = RolloutGroup::from_rollouts(0, rollouts)?;
    Ok((theta, old, group))
}

/// Checks the weighted discriminative identity on `trials` random instances.
pub fn verify_identity<R: Rng + ?Sized>(
    method: Method,
    params: &MethodParams,
    trials: usize,
    rng: &mut R,
) -> Result<IdentityReport> {
    if !method.has_identity() {
        return Ok(IdentityReport {
            method,
            rows: Vec::new(),
            max_deviation: 0.0,
            violations: 0,
            note: Some(TRPA_NOTE),
        });
    }
    let mut rows = Vec::with_capacity(trials);
    let mut violations = 0;
    let mut max_deviation: f64 = 0.0;
    for trial in 0..trials {
        let (theta, old, group) = random_instance(rng)?;
        let policies = Policies::new(&theta, &old);
        let direct = direct_objective(method, params, &group, &policies)?;
        let decomposed = decomposed_objective(method, params, &group, &policies)?;
        let deviation = (direct - decomposed).abs();
        if deviation > IDENTITY_TOLERANCE * (1.0 + direct.abs()) {
            violations += 1;
        }
        max_deviation = max_deviation.max(deviation);
        rows.push(TrialRow {
            trial,
            direct,
            decomposed,
            deviation,
        });
    }
    Ok(IdentityReport {
        method,
        rows,
        max_deviation,
        violations,
        note: None,
    })
}

/// One `(method, p, omega)` row per grid point and method, with `p` running
/// from 0 to 1 in `resolution` steps. The constant line is labeled `disco`.
pub fn emit_weight_curves(resolution: usize, alpha: f64) -> Result<Vec<(String, f64, f64)>> {
    if resolution < 2 {
        return Err(DiscoError::Domain(format!(
            "resolution must be >= 2, got {resolution}"
        )));
    }
    let mut rows = Vec::with_capacity(resolution * 6);
    let grid = |i: usize| i as f64 / (resolution - 1) as f64;
    for m in Method::ALL {
        for i in 0..resolution {
            let p = grid(i);
            rows.push((m.name().to_string(), p, weight_omega(m, p, alpha)?));
        }
    }
    for i in 0..resolution {
        rows.push(("disco".to_string(), grid(i), 1.0));
    }
    Ok(rows)
}

pub fn weight_curves_csv(rows: &[(String, f64, f64)]) -> String {
    let mut out = String::from("method,p,omega\n");
    for (m, p, w) in rows {
        let _ = writeln!(out, "{m},{p:?},{w:?}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_examples() {
        assert_eq!(weight_omega(Method::Grpo, 0.5, 1.0).unwrap(), 0.5);
        assert_eq!(weight_omega(Method::DrGrpo, 0.5, 1.0).unwrap(), 0.25);
        assert!((weight_omega(Method::Grpo, 0.1, 1.0).unwrap() - 0.3).abs() < 1e-15);
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(weight_omega(Method::Trpa, p, 1.0).unwrap(), 1.0);
        }
        assert!(weight_omega(Method::Grpo, 1.5, 1.0).is_err());
    }

    #[test]
    fn weight_shape() {
        let rows = emit_weight_curves(101, 1.0).unwrap();
        for m in [Method::Grpo, Method::DrGrpo, Method::Dapo, Method::Gpg] {
            let curve: Vec<f64> = rows
                .iter()
                .filter(|r| r.0 == m.name())
                .map(|r| r.2)
                .collect();
            assert_eq!(curve.len(), 101);
            assert_eq!(curve[0], 0.0);
            assert_eq!(curve[100], 0.0);
            for i in 0..101 {
                assert!((curve[i] - curve[100 - i]).abs() < 1e-15);
            }
            for i in 0..50 {
                assert!(curve[i] < curve[i + 1]);
            }
        }
        let grpo: Vec<_> = rows.iter().filter(|r| r.0 == "grpo").collect();
        let dr: Vec<_> = rows.iter().filter(|r| r.0 == "dr-grpo").collect();
        let gpg: Vec<_> = rows.iter().filter(|r| r.0 == "gpg").collect();
        let peak = grpo.iter().map(|r| r.2).fold(0.0, f64::max);
        assert_eq!(peak, 0.5);
        assert_eq!(grpo[50].1, 0.5);
        for i in 0..101 {
            assert!(grpo[i].2 >= dr[i].2);
            assert_eq!(gpg[i].2, dr[i].2);
        }
        assert_eq!(rows.iter().filter(|r| r.0 == "disco").count(), 101);
        assert!(emit_weight_curves(1, 1.0).is_err());
    }

    #[test]
    fn identity_holds_at_old_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, old, group) = random_instance(&mut rng).unwrap();
        let pol = Policies::new(&old, &old);
        let v = decomposed_objective(
            Method::Grpo,
            &MethodParams::default_for(Method::Grpo),
            &group,
            &pol,
        )
        .unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn identity_on_fixed_reward_patterns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (method, pattern) in [
            (Method::Grpo, vec![true, true, false, false]),
            (Method::DrGrpo, vec![true, false, false, false]),
        ] {
            let old = PolicyParams::random(1, 3, 3, 1, 1.0, &mut rng).unwrap();
            let mut theta = old.clone();
            theta
                .logits_mut()
                .iter_mut()
                .for_each(|x| *x += rng.gen_range(-0.5..0.5));
            let rollouts = pattern
                .iter()
                .map(|&reward| {
                    let mut r = old.sample(0, 1.0, &mut rng).unwrap();
                    r.reward = reward;
                    r
                })
                .collect();
            let g = RolloutGroup::from_rollouts(0, rollouts).unwrap();
            let pol = Policies::new(&theta, &old);
            let params = MethodParams::default_for(method);
            let a = direct_objective(method, &params, &g, &pol).unwrap();
            let b = decomposed_objective(method, &params, &g, &pol).unwrap();
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn identity_over_random_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in [Method::Grpo, Method::DrGrpo, Method::Dapo, Method::Gpg] {
            let report = verify_identity(m, &MethodParams::default_for(m), 300, &mut rng).unwrap();
            assert!(
                report.passed(),
                "{m}: max deviation {}",
                report.max_deviation
            );
            assert!(report.max_deviation < 1e-9);
            assert_eq!(report.rows.len(), 300);
        }
        let gpg3 = MethodParams {
            alpha: 3.0,
            ..MethodParams::default_for(Method::Gpg)
        };
        assert!(verify_identity(Method::Gpg, &gpg3, 100, &mut rng)
            .unwrap()
            .passed());
    }

    #[test]
    fn trpa_is_out_of_scope() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = verify_identity(
            Method::Trpa,
            &MethodParams::default_for(Method::Trpa),
            10,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.note, Some(TRPA_NOTE));
        assert!(r.rows.is_empty());
    }

    #[test]
    fn degenerate_group_is_rejected() {
        let p = PolicyParams::uniform(1, 2, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rollouts = (0..3)
            .map(|_| p.sample(0, 1.0, &mut rng).unwrap())
            .collect();
        let g = RolloutGroup::from_rollouts(0, rollouts).unwrap();
        let pol = Policies::new(&p, &p);
        assert!(decomposed_objective(
            Method::Grpo,
            &MethodParams::default_for(Method::Grpo),
            &g,
            &pol
        )
        .is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = emit_weight_curves(3, 1.0).unwrap();
        let csv = weight_curves_csv(&rows);
        assert!(csv.starts_with("method,p,omega\ngrpo,0.0,0.0\ngrpo,0.5,0.5\n"));
        assert_eq!(csv.lines().count(), 1 + 3 * 6);
        assert_eq!("dr-grpo".parse::<Method>().unwrap(), Method::DrGrpo);
    }
}
