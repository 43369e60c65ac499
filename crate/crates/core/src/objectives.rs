//! Advantages, clipping, scoring functions and the training objectives.
//!
//! Every objective is a maximization target evaluated on empirical rollout
//! groups, together with its exact gradient in logit space. Gradients are
//! assembled by the chain rule: each objective reduces to a coefficient on
//! `d log pi_theta(o_t | .)` per visited token, and those coefficients are
//! pushed through [`PolicyParams::accumulate_token_grad`].
//!
//! Degenerate groups (all rewards equal) are skipped by the objectives that
//! need a positive/negative contrast or a normalized advantage, and count as
//! zero-valued groups for Dr. GRPO and GPG.

use std::fmt;
use std::str::FromStr;

use crate::constraint;
use crate::error::{DiscoError, Result};
use crate::policy::{PolicyParams, Rollout, TokenSequence};
use crate::tasks::RolloutGroup;

pub use crate::policy::GradientVector;

/// Per-token form of a scoring function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScoreVariant {
    /// `log pi_theta`
    LogL,
    /// `pi_theta / pi_old`
    LRatio,
    /// The pair `min(ratio, 1 + eps_high)` for positives and
    /// `max(ratio, 1 - eps_low)` for negatives.
    ClippedLRatio { eps_low: f64, eps_high: f64 },
    /// `log(pi_theta / pi_ref)`
    LogRatioToRef,
}

/// How token terms are aggregated into one sequence score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthNorm {
    /// Divide by the sequence's own length.
    PerToken,
    /// Divide by the mean sequence length of the rollout's group.
    BatchToken,
    /// Plain sum over tokens.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoringKind {
    pub variant: ScoreVariant,
    pub length_norm: LengthNorm,
}

impl ScoringKind {
    pub fn log_l() -> Self {
        Self {
            variant: ScoreVariant::LogL,
            length_norm: LengthNorm::PerToken,
        }
    }

    pub fn l_ratio() -> Self {
        Self {
            variant: ScoreVariant::LRatio,
            length_norm: LengthNorm::PerToken,
        }
    }

    pub fn clipped(eps_low: f64, eps_high: f64, length_norm: LengthNorm) -> Self {
        Self {
            variant: ScoreVariant::ClippedLRatio { eps_low, eps_high },
            length_norm,
        }
    }

    pub fn log_ratio_ref() -> Self {
        Self {
            variant: ScoreVariant::LogRatioToRef,
            length_norm: LengthNorm::None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.variant {
            ScoreVariant::LogL => "log-l",
            ScoreVariant::LRatio => "l-ratio",
            ScoreVariant::ClippedLRatio { .. } => "clipped-l-ratio",
            ScoreVariant::LogRatioToRef => "log-ratio-ref",
        }
    }

    pub fn needs_reference(&self) -> bool {
        self.variant == ScoreVariant::LogRatioToRef
    }

    pub fn validate(&self) -> Result<()> {
        if let ScoreVariant::ClippedLRatio { eps_low, eps_high } = self.variant {
            if !(eps_low > 0.0 && eps_low < 1.0) {
                return Err(DiscoError::Config(format!(
                    "eps_low must lie in (0, 1), got {eps_low}"
                )));
            }
            if !(eps_high > 0.0 && eps_high.is_finite()) {
                return Err(DiscoError::Config(format!(
                    "eps_high must be positive, got {eps_high}"
                )));
            }
        }
        Ok(())
    }
}

/// The current, old (sampling) and optional frozen reference policies.
#[derive(Clone, Copy, Debug)]
pub struct Policies<'a> {
    pub theta: &'a PolicyParams,
    pub old: &'a PolicyParams,
    pub reference: Option<&'a PolicyParams>,
}

impl<'a> Policies<'a> {
    pub fn new(theta: &'a PolicyParams, old: &'a PolicyParams) -> Self {
        Self {
            theta,
            old,
            reference: None,
        }
    }

    pub fn with_reference(mut self, reference: &'a PolicyParams) -> Self {
        self.reference = Some(reference);
        self
    }

    fn reference(&self) -> Result<&'a PolicyParams> {
        self.reference
            .ok_or_else(|| DiscoError::Config("objective needs a reference policy".into()))
    }

    fn check_shapes(&self) -> Result<()> {
        let ok = self.theta.same_shape(self.old)
            && self.reference.is_none_or(|r| self.theta.same_shape(r));
        if ok {
            Ok(())
        } else {
            Err(DiscoError::Config(
                "policies have different table shapes".into(),
            ))
        }
    }
}

/// Which objective to optimize, with the hyperparameters only that
/// objective uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObjectiveKind {
    /// Clipped surrogate with normalized advantage, minus a reference-KL
    /// penalty, plus an optional entropy bonus (GRPO-ER when positive).
    Grpo {
        beta_ref: f64,
        entropy_coeff: f64,
    },
    /// GRPO's clipped positive/negative scores with the question weight
    /// removed, minus the reference-KL penalty.
    GrpoRw {
        beta_ref: f64,
    },
    DrGrpo,
    Dapo,
    Gpg {
        alpha: f64,
    },
    /// Pairwise log-sigmoid on reference log-ratio scores, minus
    /// `kl_coeff` times the old-to-current KL estimate.
    Trpa {
        beta: f64,
        kl_coeff: f64,
    },
    /// Pairwise score difference (identity surrogate).
    DiscoB,
    /// Log-sum-exp over negatives at temperature `tau`.
    Disco {
        tau: f64,
    },
}

impl ObjectiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Grpo { entropy_coeff, .. } if *entropy_coeff > 0.0 => "grpo-er",
            ObjectiveKind::Grpo { .. } => "grpo",
            ObjectiveKind::GrpoRw { .. } => "grpo-rw",
            ObjectiveKind::DrGrpo => "dr-grpo",
            ObjectiveKind::Dapo => "dapo",
            ObjectiveKind::Gpg { .. } => "gpg",
            ObjectiveKind::Trpa { .. } => "trpa",
            ObjectiveKind::DiscoB => "disco-b",
            ObjectiveKind::Disco { .. } => "disco",
        }
    }

    /// Whether degenerate groups are dropped (as opposed to contributing zero).
    fn needs_contrast(&self) -> bool {
        !matches!(self, ObjectiveKind::DrGrpo | ObjectiveKind::Gpg { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub scoring: ScoringKind,
    /// Drop degenerate groups instead of failing on them.
    pub skip_degenerate: bool,
}

pub const DEFAULT_CLIP_EPS: f64 = 0.2;
pub const DEFAULT_DAPO_EPS_HIGH: f64 = 0.28;
pub const DEFAULT_BETA_REF: f64 = 0.001;
pub const DEFAULT_ENTROPY_COEFF: f64 = 0.001;
pub const DEFAULT_TRPA_KL_COEFF: f64 = 0.001;
pub const DEFAULT_TAU_LOG_L: f64 = 10.0;
pub const DEFAULT_TAU_L_RATIO: f64 = 1.0;

impl ObjectiveSpec {
    fn make(kind: ObjectiveKind, scoring: ScoringKind) -> Self {
        Self {
            kind,
            scoring,
            skip_degenerate: true,
        }
    }

    pub fn grpo(eps: f64, beta_ref: f64) -> Self {
        Self::make(
            ObjectiveKind::Grpo {
                beta_ref,
                entropy_coeff: 0.0,
            },
            ScoringKind::clipped(eps, eps, LengthNorm::PerToken),
        )
    }

    pub fn grpo_er(eps: f64, beta_ref: f64, entropy_coeff: f64) -> Self {
        Self::make(
            ObjectiveKind::Grpo {
                beta_ref,
                entropy_coeff,
            },
            ScoringKind::clipped(eps, eps, LengthNorm::PerToken),
        )
    }

    pub fn grpo_rw(eps: f64, beta_ref: f64) -> Self {
        Self::make(
            ObjectiveKind::GrpoRw { beta_ref },
            ScoringKind::clipped(eps, eps, LengthNorm::PerToken),
        )
    }

    pub fn dr_grpo(eps: f64) -> Self {
        Self::make(
            ObjectiveKind::DrGrpo,
            ScoringKind::clipped(eps, eps, LengthNorm::None),
        )
    }

    pub fn dapo(eps_low: f64, eps_high: f64) -> Self {
        Self::make(
            ObjectiveKind::Dapo,
            ScoringKind::clipped(eps_low, eps_high, LengthNorm::BatchToken),
        )
    }

    pub fn gpg(alpha: f64) -> Self {
        Self::make(
            ObjectiveKind::Gpg { alpha },
            ScoringKind {
                variant: ScoreVariant::LogL,
                length_norm: LengthNorm::BatchToken,
            },
        )
    }

    pub fn trpa(beta: f64, kl_coeff: f64) -> Self {
        Self::make(
            ObjectiveKind::Trpa { beta, kl_coeff },
            ScoringKind::log_ratio_ref(),
        )
    }

    pub fn disco_b(scoring: ScoringKind) -> Self {
        Self::make(ObjectiveKind::DiscoB, scoring)
    }

    pub fn disco(scoring: ScoringKind, tau: f64) -> Self {
        Self::make(ObjectiveKind::Disco { tau }, scoring)
    }

    /// Defaults for a canonical objective name.
    pub fn default_for(name: &str) -> Result<Self> {
        let eps = DEFAULT_CLIP_EPS;
        Ok(match name {
            "grpo" => Self::grpo(eps, DEFAULT_BETA_REF),
            "grpo-er" => Self::grpo_er(eps, DEFAULT_BETA_REF, DEFAULT_ENTROPY_COEFF),
            "grpo-rw" => Self::grpo_rw(eps, DEFAULT_BETA_REF),
            "dr-grpo" => Self::dr_grpo(eps),
            "dapo" => Self::dapo(eps, DEFAULT_DAPO_EPS_HIGH),
            "gpg" => Self::gpg(1.0),
            "trpa" => Self::trpa(1.0, DEFAULT_TRPA_KL_COEFF),
            "disco-b" => Self::disco_b(ScoringKind::log_l()),
            "disco" => Self::disco(ScoringKind::log_l(), DEFAULT_TAU_LOG_L),
            other => {
                return Err(DiscoError::Config(format!(
                    "unknown objective `{other}` (expected one of {})",
                    OBJECTIVE_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn needs_reference(&self) -> bool {
        match self.kind {
            ObjectiveKind::Grpo { beta_ref, .. } | ObjectiveKind::GrpoRw { beta_ref } => {
                beta_ref > 0.0
            }
            ObjectiveKind::Trpa { .. } => true,
            _ => self.scoring.needs_reference(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scoring.validate()?;
        let bad = |msg: String| Err(DiscoError::Config(msg));
        let clipped = matches!(self.scoring.variant, ScoreVariant::ClippedLRatio { .. });
        let norm = self.scoring.length_norm;
        let name = self.name();
        let scoring_ok = match self.kind {
            ObjectiveKind::Grpo { .. } | ObjectiveKind::GrpoRw { .. } => {
                clipped && norm == LengthNorm::PerToken
            }
            ObjectiveKind::DrGrpo => clipped && norm == LengthNorm::None,
            ObjectiveKind::Dapo => clipped && norm == LengthNorm::BatchToken,
            ObjectiveKind::Gpg { .. } => {
                self.scoring.variant == ScoreVariant::LogL && norm == LengthNorm::BatchToken
            }
            ObjectiveKind::Trpa { .. } => self.scoring == ScoringKind::log_ratio_ref(),
            ObjectiveKind::DiscoB | ObjectiveKind::Disco { .. } => !clipped,
        };
        if !scoring_ok {
            return bad(format!(
                "scoring `{}` is not valid for objective `{name}`",
                self.scoring.name()
            ));
        }
        match self.kind {
            ObjectiveKind::Grpo {
                beta_ref,
                entropy_coeff,
            } if beta_ref < 0.0 || entropy_coeff < 0.0 => {
                bad(format!("{name}: beta_ref and entropy_coeff must be >= 0"))
            }
            ObjectiveKind::GrpoRw { beta_ref } if beta_ref < 0.0 => {
                bad(format!("{name}: beta_ref must be >= 0"))
            }
            ObjectiveKind::Gpg { alpha } if alpha <= 0.0 => {
                bad(format!("gpg: alpha must be > 0, got {alpha}"))
            }
            ObjectiveKind::Trpa { beta, kl_coeff } if beta <= 0.0 || kl_coeff < 0.0 => {
                bad("trpa: beta must be > 0 and kl_coeff >= 0".into())
            }
            ObjectiveKind::Disco { tau } if !(tau > 0.0) => {
                bad(format!("disco: tau must be > 0, got {tau}"))
            }
            _ => Ok(()),
        }
    }
}

pub const OBJECTIVE_NAMES: [&str; 9] = [
    "grpo", "grpo-er", "grpo-rw", "dr-grpo", "dapo", "gpg", "trpa", "disco-b", "disco",
];

impl FromStr for ScoringKind {
    type Err = DiscoError;

    /// Parses the non-clipped scoring names; clipped scoring is implied by
    /// the GRPO family.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log-l" => Ok(ScoringKind::log_l()),
            "l-ratio" => Ok(ScoringKind::l_ratio()),
            "log-ratio-ref" => Ok(ScoringKind::log_ratio_ref()),
            "clipped-l-ratio" => Ok(ScoringKind::clipped(DEFAULT_CLIP_EPS, DEFAULT_CLIP_EPS, LengthNorm::PerToken)),
            other => Err(DiscoError::Config(format!(
                "unknown scoring `{other}` (expected log-l, l-ratio, clipped-l-ratio or log-ratio-ref)"
            ))),
        }
    }
}

impl fmt::Display for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.name(), self.scoring.name())
    }
}

// ---------------------------------------------------------------------------
// Advantages and clipping

/// `(r - p_hat) / sqrt(p_hat (1 - p_hat))` with the population variance of
/// the group's rewards.
pub fn advantage_normalized(group: &RolloutGroup) -> Result<Vec<f64>> {
    let p = group.p_hat;
    if group.is_degenerate() {
        return Err(DiscoError::DegenerateGroup {
            question_id: group.question_id,
            p_hat: p,
        });
    }
    let std = (p * (1.0 - p)).sqrt();
    Ok(group
        .rollouts
        .iter()
        .map(|r| (r.reward_value() - p) / std)
        .collect())
}

/// `r - p_hat`: zero everywhere on a degenerate group.
pub fn advantage_unnormalized(group: &RolloutGroup) -> Vec<f64> {
    group
        .rollouts
        .iter()
        .map(|r| r.reward_value() - group.p_hat)
        .collect()
}

/// `min(x a, clip(x, 1 - eps_low, 1 + eps_high) a)`.
pub fn clip_surrogate(x: f64, a: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = x.clamp(1.0 - eps_low, 1.0 + eps_high);
    (x * a).min(clipped * a)
}

/// Derivative of [`clip_surrogate`] in `x`; zero on the clipped branch.
fn clip_slope(x: f64, a: f64, eps_low: f64, eps_high: f64) -> f64 {
    if (a > 0.0 && x < 1.0 + eps_high) || (a < 0.0 && x > 1.0 - eps_low) {
        a
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Scores

/// A sequence score: one value, or the clipped positive/negative pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Score {
    Single(f64),
    Pair { positive: f64, negative: f64 },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Positive,
    Negative,
}

struct TokenLogProbs {
    theta: Vec<f64>,
    old: Vec<f64>,
    reference: Option<Vec<f64>>,
}

fn token_logprobs(p: &Policies, seq: &TokenSequence, with_ref: bool) -> Result<TokenLogProbs> {
    Ok(TokenLogProbs {
        theta: p.theta.log_prob(seq)?,
        old: p.old.log_prob(seq)?,
        reference: if with_ref {
            Some(p.reference()?.log_prob(seq)?)
        } else {
            None
        },
    })
}

fn length_factor(norm: LengthNorm, len: usize, group_mean_len: f64) -> f64 {
    match norm {
        LengthNorm::PerToken => 1.0 / len as f64,
        LengthNorm::BatchToken => 1.0 / group_mean_len,
        LengthNorm::None => 1.0,
    }
}

/// Score value and its derivative with respect to each token's
/// `log pi_theta`.
fn eval_score(
    variant: ScoreVariant,
    factor: f64,
    tk: &TokenLogProbs,
    side: Side,
) -> (f64, Vec<f64>) {
    let n = tk.theta.len();
    let mut value = 0.0;
    let mut dlogp = Vec::with_capacity(n);
    for t in 0..n {
        let (v, d) = match variant {
            ScoreVariant::LogL => (tk.theta[t], 1.0),
            ScoreVariant::LRatio => {
                let r = (tk.theta[t] - tk.old[t]).exp();
                (r, r)
            }
            ScoreVariant::ClippedLRatio { eps_low, eps_high } => {
                let r = (tk.theta[t] - tk.old[t]).exp();
                match side {
                    Side::Positive if r < 1.0 + eps_high => (r, r),
                    Side::Positive => (1.0 + eps_high, 0.0),
                    Side::Negative if r > 1.0 - eps_low => (r, r),
                    Side::Negative => (1.0 - eps_low, 0.0),
                }
            }
            ScoreVariant::LogRatioToRef => {
                let reference = tk.reference.as_ref().expect("reference log-probs loaded");
                (tk.theta[t] - reference[t], 1.0)
            }
        };
        value += v;
        dlogp.push(factor * d);
    }
    (factor * value, dlogp)
}

/// Scores one rollout. Batch-token normalization uses the rollout's own
/// length, which equals the group mean for fixed-length sequences.
pub fn score(scoring: ScoringKind, policies: &Policies, rollout: &Rollout) -> Result<Score> {
    scoring.validate()?;
    policies.check_shapes()?;
    let tk = token_logprobs(policies, &rollout.sequence, scoring.needs_reference())?;
    let len = rollout.sequence.len();
    let factor = length_factor(scoring.length_norm, len, len as f64);
    Ok(match scoring.variant {
        ScoreVariant::ClippedLRatio { .. } => Score::Pair {
            positive: eval_score(scoring.variant, factor, &tk, Side::Positive).0,
            negative: eval_score(scoring.variant, factor, &tk, Side::Negative).0,
        },
        v => Score::Single(eval_score(v, factor, &tk, Side::Positive).0),
    })
}

/// Scores of a group's positives and negatives. Clipped scoring takes the
/// positive form on positives and the negative form on negatives; batch-token
/// normalization uses the group's mean length.
pub fn group_scores(
    scoring: ScoringKind,
    policies: &Policies,
    group: &RolloutGroup,
) -> Result<GroupScores> {
    scoring.validate()?;
    policies.check_shapes()?;
    let mean_len = group.total_tokens() as f64 / group.len() as f64;
    let with_ref = scoring.needs_reference();
    let side_scores = |rollouts: Vec<&Rollout>, side: Side| -> Result<Vec<f64>> {
        rollouts
            .into_iter()
            .map(|r| {
                let tk = token_logprobs(policies, &r.sequence, with_ref)?;
                let f = length_factor(scoring.length_norm, r.sequence.len(), mean_len);
                Ok(eval_score(scoring.variant, f, &tk, side).0)
            })
            .collect()
    };
    Ok(GroupScores {
        positive: side_scores(group.positive_rollouts().collect(), Side::Positive)?,
        negative: side_scores(group.negative_rollouts().collect(), Side::Negative)?,
    })
}

// ---------------------------------------------------------------------------
// Score-level discriminative objectives

/// Scores of one question's positive and negative rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupScores {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Group value of the identity-surrogate pairwise objective, plus its
/// derivative with respect to each positive and each negative score.
fn pairwise_group(pos: &[f64], neg: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let value = pos.iter().sum::<f64>() / np - neg.iter().sum::<f64>() / nn;
    (value, vec![1.0 / np; pos.len()], vec![-1.0 / nn; neg.len()])
}

/// Group value of the log-sum-exp objective at temperature `tau`, plus the
/// score derivatives. Negatives are weighted by `softmax(s / tau)`.
fn dro_group(pos: &[f64], neg: &[f64], tau: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let max = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = neg.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    // tau * log(mean_j exp(s_j / tau)); exactly `max` when all negatives tie
    let soft_max = max + tau * (total / neg.len() as f64).ln();
    let np = pos.len() as f64;
    let value = pos.iter().sum::<f64>() / np - soft_max;
    let neg_coef = exps.iter().map(|e| -e / total).collect();
    (value, vec![1.0 / np; pos.len()], neg_coef)
}

/// Log-sigmoid pair objective: mean over pairs of `log sigma(beta (s - s'))`.
fn log_sigmoid_group(pos: &[f64], neg: &[f64], beta: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let pairs = (pos.len() * neg.len()) as f64;
    let mut value = 0.0;
    let mut cp = vec![0.0; pos.len()];
    let mut cn = vec![0.0; neg.len()];
    for (i, sp) in pos.iter().enumerate() {
        for (j, sn) in neg.iter().enumerate() {
            let z = beta * (sp - sn);
            value += log_sigmoid(z);
            let d = beta * sigmoid(-z) / pairs;
            cp[i] += d;
            cn[j] -= d;
        }
    }
    (value / pairs, cp, cn)
}

pub fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn nonempty_groups(groups: &[GroupScores]) -> Result<Vec<&GroupScores>> {
    let kept: Vec<_> = groups
        .iter()
        .filter(|g| !g.positive.is_empty() && !g.negative.is_empty())
        .collect();
    if kept.is_empty() {
        Err(DiscoError::EmptyBatch)
    } else {
        Ok(kept)
    }
}

/// Mean over questions of the mean pairwise score gap. Groups missing either
/// side are skipped.
pub fn pairwise_from_scores(groups: &[GroupScores]) -> Result<f64> {
    let kept = nonempty_groups(groups)?;
    Ok(kept
        .iter()
        .map(|g| pairwise_group(&g.positive, &g.negative).0)
        .sum::<f64>()
        / kept.len() as f64)
}

/// Mean over questions and positives of
/// `-tau log mean_{negatives} exp((s' - s) / tau)`.
pub fn dro_from_scores(groups: &[GroupScores], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(DiscoError::Config(format!("tau must be > 0, got {tau}")));
    }
    let kept = nonempty_groups(groups)?;
    Ok(kept
        .iter()
        .map(|g| dro_group(&g.positive, &g.negative, tau).0)
        .sum::<f64>()
        / kept.len() as f64)
}

// ---------------------------------------------------------------------------
// Objective evaluation

struct GradSink<'a> {
    theta: &'a PolicyParams,
    grad: Option<&'a mut GradientVector>,
}

impl GradSink<'_> {
    fn tokens(&mut self, seq: &TokenSequence, dlogp: &[f64], scale: f64) {
        if let Some(g) = self.grad.as_deref_mut() {
            for (t, d) in dlogp.iter().enumerate() {
                self.theta.accumulate_token_grad(seq, t, scale * d, g);
            }
        }
    }

    fn entropy(&mut self, seq: &TokenSequence, scale: f64) {
        if let Some(g) = self.grad.as_deref_mut() {
            self.theta.accumulate_entropy_grad(seq, scale, g);
        }
    }

    fn add(&mut self, other: &GradientVector, scale: f64) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.add_scaled(other, scale);
        }
    }
}

fn select_groups<'g>(
    groups: &'g [RolloutGroup],
    needs_contrast: bool,
    skip_degenerate: bool,
) -> Result<Vec<&'g RolloutGroup>> {
    if !needs_contrast {
        return if groups.is_empty() {
            Err(DiscoError::EmptyBatch)
        } else {
            Ok(groups.iter().collect())
        };
    }
    if !skip_degenerate {
        if let Some(g) = groups.iter().find(|g| g.is_degenerate()) {
            return Err(DiscoError::DegenerateGroup {
                question_id: g.question_id,
                p_hat: g.p_hat,
            });
        }
    }
    let kept: Vec<_> = groups.iter().filter(|g| !g.is_degenerate()).collect();
    if kept.is_empty() {
        Err(DiscoError::EmptyBatch)
    } else {
        Ok(kept)
    }
}

fn all_rollouts(groups: &[RolloutGroup]) -> impl Iterator<Item = &Rollout> + Clone {
    groups.iter().flat_map(|g| g.rollouts.iter())
}

/// Mean over rollouts of the per-token mean of `rho - log rho - 1` with
/// `rho = pi_ref / pi_theta`, a non-negative estimate of
/// `KL(pi_theta || pi_ref)` on samples from the old policy.
fn reference_kl(p: &Policies, groups: &[RolloutGroup], sink: &mut GradSink) -> Result<f64> {
    let reference = p.reference()?;
    let rollouts: Vec<&Rollout> = all_rollouts(groups).collect();
    let w = 1.0 / rollouts.len() as f64;
    let mut total = 0.0;
    for r in rollouts {
        let lt = p.theta.log_prob(&r.sequence)?;
        let lr = reference.log_prob(&r.sequence)?;
        let inv_len = 1.0 / lt.len() as f64;
        let mut dlogp = Vec::with_capacity(lt.len());
        for (a, b) in lt.iter().zip(&lr) {
            let log_rho = b - a;
            let rho = log_rho.exp();
            total += w * inv_len * (rho - log_rho - 1.0);
            dlogp.push(inv_len * (1.0 - rho));
        }
        sink.tokens(&r.sequence, &dlogp, w);
    }
    Ok(total)
}

/// Evaluates a regularizer into its own gradient buffer and adds it to
/// `sink` scaled by `coeff`.
fn weighted_term(
    p: &Policies,
    sink: &mut GradSink,
    coeff: f64,
    term: impl FnOnce(&mut GradSink) -> Result<f64>,
) -> Result<f64> {
    let mut tmp = sink.grad.as_ref().map(|_| p.theta.zero_gradient());
    let value = term(&mut GradSink {
        theta: p.theta,
        grad: tmp.as_mut(),
    })?;
    if let Some(t) = tmp.as_ref() {
        sink.add(t, coeff);
    }
    Ok(value)
}

fn mean_entropy(p: &Policies, groups: &[RolloutGroup], sink: &mut GradSink) -> Result<f64> {
    let rollouts: Vec<&Rollout> = all_rollouts(groups).collect();
    let w = 1.0 / rollouts.len() as f64;
    let mut total = 0.0;
    for r in rollouts {
        total += w * p.theta.token_entropy(&r.sequence)?;
        sink.entropy(&r.sequence, w);
    }
    Ok(total)
}

/// Advantage-weighted clipped surrogate summed over the group's tokens, with
/// each rollout's token sum multiplied by `factor(len)`, then averaged over
/// `norm`. Returns the value and accumulates `scale` times its gradient.
fn surrogate_group(
    p: &Policies,
    group: &RolloutGroup,
    advantages: &[f64],
    eps: (f64, f64),
    factor: impl Fn(usize) -> f64,
    scale: f64,
    sink: &mut GradSink,
) -> Result<f64> {
    let mut value = 0.0;
    for (r, &a) in group.rollouts.iter().zip(advantages) {
        let tk = token_logprobs(p, &r.sequence, false)?;
        let f = factor(r.sequence.len());
        let mut dlogp = Vec::with_capacity(tk.theta.len());
        for (lt, lo) in tk.theta.iter().zip(&tk.old) {
            let x = (lt - lo).exp();
            value += f * clip_surrogate(x, a, eps.0, eps.1);
            dlogp.push(f * clip_slope(x, a, eps.0, eps.1) * x);
        }
        sink.tokens(&r.sequence, &dlogp, scale);
    }
    Ok(value)
}

/// Scores every rollout of a group with `variant`, on the given side for
/// positives and negatives, then applies a group-level pair objective.
fn discriminative_group(
    p: &Policies,
    group: &RolloutGroup,
    scoring: ScoringKind,
    pair: impl Fn(&[f64], &[f64]) -> (f64, Vec<f64>, Vec<f64>),
    scale: f64,
    sink: &mut GradSink,
) -> Result<f64> {
    let mean_len = group.total_tokens() as f64 / group.len() as f64;
    let with_ref = scoring.needs_reference();
    let eval_side = |rollouts: Vec<&Rollout>, side: Side| -> Result<Vec<(f64, Vec<f64>)>> {
        rollouts
            .into_iter()
            .map(|r| {
                let tk = token_logprobs(p, &r.sequence, with_ref)?;
                let f = length_factor(scoring.length_norm, r.sequence.len(), mean_len);
                Ok(eval_score(scoring.variant, f, &tk, side))
            })
            .collect()
    };
    let pos = eval_side(group.positive_rollouts().collect(), Side::Positive)?;
    let neg = eval_side(group.negative_rollouts().collect(), Side::Negative)?;
    let pos_s: Vec<f64> = pos.iter().map(|x| x.0).collect();
    let neg_s: Vec<f64> = neg.iter().map(|x| x.0).collect();
    let (value, cp, cn) = pair(&pos_s, &neg_s);
    for ((r, (_, d)), c) in group.positive_rollouts().zip(&pos).zip(&cp) {
        sink.tokens(&r.sequence, d, scale * c);
    }
    for ((r, (_, d)), c) in group.negative_rollouts().zip(&neg).zip(&cn) {
        sink.tokens(&r.sequence, d, scale * c);
    }
    Ok(value)
}

fn evaluate(
    spec: &ObjectiveSpec,
    p: &Policies,
    groups: &[RolloutGroup],
    grad: Option<&mut GradientVector>,
) -> Result<f64> {
    spec.validate()?;
    p.check_shapes()?;
    if spec.needs_reference() {
        p.reference()?;
    }
    for r in all_rollouts(groups) {
        p.theta.validate(&r.sequence)?;
    }
    if let Some(g) = grad.as_deref() {
        if g.len() != p.theta.num_params() {
            return Err(DiscoError::Domain(
                "gradient buffer has the wrong dimension".into(),
            ));
        }
    }
    let mut sink = GradSink {
        theta: p.theta,
        grad,
    };
    let kept = select_groups(groups, spec.kind.needs_contrast(), spec.skip_degenerate)?;
    let w = 1.0 / kept.len() as f64;
    let mut value = 0.0;
    let scoring = spec.scoring;

    match spec.kind {
        ObjectiveKind::Grpo {
            beta_ref,
            entropy_coeff,
        } => {
            let ScoreVariant::ClippedLRatio { eps_low, eps_high } = scoring.variant else {
                unreachable!("validated")
            };
            for g in &kept {
                let adv = advantage_normalized(g)?;
                let n = g.len() as f64;
                let s = w / n;
                value += s * surrogate_group(
                    p,
                    g,
                    &adv,
                    (eps_low, eps_high),
                    |l| 1.0 / l as f64,
                    s,
                    &mut sink,
                )?;
            }
            if beta_ref > 0.0 {
                value -= beta_ref
                    * weighted_term(p, &mut sink, -beta_ref, |s| reference_kl(p, groups, s))?;
            }
            if entropy_coeff > 0.0 {
                value += entropy_coeff
                    * weighted_term(p, &mut sink, entropy_coeff, |s| mean_entropy(p, groups, s))?;
            }
        }
        ObjectiveKind::GrpoRw { beta_ref } => {
            for g in &kept {
                value += w * discriminative_group(p, g, scoring, pairwise_group, w, &mut sink)?;
            }
            if beta_ref > 0.0 {
                value -= beta_ref
                    * weighted_term(p, &mut sink, -beta_ref, |s| reference_kl(p, groups, s))?;
            }
        }
        ObjectiveKind::DrGrpo => {
            let ScoreVariant::ClippedLRatio { eps_low, eps_high } = scoring.variant else {
                unreachable!("validated")
            };
            for g in &kept {
                let adv = advantage_unnormalized(g);
                let s = w / g.len() as f64;
                value +=
                    s * surrogate_group(p, g, &adv, (eps_low, eps_high), |_| 1.0, s, &mut sink)?;
            }
        }
        ObjectiveKind::Dapo => {
            let ScoreVariant::ClippedLRatio { eps_low, eps_high } = scoring.variant else {
                unreachable!("validated")
            };
            for g in &kept {
                let adv = advantage_normalized(g)?;
                let s = w / g.total_tokens() as f64;
                value +=
                    s * surrogate_group(p, g, &adv, (eps_low, eps_high), |_| 1.0, s, &mut sink)?;
            }
        }
        ObjectiveKind::Gpg { alpha } => {
            for g in &kept {
                let adv = advantage_unnormalized(g);
                let s = w * alpha / g.total_tokens() as f64;
                for (r, &a) in g.rollouts.iter().zip(&adv) {
                    let lp = p.theta.log_prob(&r.sequence)?;
                    value += s * a * lp.iter().sum::<f64>();
                    sink.tokens(&r.sequence, &vec![a; lp.len()], s);
                }
            }
        }
        ObjectiveKind::Trpa { beta, kl_coeff } => {
            for g in &kept {
                let pair = |a: &[f64], b: &[f64]| log_sigmoid_group(a, b, beta);
                value += w * discriminative_group(p, g, scoring, pair, w, &mut sink)?;
            }
            if kl_coeff > 0.0 {
                let rollouts: Vec<&Rollout> = all_rollouts(groups).collect();
                let kl = constraint::kl_estimate(p.theta, p.old, rollouts.iter().copied())?;
                value -= kl_coeff * kl;
                if sink.grad.is_some() {
                    let kg = constraint::kl_gradient(p.theta, p.old, rollouts.iter().copied())?;
                    sink.add(&kg, -kl_coeff);
                }
            }
        }
        ObjectiveKind::DiscoB => {
            for g in &kept {
                value += w * discriminative_group(p, g, scoring, pairwise_group, w, &mut sink)?;
            }
        }
        ObjectiveKind::Disco { tau } => {
            for g in &kept {
                let pair = |a: &[f64], b: &[f64]| dro_group(a, b, tau);
                value += w * discriminative_group(p, g, scoring, pair, w, &mut sink)?;
            }
        }
    }
    Ok(value)
}

/// Value of the empirical objective described by `spec`.
pub fn objective_value(
    spec: &ObjectiveSpec,
    policies: &Policies,
    groups: &[RolloutGroup],
) -> Result<f64> {
    evaluate(spec, policies, groups, None)
}

/// Exact gradient of [`objective_value`] with respect to `policies.theta`.
pub fn objective_gradient(
    spec: &ObjectiveSpec,
    policies: &Policies,
    groups: &[RolloutGroup],
) -> Result<GradientVector> {
    Ok(objective_value_and_gradient(spec, policies, groups)?.1)
}

pub fn objective_value_and_gradient(
    spec: &ObjectiveSpec,
    policies: &Policies,
    groups: &[RolloutGroup],
) -> Result<(f64, GradientVector)> {
    let mut grad = policies.theta.zero_gradient();
    let value = evaluate(spec, policies, groups, Some(&mut grad))?;
    Ok((value, grad))
}

// Named entry points for each objective.

pub fn grpo_objective(
    groups: &[RolloutGroup],
    policies: &Policies,
    eps: f64,
    beta_ref: f64,
) -> Result<f64> {
    objective_value(&ObjectiveSpec::grpo(eps, beta_ref), policies, groups)
}

pub fn drgrpo_objective(groups: &[RolloutGroup], policies: &Policies, eps: f64) -> Result<f64> {
    objective_value(&ObjectiveSpec::dr_grpo(eps), policies, groups)
}

pub fn dapo_objective(
    groups: &[RolloutGroup],
    policies: &Policies,
    eps_low: f64,
    eps_high: f64,
) -> Result<f64> {
    objective_value(&ObjectiveSpec::dapo(eps_low, eps_high), policies, groups)
}

pub fn gpg_objective(groups: &[RolloutGroup], policies: &Policies, alpha: f64) -> Result<f64> {
    objective_value(&ObjectiveSpec::gpg(alpha), policies, groups)
}

pub fn trpa_objective(
    groups: &[RolloutGroup],
    policies: &Policies,
    beta: f64,
    kl_coeff: f64,
) -> Result<f64> {
    objective_value(&ObjectiveSpec::trpa(beta, kl_coeff), policies, groups)
}

/// Identity-surrogate pairwise objective (DisCO-b).
pub fn pairwise_objective(
    groups: &[RolloutGroup],
    scoring: ScoringKind,
    policies: &Policies,
) -> Result<f64> {
    objective_value(&ObjectiveSpec::disco_b(scoring), policies, groups)
}

/// Log-sum-exp objective over negatives (DisCO).
pub fn dro_objective(
    groups: &[RolloutGroup],
    scoring: ScoringKind,
    tau: f64,
    policies: &Policies,
) -> Result<f64> {
    objective_value(&ObjectiveSpec::disco(scoring, tau), policies, groups)
}
