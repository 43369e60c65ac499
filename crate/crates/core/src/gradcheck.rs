//! Central finite-difference verification of the analytic gradients.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constraint;
use crate::error::{DiscoError, Result};
use crate::objectives::{self, ObjectiveSpec, Policies, ScoreVariant, ScoringKind};
use crate::policy::{GradientVector, PolicyParams, Rollout};
use crate::tasks::RolloutGroup;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_INSTANCES: usize = 50;

/// Gradient norms below this are compared in absolute terms.
const NORM_FLOOR: f64 = 1e-4;
/// Minimum distance of every token ratio from a clip bound.
const CLIP_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Objective(ObjectiveSpec),
    /// The old-to-current KL estimator.
    Kl,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTarget {
    pub name: String,
    pub target: Target,
}

/// Every objective at its defaults, DisCO under both scoring functions, and
/// the KL estimator.
pub fn default_targets() -> Vec<NamedTarget> {
    let mut out: Vec<NamedTarget> = objectives::OBJECTIVE_NAMES
        .iter()
        .map(|name| NamedTarget {
            name: name.to_string(),
            target: Target::Objective(ObjectiveSpec::default_for(name).expect("known name")),
        })
        .collect();
    out.push(NamedTarget {
        name: "disco-l-ratio".into(),
        target: Target::Objective(ObjectiveSpec::disco(
            ScoringKind::l_ratio(),
            objectives::DEFAULT_TAU_L_RATIO,
        )),
    });
    out.push(NamedTarget {
        name: "disco-b-l-ratio".into(),
        target: Target::Objective(ObjectiveSpec::disco_b(ScoringKind::l_ratio())),
    });
    out.push(NamedTarget {
        name: "kl".into(),
        target: Target::Kl,
    });
    out
}

#[derive(Clone, Debug)]
pub struct Options {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Negates the analytic gradient; a deliberately broken build for
    /// checking that the checker fails.
    pub flip_sign: bool,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            instances: DEFAULT_INSTANCES,
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            flip_sign: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub worst_error: f64,
    pub worst_seed: u64,
    /// Seeds of the instances above tolerance.
    pub failing_seeds: Vec<u64>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failing_seeds.is_empty()
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} {} worst relative error {:.3e} (instance seed {})",
            self.name,
            if self.passed() { "ok  " } else { "FAIL" },
            self.worst_error,
            self.worst_seed
        )?;
        if !self.passed() {
            write!(
                f,
                ", {} failing: {:?}",
                self.failing_seeds.len(),
                self.failing_seeds
            )?;
        }
        Ok(())
    }
}

/// `|a - b| / max(|a|, |b|, floor)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(NORM_FLOOR)
}

/// Central differences of `f` around `params` in every coordinate.
pub fn finite_difference(
    params: &PolicyParams,
    step: f64,
    mut f: impl FnMut(&PolicyParams) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.num_params());
    for i in 0..params.num_params() {
        let x = probe.logits()[i];
        probe.logits_mut()[i] = x + step;
        let up = f(&probe)?;
        probe.logits_mut()[i] = x - step;
        let down = f(&probe)?;
        probe.logits_mut()[i] = x;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// A random instance for gradient checking.
#[derive(Clone, Debug)]
pub struct Instance {
    pub theta: PolicyParams,
    pub old: PolicyParams,
    pub reference: PolicyParams,
    pub groups: Vec<RolloutGroup>,
}

impl Instance {
    pub fn policies(&self) -> Policies<'_> {
        Policies::new(&self.theta, &self.old).with_reference(&self.reference)
    }

    fn rollouts(&self) -> impl Iterator<Item = &Rollout> + Clone {
        self.groups.iter().flat_map(|g| g.rollouts.iter())
    }
}

fn jitter(p: &PolicyParams, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut out = p.clone();
    out.logits_mut()
        .iter_mut()
        .for_each(|x| *x += rng.gen_range(-scale..scale));
    out
}

fn draw_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let questions = rng.gen_range(1..=3);
    let vocab = rng.gen_range(2..=4);
    let len = rng.gen_range(1..=3);
    let order = rng.gen_range(0..=1);
    let old = PolicyParams::random(questions, vocab, len, order, 1.0, rng)?;
    let theta = jitter(&old, 0.4, rng);
    let reference = jitter(&old, 0.4, rng);
    let mut groups = Vec::with_capacity(questions);
    for q in 0..questions {
        let n = rng.gen_range(2..=6);
        let mut rollouts = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = old.sample(q, 1.0, rng)?;
            // first two rollouts fix a contrast; the last question may stay
            // degenerate to exercise skipping
            r.reward = match i {
                0 => true,
                1 => q + 1 == questions && questions > 1,
                _ => rng.gen_bool(0.5),
            };
            rollouts.push(r);
        }
        groups.push(RolloutGroup::from_rollouts(q, rollouts)?);
    }
    Ok(Instance {
        theta,
        old,
        reference,
        groups,
    })
}

/// Whether any token ratio sits within the clip margin of a kink.
fn near_clip_bound(inst: &Instance, spec: &ObjectiveSpec) -> Result<bool> {
    let ScoreVariant::ClippedLRatio { eps_low, eps_high } = spec.scoring.variant else {
        return Ok(false);
    };
    for r in inst.rollouts() {
        let lt = inst.theta.log_prob(&r.sequence)?;
        let lo = inst.old.log_prob(&r.sequence)?;
        for (a, b) in lt.iter().zip(&lo) {
            let x = (a - b).exp();
            if (x - (1.0 + eps_high)).abs() < CLIP_MARGIN
                || (x - (1.0 - eps_low)).abs() < CLIP_MARGIN
            {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Draws instances from `seed` until one is smooth for `target`.
pub fn make_instance(target: &Target, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let inst = draw_instance(&mut rng)?;
        let smooth = match target {
            Target::Objective(spec) => !near_clip_bound(&inst, spec)?,
            Target::Kl => true,
        };
        if smooth {
            return Ok(inst);
        }
    }
    Err(DiscoError::Domain(format!(
        "no smooth instance found from seed {seed}"
    )))
}

fn value(target: &Target, inst: &Instance, theta: &PolicyParams) -> Result<f64> {
    match target {
        Target::Objective(spec) => {
            let p = Policies::new(theta, &inst.old).with_reference(&inst.reference);
            objectives::objective_value(spec, &p, &inst.groups)
        }
        Target::Kl => constraint::kl_estimate(theta, &inst.old, inst.rollouts()),
    }
}

fn analytic(target: &Target, inst: &Instance) -> Result<GradientVector> {
    match target {
        Target::Objective(spec) => {
            objectives::objective_gradient(spec, &inst.policies(), &inst.groups)
        }
        Target::Kl => constraint::kl_gradient(&inst.theta, &inst.old, inst.rollouts()),
    }
}

/// Relative error between the analytic and finite-difference gradient on one
/// instance.
pub fn check_instance(target: &Target, inst: &Instance, step: f64, flip_sign: bool) -> Result<f64> {
    let mut g = analytic(target, inst)?;
    if flip_sign {
        g.scale(-1.0);
    }
    let fd = finite_difference(&inst.theta, step, |theta| value(target, inst, theta))?;
    Ok(relative_error(g.as_slice(), &fd))
}

/// Seed of instance `index` under base seed `seed`.
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

pub fn run_check(target: &NamedTarget, opts: &Options) -> Result<CheckReport> {
    let mut report = CheckReport {
        name: target.name.clone(),
        instances: opts.instances,
        worst_error: 0.0,
        worst_seed: instance_seed(opts.seed, 0),
        failing_seeds: Vec::new(),
    };
    for i in 0..opts.instances {
        let seed = instance_seed(opts.seed, i);
        let inst = make_instance(&target.target, seed)?;
        let err = check_instance(&target.target, &inst, opts.step, opts.flip_sign)?;
        if err > report.worst_error || !err.is_finite() {
            report.worst_error = err;
            report.worst_seed = seed;
        }
        if !(err < opts.tolerance) {
            report.failing_seeds.push(seed);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_targets_pass_on_a_few_instances() {
        let opts = Options {
            instances: 5,
            seed: 11,
            ..Options::default()
        };
        for t in default_targets() {
            let r = run_check(&t, &opts).unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let opts = Options {
            instances: 3,
            flip_sign: true,
            ..Options::default()
        };
        let t = default_targets()
            .into_iter()
            .find(|t| t.name == "disco")
            .unwrap();
        let r = run_check(&t, &opts).unwrap();
        assert!(!r.passed());
        assert!(r.worst_error > 1.0);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1e-9], &[0.0]) - 1e-5).abs() < 1e-15);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn instances_are_reproducible() {
        let t = Target::Kl;
        let a = make_instance(&t, 42).unwrap();
        let b = make_instance(&t, 42).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.groups, b.groups);
    }
}
