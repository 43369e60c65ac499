//! Fixtures shared by the benchmarks.

use disco_core::policy::stream_rng;
use disco_core::tasks::RolloutGroup;
use disco_core::PolicyParams;
use rand::Rng;

/// A perturbed policy pair and `questions` groups of `n` rollouts sampled
/// from the older policy, with mixed rewards in every group.
pub struct Batch {
    pub theta: PolicyParams,
    pub old: PolicyParams,
    pub groups: Vec<RolloutGroup>,
}

pub fn batch(questions: usize, n: usize, vocab: usize, len: usize, seed: u64) -> Batch {
    let mut rng = stream_rng(seed, 0);
    let old = PolicyParams::random(questions, vocab, len, 1, 1.0, &mut rng).expect("valid shape");
    let mut theta = old.clone();
    for x in theta.logits_mut() {
        *x += rng.gen_range(-0.05..0.05);
    }
    let groups = (0..questions)
        .map(|q| {
            let rollouts = (0..n)
                .map(|i| {
                    let mut r = old.sample(q, 1.0, &mut rng).expect("valid question");
                    r.reward = i == 0 || (i > 1 && rng.gen_bool(0.5));
                    r
                })
                .collect();
            RolloutGroup::from_rollouts(q, rollouts).expect("nonempty group")
        })
        .collect();
    Batch { theta, old, groups }
}
