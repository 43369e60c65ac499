//! Synthetic verifiable questions and rollout groups.
//!
//! A question accepts a fixed set of token tuples. Its difficulty under the
//! uniform policy is `|accepting| / V^L`, which gives a direct knob over the
//! spread of per-question success probabilities.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;

use crate::error::{domain, DiscoError, Result};
use crate::policy::{PolicyParams, Rollout, TokenSequence};

pub const DEFAULT_ENUMERATION_BUDGET: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Question {
    pub id: usize,
    pub accepting: BTreeSet<Vec<usize>>,
    pub nominal_difficulty: f64,
}

impl Question {
    pub fn new(id: usize, accepting: BTreeSet<Vec<usize>>, nominal_difficulty: f64) -> Self {
        Self {
            id,
            accepting,
            nominal_difficulty,
        }
    }

    /// Binary reward: whether the token tuple is an accepted answer.
    pub fn verify(&self, seq: &TokenSequence) -> bool {
        self.accepting.contains(&seq.tokens)
    }
}

/// `n` rollouts for one question split by reward.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub question_id: usize,
    pub rollouts: Vec<Rollout>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub p_hat: f64,
}

impl RolloutGroup {
    /// Partitions rollouts by their reward bits.
    pub fn from_rollouts(question_id: usize, rollouts: Vec<Rollout>) -> Result<Self> {
        if rollouts.len() < 2 {
            return domain(format!(
                "a group needs at least 2 rollouts, got {}",
                rollouts.len()
            ));
        }
        if let Some(r) = rollouts
            .iter()
            .find(|r| r.sequence.question_id != question_id)
        {
            return domain(format!(
                "rollout for question {} placed in group {question_id}",
                r.sequence.question_id
            ));
        }
        let (positives, negatives): (Vec<usize>, Vec<usize>) =
            (0..rollouts.len()).partition(|&i| rollouts[i].reward);
        let p_hat = positives.len() as f64 / rollouts.len() as f64;
        Ok(Self {
            question_id,
            rollouts,
            positives,
            negatives,
            p_hat,
        })
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    /// True when every reward is equal (`p_hat` is 0 or 1).
    pub fn is_degenerate(&self) -> bool {
        self.positives.is_empty() || self.negatives.is_empty()
    }

    pub fn positive_rollouts(&self) -> impl Iterator<Item = &Rollout> {
        self.positives.iter().map(|&i| &self.rollouts[i])
    }

    pub fn negative_rollouts(&self) -> impl Iterator<Item = &Rollout> {
        self.negatives.iter().map(|&i| &self.rollouts[i])
    }

    pub fn total_tokens(&self) -> usize {
        self.rollouts.iter().map(|r| r.sequence.len()).sum()
    }
}

/// Samples `n` rollouts from `params` and scores them with the verifier.
pub fn generate_group<R: Rng + ?Sized>(
    params: &PolicyParams,
    question: &Question,
    n: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<RolloutGroup> {
    if n < 2 {
        return domain(format!("group size must be at least 2, got {n}"));
    }
    let rollouts = (0..n)
        .map(|_| {
            let mut r = params.sample(question.id, temperature, rng)?;
            r.reward = question.verify(&r.sequence);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    RolloutGroup::from_rollouts(question.id, rollouts)
}

/// Every token tuple of length `len` over `vocab` symbols, in lexicographic
/// order.
pub fn enumerate_sequences(vocab: usize, len: usize, budget: u64) -> Result<Vec<Vec<usize>>> {
    let needed = (vocab as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
    if needed > budget as u128 {
        return Err(DiscoError::Capacity { needed, budget });
    }
    let mut out = Vec::with_capacity(needed as usize);
    let mut cur = vec![0usize; len];
    for _ in 0..needed {
        out.push(cur.clone());
        for slot in cur.iter_mut().rev() {
            *slot += 1;
            if *slot < vocab {
                break;
            }
            *slot = 0;
        }
    }
    Ok(out)
}

/// Exact `(P(reward = 1), P(reward = 0))` under `params`, by enumeration.
pub fn exact_outcome_probs(
    params: &PolicyParams,
    question: &Question,
    budget: u64,
) -> Result<(f64, f64)> {
    if question.id >= params.num_questions() {
        return domain(format!("question {} not in policy", question.id));
    }
    let mut success = 0.0;
    let mut failure = 0.0;
    for tokens in enumerate_sequences(params.vocab_size(), params.max_len(), budget)? {
        let seq = TokenSequence::new(question.id, tokens);
        let p = params.log_prob_unchecked(&seq).iter().sum::<f64>().exp();
        if question.verify(&seq) {
            success += p;
        } else {
            failure += p;
        }
    }
    Ok((success, failure))
}

pub fn exact_success_prob(params: &PolicyParams, question: &Question, budget: u64) -> Result<f64> {
    Ok(exact_outcome_probs(params, question, budget)?
        .0
        .clamp(0.0, 1.0))
}

/// `count` difficulties evenly spaced in log scale over `[lo, hi]`.
pub fn log_spaced_difficulties(count: usize, lo: f64, hi: f64) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            let mut out: Vec<f64> = (0..count)
                .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
                .collect();
            out[0] = lo;
            out[count - 1] = hi;
            out
        }
    }
}

/// Builds `num_questions` questions. Question `i` takes difficulty
/// `profile[i % profile.len()]` and accepts `round(d * V^L)` distinct
/// sequences drawn without replacement.
pub fn make_bank<R: Rng + ?Sized>(
    num_questions: usize,
    profile: &[f64],
    vocab: usize,
    len: usize,
    rng: &mut R,
) -> Result<Vec<Question>> {
    if profile.is_empty() {
        return domain("difficulty profile is empty");
    }
    let all = enumerate_sequences(vocab, len, DEFAULT_ENUMERATION_BUDGET)?;
    let space = all.len();
    (0..num_questions)
        .map(|id| {
            let d = profile[id % profile.len()];
            if !(d > 0.0 && d < 1.0) {
                return domain(format!("difficulty {d} outside (0, 1)"));
            }
            let size = (d * space as f64).round() as usize;
            if size == 0 || size >= space {
                return domain(format!(
                    "difficulty {d} gives {size} accepted sequences out of {space}"
                ));
            }
            let accepting = index::sample(rng, space, size)
                .into_iter()
                .map(|i| all[i].clone())
                .collect();
            Ok(Question::new(id, accepting, d))
        })
        .collect()
}

/// Serializes a bank as text: a `V L count` header line followed by one
/// line per question with its id, difficulty and accepted tuples. Tokens in
/// a tuple are joined by `-`, tuples by `,`.
pub fn write_bank(questions: &[Question], vocab: usize, len: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# V L count");
    let _ = writeln!(out, "{vocab} {len} {}", questions.len());
    for q in questions {
        let tuples: Vec<String> = q
            .accepting
            .iter()
            .map(|t| {
                t.iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join("-")
            })
            .collect();
        let _ = writeln!(
            out,
            "{} {:?} {}",
            q.id,
            q.nominal_difficulty,
            tuples.join(",")
        );
    }
    out
}

/// Parses the format produced by [`write_bank`]. Returns `(V, L, questions)`.
pub fn parse_bank(text: &str) -> Result<(usize, usize, Vec<Question>)> {
    let fail = |line: usize, message: String| DiscoError::Format { line, message };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines
        .next()
        .ok_or_else(|| fail(1, "missing header".into()))?;
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| fail(hline, format!("bad header `{header}`")))?;
    let [vocab, len, count] = nums[..] else {
        return Err(fail(
            hline,
            format!("header needs `V L count`, got `{header}`"),
        ));
    };

    let mut questions = Vec::with_capacity(count);
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(fail(ln, "expected `id difficulty tuples`".into()));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| fail(ln, format!("bad id `{}`", fields[0])))?;
        let difficulty: f64 = fields[1]
            .parse()
            .map_err(|_| fail(ln, format!("bad difficulty `{}`", fields[1])))?;
        let mut accepting = BTreeSet::new();
        for tuple in fields[2].split(',') {
            let toks: Vec<usize> = tuple
                .split('-')
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| fail(ln, format!("bad tuple `{tuple}`")))?;
            if toks.len() != len || toks.iter().any(|&t| t >= vocab) {
                return Err(fail(
                    ln,
                    format!("tuple `{tuple}` invalid for V={vocab}, L={len}"),
                ));
            }
            accepting.insert(toks);
        }
        if id != questions.len() {
            return Err(fail(
                ln,
                format!("question ids must be 0..count in order, got {id}"),
            ));
        }
        questions.push(Question::new(id, accepting, difficulty));
    }
    if questions.len() != count {
        return Err(fail(
            hline,
            format!("header says {count} questions, found {}", questions.len()),
        ));
    }
    Ok((vocab, len, questions))
}
