//! Tabular autoregressive softmax policy.
//!
//! Logits live in one flat table of shape
//! `(num_questions, max_len, vocab_size + 1, vocab_size)`. The third axis is
//! the previous token; index `vocab_size` is the BOS context used at
//! position 0 and, for history order 0, at every position.

pub mod checkpoint;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, Result};

/// Flat parameter-space vector sharing the indexing of [`PolicyParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        assert_eq!(self.len(), other.len(), "gradient dimension mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// True when every entry is exactly `0.0`.
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// A generated token sequence for one question.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence {
    pub question_id: usize,
    pub tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn new(question_id: usize, tokens: Vec<usize>) -> Self {
        Self {
            question_id,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A sampled sequence together with the sampling policy's untempered
/// per-token log-probabilities and its binary reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub sequence: TokenSequence,
    pub gen_logprobs: Vec<f64>,
    /// Set by the verifier; `false` straight out of [`PolicyParams::sample`].
    pub reward: bool,
}

impl Rollout {
    pub fn reward_value(&self) -> f64 {
        if self.reward {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    num_questions: usize,
    vocab_size: usize,
    max_len: usize,
    history_order: u8,
    logits: Vec<f64>,
}

impl PolicyParams {
    /// All-zero logits, i.e. the uniform policy.
    pub fn uniform(
        num_questions: usize,
        vocab_size: usize,
        max_len: usize,
        history_order: u8,
    ) -> Result<Self> {
        let len = Self::table_len(num_questions, vocab_size, max_len, history_order)?;
        Ok(Self {
            num_questions,
            vocab_size,
            max_len,
            history_order,
            logits: vec![0.0; len],
        })
    }

    pub fn from_logits(
        num_questions: usize,
        vocab_size: usize,
        max_len: usize,
        history_order: u8,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let len = Self::table_len(num_questions, vocab_size, max_len, history_order)?;
        if logits.len() != len {
            return domain(format!(
                "logit table has {} entries, expected {len}",
                logits.len()
            ));
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return domain(format!("logit {i} is not finite"));
        }
        Ok(Self {
            num_questions,
            vocab_size,
            max_len,
            history_order,
            logits,
        })
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(
        num_questions: usize,
        vocab_size: usize,
        max_len: usize,
        history_order: u8,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Self::uniform(num_questions, vocab_size, max_len, history_order)?;
        for x in &mut params.logits {
            *x = rng.gen_range(-scale..=scale);
        }
        Ok(params)
    }

    fn table_len(
        num_questions: usize,
        vocab_size: usize,
        max_len: usize,
        history_order: u8,
    ) -> Result<usize> {
        if num_questions == 0 || vocab_size == 0 || max_len == 0 {
            return domain("num_questions, vocab_size and max_len must be positive");
        }
        if history_order > 1 {
            return domain(format!("history_order must be 0 or 1, got {history_order}"));
        }
        Ok(num_questions * max_len * (vocab_size + 1) * vocab_size)
    }

    pub fn num_questions(&self) -> usize {
        self.num_questions
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn history_order(&self) -> u8 {
        self.history_order
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Mutable access for optimizers. Callers keep entries finite.
    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.num_questions == other.num_questions
            && self.vocab_size == other.vocab_size
            && self.max_len == other.max_len
            && self.history_order == other.history_order
    }

    pub fn zero_gradient(&self) -> GradientVector {
        GradientVector::zeros(self.num_params())
    }

    /// Offset of the logit row used at `position` after `prev` (ignored at
    /// position 0 and for history order 0).
    pub fn row_offset(&self, question_id: usize, position: usize, prev: usize) -> usize {
        let v = self.vocab_size;
        let ctx = if position == 0 || self.history_order == 0 {
            v
        } else {
            prev
        };
        ((question_id * self.max_len + position) * (v + 1) + ctx) * v
    }

    fn row(&self, question_id: usize, position: usize, prev: usize) -> &[f64] {
        let off = self.row_offset(question_id, position, prev);
        &self.logits[off..off + self.vocab_size]
    }

    /// Logit row visited at step `t` of `tokens`.
    fn visited_row_offset(&self, question_id: usize, tokens: &[usize], t: usize) -> usize {
        let prev = if t == 0 {
            self.vocab_size
        } else {
            tokens[t - 1]
        };
        self.row_offset(question_id, t, prev)
    }

    pub fn validate(&self, seq: &TokenSequence) -> Result<()> {
        if seq.question_id >= self.num_questions {
            return domain(format!(
                "unknown question_id {} (policy has {})",
                seq.question_id, self.num_questions
            ));
        }
        if seq.tokens.len() != self.max_len {
            return domain(format!(
                "sequence has {} tokens, policy length is {}",
                seq.tokens.len(),
                self.max_len
            ));
        }
        if let Some(&tok) = seq.tokens.iter().find(|&&t| t >= self.vocab_size) {
            return domain(format!(
                "token {tok} out of range for vocabulary of {}",
                self.vocab_size
            ));
        }
        Ok(())
    }

    /// Draw one sequence from `softmax(logits / temperature)`. The recorded
    /// log-probabilities are those of the untempered policy.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        question_id: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Rollout> {
        if question_id >= self.num_questions {
            return domain(format!("unknown question_id {question_id}"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return domain(format!("temperature must be positive, got {temperature}"));
        }
        let v = self.vocab_size;
        let mut tokens = Vec::with_capacity(self.max_len);
        let mut gen_logprobs = Vec::with_capacity(self.max_len);
        let mut tempered = vec![0.0; v];
        let mut prev = v;
        for t in 0..self.max_len {
            let row = self.row(question_id, t, prev);
            for (dst, &z) in tempered.iter_mut().zip(row) {
                *dst = z / temperature;
            }
            softmax_in_place(&mut tempered);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut tok = v - 1;
            for (j, &p) in tempered.iter().enumerate() {
                acc += p;
                if u < acc {
                    tok = j;
                    break;
                }
            }
            gen_logprobs.push(log_softmax_at(row, tok));
            tokens.push(tok);
            prev = tok;
        }
        Ok(Rollout {
            sequence: TokenSequence::new(question_id, tokens),
            gen_logprobs,
            reward: false,
        })
    }

    /// Per-token log-probabilities `log pi(o_t | q, o_<t)`.
    pub fn log_prob(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        self.validate(seq)?;
        Ok(self.log_prob_unchecked(seq))
    }

    pub(crate) fn log_prob_unchecked(&self, seq: &TokenSequence) -> Vec<f64> {
        (0..self.max_len)
            .map(|t| {
                let off = self.visited_row_offset(seq.question_id, &seq.tokens, t);
                log_softmax_at(&self.logits[off..off + self.vocab_size], seq.tokens[t])
            })
            .collect()
    }

    pub fn sequence_log_prob(&self, seq: &TokenSequence) -> Result<f64> {
        Ok(self.log_prob(seq)?.iter().sum())
    }

    /// Gradient of the sequence log-probability with respect to every logit.
    pub fn grad_log_prob(&self, seq: &TokenSequence) -> Result<GradientVector> {
        self.validate(seq)?;
        let mut grad = self.zero_gradient();
        for t in 0..self.max_len {
            self.accumulate_token_grad(seq, t, 1.0, &mut grad);
        }
        Ok(grad)
    }

    /// `grad += scale * d log pi(o_t | .) / d logits`: one-hot minus softmax
    /// on the visited row.
    pub fn accumulate_token_grad(
        &self,
        seq: &TokenSequence,
        t: usize,
        scale: f64,
        grad: &mut GradientVector,
    ) {
        if scale == 0.0 {
            return;
        }
        let v = self.vocab_size;
        let off = self.visited_row_offset(seq.question_id, &seq.tokens, t);
        let mut probs = self.logits[off..off + v].to_vec();
        softmax_in_place(&mut probs);
        let out = &mut grad.as_mut_slice()[off..off + v];
        for (j, (g, p)) in out.iter_mut().zip(&probs).enumerate() {
            let indicator = if j == seq.tokens[t] { 1.0 } else { 0.0 };
            *g += scale * (indicator - p);
        }
    }

    /// Shannon entropy (nats) of each visited context distribution.
    pub fn context_entropies(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        self.validate(seq)?;
        Ok((0..self.max_len)
            .map(|t| {
                let off = self.visited_row_offset(seq.question_id, &seq.tokens, t);
                entropy(&self.logits[off..off + self.vocab_size])
            })
            .collect())
    }

    /// Mean over positions of the entropy at each visited context.
    pub fn token_entropy(&self, seq: &TokenSequence) -> Result<f64> {
        let h = self.context_entropies(seq)?;
        Ok(h.iter().sum::<f64>() / h.len() as f64)
    }

    /// `grad += scale * d token_entropy / d logits`.
    pub fn accumulate_entropy_grad(
        &self,
        seq: &TokenSequence,
        scale: f64,
        grad: &mut GradientVector,
    ) {
        let v = self.vocab_size;
        let per_pos = scale / self.max_len as f64;
        for t in 0..self.max_len {
            let off = self.visited_row_offset(seq.question_id, &seq.tokens, t);
            let row = &self.logits[off..off + v];
            let h = entropy(row);
            let out = &mut grad.as_mut_slice()[off..off + v];
            for (k, g) in out.iter_mut().enumerate() {
                let lp = log_softmax_at(row, k);
                *g -= per_pos * lp.exp() * (lp + h);
            }
        }
    }
}

/// Deterministic stream keyed by `(seed, stream)`. Distinct streams never
/// overlap, so rollouts can be drawn per question in any order.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_softmax_at(row: &[f64], j: usize) -> f64 {
    row[j] - log_sum_exp(row)
}

fn entropy(row: &[f64]) -> f64 {
    let lse = log_sum_exp(row);
    -row.iter()
        .map(|&z| {
            let lp = z - lse;
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * lp
            }
        })
        .sum::<f64>()
}
