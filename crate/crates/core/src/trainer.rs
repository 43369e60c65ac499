//! The training loop: snapshot the old policy, sample groups, then ascend
//! objective minus KL penalty with AdamW over question minibatches.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::constraint::{self, KlMode, TrustRegionSpec};
use crate::error::{DiscoError, Result};
use crate::objectives::{self, ObjectiveKind, ObjectiveSpec, Policies, ScoringKind};
use crate::policy::checkpoint::{self, CheckpointReader, Encoding};
use crate::policy::{stream_rng, GradientVector, PolicyParams};
use crate::tasks::{generate_group, Question, RolloutGroup};

pub const HISTOGRAM_BINS: usize = 10;
pub const DEFAULT_LEARNING_RATE: f64 = 0.005;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_questions: usize,
    /// Questions per minibatch; must divide `batch_questions`.
    pub minibatch: usize,
    pub n_responses: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub temperature: f64,
    pub objective: ObjectiveSpec,
    pub trust_region: TrustRegionSpec,
    pub seed: u64,
    /// Worker threads for rollout generation. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_questions: 16,
            minibatch: 4,
            n_responses: 8,
            learning_rate: DEFAULT_LEARNING_RATE,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            temperature: 0.6,
            objective: ObjectiveSpec::disco(ScoringKind::log_l(), objectives::DEFAULT_TAU_LOG_L),
            trust_region: TrustRegionSpec::default(),
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Default trust region for an objective: the hinge for the DisCO family,
    /// none for the baselines (which carry their own regularizers).
    pub fn default_trust_region(objective: &ObjectiveSpec) -> TrustRegionSpec {
        match objective.kind {
            ObjectiveKind::Disco { .. } | ObjectiveKind::DiscoB => TrustRegionSpec::default(),
            _ => TrustRegionSpec::disabled(),
        }
    }

    pub fn with_objective(objective: ObjectiveSpec) -> Self {
        Self {
            objective,
            trust_region: Self::default_trust_region(&objective),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DiscoError::Config(msg));
        if self.batch_questions == 0 || self.minibatch == 0 {
            return bad("batch.questions and batch.minibatch must be positive".into());
        }
        if self.batch_questions % self.minibatch != 0 {
            return bad(format!(
                "batch.minibatch ({}) must divide batch.questions ({})",
                self.minibatch, self.batch_questions
            ));
        }
        if self.n_responses < 2 {
            return bad(format!(
                "rollout.n must be at least 2, got {}",
                self.n_responses
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("optim.lr must be >= 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "optim.weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("optim.beta1 and optim.beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("optim.eps must be > 0, got {}", self.adam_eps));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "rollout.temperature must be > 0, got {}",
                self.temperature
            ));
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        self.objective.validate()?;
        self.trust_region.validate()
    }

    fn adam(&self) -> AdamW {
        AdamW {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(num_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
        }
    }
}

/// One AdamW step that ascends along `ascent`. Decay is applied to the
/// parameters before the moment update; the moments track the descent
/// gradient `-ascent`.
pub fn adamw_step(
    params: &mut [f64],
    ascent: &GradientVector,
    state: &mut OptimizerState,
    hp: &AdamW,
) -> Result<()> {
    let n = params.len();
    if ascent.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(DiscoError::Domain(format!(
            "dimension mismatch: {n} parameters, {} gradient entries, {} moments",
            ascent.len(),
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - hp.lr * hp.weight_decay;
    for (i, x) in params.iter_mut().enumerate() {
        *x *= decay;
        let g = -ascent.as_slice()[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        *x -= hp.lr * (*m / c1) / ((*v / c2).sqrt() + hp.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean `p_hat` over the step's groups.
    pub reward_mean: f64,
    /// Mean per-token entropy of the generating policy on the sampled rollouts.
    pub entropy: f64,
    /// KL estimate of the step's last minibatch, before its update.
    pub kl_hat: f64,
    pub frac_solved: f64,
    pub frac_unsolved: f64,
    pub histogram: [usize; HISTOGRAM_BINS],
    /// Whether every minibatch of the step had an empty objective.
    pub objective_skipped: bool,
}

pub const METRICS_HEADER: [&str; 6] = [
    "step",
    "reward_mean",
    "entropy",
    "kl_hat",
    "frac_solved",
    "frac_unsolved",
];

/// Metric columns after `step`, in CSV order.
pub fn metric_columns() -> Vec<String> {
    METRICS_HEADER[1..]
        .iter()
        .map(|s| s.to_string())
        .chain((0..HISTOGRAM_BINS).map(|i| format!("hist_{i}")))
        .collect()
}

impl MetricsRecord {
    fn values(&self) -> Vec<String> {
        [
            self.reward_mean,
            self.entropy,
            self.kl_hat,
            self.frac_solved,
            self.frac_unsolved,
        ]
        .iter()
        .map(|x| format!("{x:?}"))
        .chain(self.histogram.iter().map(|c| c.to_string()))
        .collect()
    }
}

fn histogram_bin(p: f64) -> usize {
    ((p * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
}

/// Per-step diagnostics. `generator` is the policy that sampled the groups.
pub fn collect_metrics(
    step: usize,
    groups: &[RolloutGroup],
    generator: &PolicyParams,
    kl_hat: f64,
) -> Result<MetricsRecord> {
    let count = groups.len().max(1) as f64;
    let mut histogram = [0usize; HISTOGRAM_BINS];
    let mut entropy = 0.0;
    let mut rollouts = 0usize;
    for g in groups {
        histogram[histogram_bin(g.p_hat)] += 1;
        for r in &g.rollouts {
            entropy += generator.token_entropy(&r.sequence)?;
            rollouts += 1;
        }
    }
    Ok(MetricsRecord {
        step,
        reward_mean: groups.iter().map(|g| g.p_hat).sum::<f64>() / count,
        entropy: entropy / rollouts.max(1) as f64,
        kl_hat,
        frac_solved: groups.iter().filter(|g| g.p_hat == 1.0).count() as f64 / count,
        frac_unsolved: groups.iter().filter(|g| g.p_hat == 0.0).count() as f64 / count,
        histogram,
        objective_skipped: false,
    })
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("step");
    for c in metric_columns() {
        out.push(',');
        out.push_str(&c);
    }
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{},{}", r.step, r.values().join(","));
    }
    out
}

/// Aligned metrics of several runs: `step`, then one column group per run
/// with columns named `<label>.<metric>`.
pub fn wide_metrics_csv(labels: &[String], runs: &[Vec<MetricsRecord>]) -> Result<String> {
    if labels.len() != runs.len() || runs.is_empty() {
        return Err(DiscoError::Domain("one label per run is required".into()));
    }
    let steps = runs[0].len();
    if runs.iter().any(|r| r.len() != steps) {
        return Err(DiscoError::Domain("runs have different lengths".into()));
    }
    let mut out = String::from("step");
    for label in labels {
        for c in metric_columns() {
            let _ = write!(out, ",{label}.{c}");
        }
    }
    out.push('\n');
    for i in 0..steps {
        out.push_str(&runs[0][i].step.to_string());
        for run in runs {
            out.push(',');
            out.push_str(&run[i].values().join(","));
        }
        out.push('\n');
    }
    Ok(out)
}

/// What the step hook sees after each step.
pub struct StepView<'a> {
    pub step: usize,
    pub params: &'a PolicyParams,
    pub optimizer: &'a OptimizerState,
    pub metrics: &'a MetricsRecord,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub optimizer: OptimizerState,
    pub metrics: Vec<MetricsRecord>,
}

fn stream_id(step: usize, slot: usize, batch: usize) -> u64 {
    (step as u64) * (batch as u64 + 1) + slot as u64
}

fn select_questions(bank_len: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, stream_id(step, 0, batch));
    if batch <= bank_len {
        index::sample(&mut rng, bank_len, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.gen_range(0..bank_len)).collect()
    }
}

fn generate_groups(
    config: &TrainConfig,
    bank: &[Question],
    chosen: &[usize],
    generator: &PolicyParams,
    step: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<RolloutGroup>> {
    let one = |(slot, &qi): (usize, &usize)| {
        let mut rng = stream_rng(
            config.seed,
            stream_id(step, slot + 1, config.batch_questions),
        );
        generate_group(
            generator,
            &bank[qi],
            config.n_responses,
            config.temperature,
            &mut rng,
        )
    };
    match pool {
        Some(pool) => pool.install(|| chosen.par_iter().enumerate().map(one).collect()),
        None => chosen.iter().enumerate().map(one).collect(),
    }
}

fn check_bank(bank: &[Question], params: &PolicyParams) -> Result<()> {
    if bank.is_empty() {
        return Err(DiscoError::Config("question bank is empty".into()));
    }
    for q in bank {
        if q.id >= params.num_questions() {
            return Err(DiscoError::Config(format!(
                "question {} has no rows in a policy with {} questions",
                q.id,
                params.num_questions()
            )));
        }
        if let Some(bad) = q
            .accepting
            .iter()
            .find(|t| t.len() != params.max_len() || t.iter().any(|&x| x >= params.vocab_size()))
        {
            return Err(DiscoError::Config(format!(
                "question {} accepts {:?}, incompatible with the policy",
                q.id, bad
            )));
        }
    }
    Ok(())
}

/// Runs the full loop from `theta0`, which also serves as the frozen
/// reference policy. `hook` runs after every step.
pub fn train_with_hook(
    config: &TrainConfig,
    bank: &[Question],
    theta0: &PolicyParams,
    mut hook: impl FnMut(&StepView) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_bank(bank, theta0)?;
    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| DiscoError::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let reference = theta0.clone();
    let mut theta = theta0.clone();
    let mut optimizer = OptimizerState::new(theta.num_params());
    let adam = config.adam();
    let mut metrics = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        let chosen = select_questions(bank.len(), config.batch_questions, config.seed, step);
        let old = theta.clone();
        let groups = generate_groups(config, bank, &chosen, &old, step, pool.as_ref())?;

        let mut kl_hat = 0.0;
        let mut skipped = 0;
        let minibatches = groups.chunks(config.minibatch);
        let count = minibatches.len();
        for mb in minibatches {
            let rollouts = mb.iter().flat_map(|g| g.rollouts.iter());
            let term = constraint::constraint_term(&config.trust_region, &theta, &old, rollouts)?;
            kl_hat = term.kl_hat;
            let policies = Policies::new(&theta, &old).with_reference(&reference);
            let mut direction =
                match objectives::objective_value_and_gradient(&config.objective, &policies, mb) {
                    Ok((_, g)) => g,
                    Err(DiscoError::EmptyBatch) => {
                        skipped += 1;
                        if term.gradient.is_zero() {
                            continue;
                        }
                        theta.zero_gradient()
                    }
                    Err(e) => return Err(e),
                };
            direction.add_scaled(&term.gradient, -1.0);
            adamw_step(theta.logits_mut(), &direction, &mut optimizer, &adam)?;
        }

        let mut record = collect_metrics(step, &groups, &old, kl_hat)?;
        record.objective_skipped = skipped == count;
        hook(&StepView {
            step,
            params: &theta,
            optimizer: &optimizer,
            metrics: &record,
        })?;
        metrics.push(record);
    }
    Ok(TrainOutcome {
        params: theta,
        optimizer,
        metrics,
    })
}

pub fn train(
    config: &TrainConfig,
    bank: &[Question],
    theta0: &PolicyParams,
) -> Result<TrainOutcome> {
    train_with_hook(config, bank, theta0, |_| Ok(()))
}

/// Trains every config on the same bank and initial policy. All configs must
/// share seed, step count and temperature.
pub fn compare_run(
    configs: &[TrainConfig],
    bank: &[Question],
    theta0: &PolicyParams,
) -> Result<Vec<Vec<MetricsRecord>>> {
    let Some(first) = configs.first() else {
        return Err(DiscoError::Config("nothing to compare".into()));
    };
    for (i, c) in configs.iter().enumerate() {
        if c.steps != first.steps {
            return Err(DiscoError::Config(format!(
                "config {} runs {} steps, config 0 runs {}",
                i, c.steps, first.steps
            )));
        }
        if c.seed != first.seed {
            return Err(DiscoError::Config(format!(
                "config {} has seed {}, config 0 has {}",
                i, c.seed, first.seed
            )));
        }
        if c.temperature != first.temperature {
            return Err(DiscoError::Config(format!(
                "config {i} uses a different temperature"
            )));
        }
    }
    configs
        .iter()
        .map(|c| Ok(train(c, bank, theta0)?.metrics))
        .collect()
}

const OPTIMIZER_MAGIC: &str = "optimizer 1";

/// Policy checkpoint followed by the optimizer moments.
pub fn write_checkpoint<W: Write>(
    w: &mut W,
    params: &PolicyParams,
    state: &OptimizerState,
    enc: Encoding,
) -> std::io::Result<()> {
    checkpoint::write_policy(w, params, enc)?;
    writeln!(w, "{OPTIMIZER_MAGIC}")?;
    writeln!(w, "step {}", state.step)?;
    writeln!(w, "moments {}", state.first_moment.len())?;
    checkpoint::write_f64_block(w, &state.first_moment, enc, params.vocab_size())?;
    checkpoint::write_f64_block(w, &state.second_moment, enc, params.vocab_size())
}

pub fn encode_checkpoint(params: &PolicyParams, state: &OptimizerState, enc: Encoding) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, state, enc).expect("writing to a Vec cannot fail");
    buf
}

/// Reads a checkpoint; the optimizer appendix is optional.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(PolicyParams, Option<OptimizerState>)> {
    let mut r = CheckpointReader::new(bytes);
    let params = r.read_policy()?;
    if r.at_end() {
        return Ok((params, None));
    }
    let enc = r.encoding().unwrap_or(Encoding::Text);
    let magic = r.next_line()?;
    if magic != OPTIMIZER_MAGIC {
        return Err(DiscoError::Format {
            line: 0,
            message: format!("expected `{OPTIMIZER_MAGIC}`, found `{magic}`"),
        });
    }
    let step: u64 = r.keyed("step")?;
    let n: usize = r.keyed("moments")?;
    if n != params.num_params() {
        return Err(DiscoError::Format {
            line: 0,
            message: format!(
                "optimizer has {n} moments, policy has {} parameters",
                params.num_params()
            ),
        });
    }
    let first_moment = r.read_f64_block(n, enc)?;
    let second_moment = r.read_f64_block(n, enc)?;
    Ok((
        params,
        Some(OptimizerState {
            first_moment,
            second_moment,
            step,
        }),
    ))
}

/// Whether any configured KL term is active.
pub fn uses_trust_region(config: &TrainConfig) -> bool {
    config.trust_region.mode != KlMode::None
}
