//! Flat `key = value` run configuration with dotted keys.
//!
//! Blank lines and `#` comments are ignored. Unknown keys, duplicate keys and
//! keys the chosen objective does not use are errors that name the line and
//! the field. [`RunConfig::to_text`] writes every effective value back out,
//! and parsing that text yields the same configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use disco_core::constraint::KlMode;
use disco_core::objectives::{self, ObjectiveKind, ObjectiveSpec, ScoreVariant, ScoringKind};
use disco_core::policy::stream_rng;
use disco_core::tasks::{log_spaced_difficulties, make_bank, parse_bank, Question};
use disco_core::{DiscoError, PolicyParams, TrainConfig};

/// Stream reserved for bank generation.
const BANK_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, field: &str, message: impl Into<String>) -> Self {
        Self {
            line: Some(line),
            field: Some(field.to_string()),
            message: message.into(),
        }
    }

    fn field(field: &str, message: impl Into<String>) -> Self {
        Self {
            line: None,
            field: Some(field.to_string()),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if let Some(field) = &self.field {
            write!(f, "{field}: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq)]
pub enum BankSpec {
    File(PathBuf),
    Generated {
        questions: usize,
        difficulty_min: f64,
        difficulty_max: f64,
        vocab: usize,
        len: usize,
    },
}

impl Default for BankSpec {
    fn default() -> Self {
        BankSpec::Generated {
            questions: 32,
            difficulty_min: 0.03,
            difficulty_max: 0.9,
            vocab: 4,
            len: 3,
        }
    }
}

impl BankSpec {
    /// Vocabulary size, sequence length and questions. Generated banks draw
    /// from a stream of `seed` that training never uses.
    pub fn load(&self, seed: u64) -> Result<(usize, usize, Vec<Question>), DiscoError> {
        match self {
            BankSpec::File(path) => parse_bank(&std::fs::read_to_string(path)?),
            BankSpec::Generated {
                questions,
                difficulty_min,
                difficulty_max,
                vocab,
                len,
            } => {
                let profile = log_spaced_difficulties(*questions, *difficulty_min, *difficulty_max);
                let mut rng = stream_rng(seed, BANK_STREAM);
                Ok((
                    *vocab,
                    *len,
                    make_bank(*questions, &profile, *vocab, *len, &mut rng)?,
                ))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub bank: BankSpec,
    pub history_order: u8,
    pub output_dir: PathBuf,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub ckpt_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            bank: BankSpec::default(),
            history_order: 1,
            output_dir: PathBuf::from("out"),
            ckpt_every: 0,
        }
    }
}

impl RunConfig {
    /// Bank and uniform initial policy sized to it.
    pub fn setup(&self) -> Result<(Vec<Question>, PolicyParams), DiscoError> {
        let (vocab, len, bank) = self.bank.load(self.train.seed)?;
        let questions = bank.iter().map(|q| q.id + 1).max().unwrap_or(0);
        let theta0 = PolicyParams::uniform(questions, vocab, len, self.history_order)?;
        Ok((bank, theta0))
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            field: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let mut config = parse(&text)?;
        if let BankSpec::File(p) = &mut config.bank {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
            if !p.is_file() {
                return Err(ConfigError::field(
                    "bank.path",
                    format!("no such file: {}", p.display()),
                ));
            }
        }
        Ok(config)
    }

    /// Every effective setting, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", t.seed.to_string());
        put("steps", t.steps.to_string());
        put("batch.questions", t.batch_questions.to_string());
        put("batch.minibatch", t.minibatch.to_string());
        put("rollout.n", t.n_responses.to_string());
        put("rollout.temperature", format!("{:?}", t.temperature));
        put("optim.lr", format!("{:?}", t.learning_rate));
        put("optim.weight_decay", format!("{:?}", t.weight_decay));
        put("optim.beta1", format!("{:?}", t.beta1));
        put("optim.beta2", format!("{:?}", t.beta2));
        put("optim.eps", format!("{:?}", t.adam_eps));
        let spec = &t.objective;
        put("objective.kind", spec.name().to_string());
        for (k, v) in objective_fields(spec) {
            put(k, v);
        }
        put(
            "objective.skip_degenerate",
            spec.skip_degenerate.to_string(),
        );
        let tr = &t.trust_region;
        put("kl.mode", tr.mode.name().to_string());
        put("kl.delta", format!("{:?}", tr.delta));
        put("kl.beta", format!("{:?}", tr.beta));
        if let KlMode::Plain { coeff } = tr.mode {
            put("kl.coeff", format!("{coeff:?}"));
        }
        match &self.bank {
            BankSpec::File(p) => put("bank.path", p.display().to_string()),
            BankSpec::Generated {
                questions,
                difficulty_min,
                difficulty_max,
                vocab,
                len,
            } => {
                put("bank.questions", questions.to_string());
                put("bank.difficulty_min", format!("{difficulty_min:?}"));
                put("bank.difficulty_max", format!("{difficulty_max:?}"));
                put("bank.vocab", vocab.to_string());
                put("bank.len", len.to_string());
            }
        }
        put("policy.history_order", self.history_order.to_string());
        put("output.dir", self.output_dir.display().to_string());
        put("ckpt.every", self.ckpt_every.to_string());
        out
    }
}

/// Kind-specific objective keys with their current values.
fn objective_fields(spec: &ObjectiveSpec) -> Vec<(&'static str, String)> {
    let f = |x: f64| format!("{x:?}");
    let eps = match spec.scoring.variant {
        ScoreVariant::ClippedLRatio { eps_low, eps_high } => Some((eps_low, eps_high)),
        _ => None,
    };
    match spec.kind {
        ObjectiveKind::Grpo {
            beta_ref,
            entropy_coeff,
        } => {
            let mut v = vec![
                ("objective.epsilon", f(eps.unwrap().0)),
                ("objective.beta_ref", f(beta_ref)),
            ];
            if entropy_coeff > 0.0 {
                v.push(("objective.entropy_coeff", f(entropy_coeff)));
            }
            v
        }
        ObjectiveKind::GrpoRw { beta_ref } => {
            vec![
                ("objective.epsilon", f(eps.unwrap().0)),
                ("objective.beta_ref", f(beta_ref)),
            ]
        }
        ObjectiveKind::DrGrpo => vec![("objective.epsilon", f(eps.unwrap().0))],
        ObjectiveKind::Dapo => {
            let (lo, hi) = eps.unwrap();
            vec![
                ("objective.epsilon_low", f(lo)),
                ("objective.epsilon_high", f(hi)),
            ]
        }
        ObjectiveKind::Gpg { alpha } => vec![("objective.alpha", f(alpha))],
        ObjectiveKind::Trpa { beta, kl_coeff } => {
            vec![
                ("objective.beta_trpa", f(beta)),
                ("objective.trpa_kl_coeff", f(kl_coeff)),
            ]
        }
        ObjectiveKind::DiscoB => vec![("objective.scoring", spec.scoring.name().to_string())],
        ObjectiveKind::Disco { tau } => vec![
            ("objective.scoring", spec.scoring.name().to_string()),
            ("objective.tau", f(tau)),
        ],
    }
}

/// Keys each objective accepts beyond `objective.kind` and
/// `objective.skip_degenerate`.
fn allowed_objective_keys(kind: &str) -> &'static [&'static str] {
    match kind {
        "grpo" | "grpo-er" => &[
            "objective.epsilon",
            "objective.beta_ref",
            "objective.entropy_coeff",
        ],
        "grpo-rw" => &["objective.epsilon", "objective.beta_ref"],
        "dr-grpo" => &["objective.epsilon"],
        "dapo" => &["objective.epsilon_low", "objective.epsilon_high"],
        "gpg" => &["objective.alpha"],
        "trpa" => &["objective.beta_trpa", "objective.trpa_kl_coeff"],
        "disco-b" => &["objective.scoring"],
        "disco" => &["objective.scoring", "objective.tau"],
        _ => &[],
    }
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "steps",
    "batch.questions",
    "batch.minibatch",
    "rollout.n",
    "rollout.temperature",
    "optim.lr",
    "optim.weight_decay",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "objective.kind",
    "objective.scoring",
    "objective.tau",
    "objective.epsilon",
    "objective.epsilon_low",
    "objective.epsilon_high",
    "objective.beta_ref",
    "objective.alpha",
    "objective.beta_trpa",
    "objective.trpa_kl_coeff",
    "objective.entropy_coeff",
    "objective.skip_degenerate",
    "kl.mode",
    "kl.delta",
    "kl.beta",
    "kl.coeff",
    "bank.path",
    "bank.questions",
    "bank.difficulty_min",
    "bank.difficulty_max",
    "bank.vocab",
    "bank.len",
    "policy.history_order",
    "output.dir",
    "ckpt.every",
];

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, raw)) => raw
                .parse()
                .map(Some)
                .map_err(|_| ConfigError::at(line, key, format!("invalid value `{raw}`"))),
        }
    }

    fn line(&self, key: &str) -> Option<usize> {
        self.map.get(key).map(|e| e.0)
    }
}

fn tokenize(text: &str) -> Result<Entries, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(ConfigError {
                line: Some(line),
                field: None,
                message: format!("expected `key = value`, found `{content}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if !KNOWN_KEYS.contains(&k) {
            return Err(ConfigError::at(line, k, "unknown key"));
        }
        if v.is_empty() {
            return Err(ConfigError::at(line, k, "missing value"));
        }
        if let Some((first, _)) = map.insert(k.to_string(), (line, v.to_string())) {
            return Err(ConfigError::at(
                line,
                k,
                format!("duplicate key (first set on line {first})"),
            ));
        }
    }
    Ok(Entries { map })
}

fn core_error(e: &Entries, key: &str, err: DiscoError) -> ConfigError {
    ConfigError {
        line: e.line(key),
        field: Some(key.to_string()),
        message: err.to_string(),
    }
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let mut e = tokenize(text)?;
    let mut cfg = RunConfig::default();

    // objective first: it decides which other keys are legal
    let kind_line = e.line("objective.kind");
    let kind: String = e
        .take("objective.kind")?
        .unwrap_or_else(|| "disco".to_string());
    let mut spec = ObjectiveSpec::default_for(&kind).map_err(|err| ConfigError {
        line: kind_line,
        field: Some("objective.kind".into()),
        message: err.to_string(),
    })?;
    let allowed = allowed_objective_keys(&kind);
    for (key, (line, _)) in &e.map {
        if key.starts_with("objective.")
            && key != "objective.skip_degenerate"
            && !allowed.contains(&key.as_str())
        {
            return Err(ConfigError::at(
                *line,
                key,
                format!("not used by objective `{kind}`"),
            ));
        }
    }
    let scoring_line = e.line("objective.scoring");
    if let Some(name) = e.take::<String>("objective.scoring")? {
        let scoring: ScoringKind = name.parse().map_err(|err| ConfigError {
            line: scoring_line,
            field: Some("objective.scoring".into()),
            message: format!("{err}"),
        })?;
        if matches!(scoring.variant, ScoreVariant::ClippedLRatio { .. }) {
            return Err(ConfigError {
                line: scoring_line,
                field: Some("objective.scoring".into()),
                message: format!("clipped scoring is not available for `{kind}`"),
            });
        }
        spec.scoring = scoring;
        if let ObjectiveKind::Disco { tau } = &mut spec.kind {
            *tau = match scoring.variant {
                ScoreVariant::LRatio => objectives::DEFAULT_TAU_L_RATIO,
                _ => objectives::DEFAULT_TAU_LOG_L,
            };
        }
    }
    if let Some(tau) = e.take::<f64>("objective.tau")? {
        spec.kind = ObjectiveKind::Disco { tau };
    }
    let eps = e.take::<f64>("objective.epsilon")?;
    let eps_low = e.take::<f64>("objective.epsilon_low")?;
    let eps_high = e.take::<f64>("objective.epsilon_high")?;
    if let ScoreVariant::ClippedLRatio {
        eps_low: lo,
        eps_high: hi,
    } = &mut spec.scoring.variant
    {
        if let Some(x) = eps {
            (*lo, *hi) = (x, x);
        }
        if let Some(x) = eps_low {
            *lo = x;
        }
        if let Some(x) = eps_high {
            *hi = x;
        }
    }
    let beta_ref = e.take::<f64>("objective.beta_ref")?;
    let entropy = e.take::<f64>("objective.entropy_coeff")?;
    let alpha = e.take::<f64>("objective.alpha")?;
    let beta_trpa = e.take::<f64>("objective.beta_trpa")?;
    let trpa_kl = e.take::<f64>("objective.trpa_kl_coeff")?;
    match &mut spec.kind {
        ObjectiveKind::Grpo {
            beta_ref: b,
            entropy_coeff,
        } => {
            *b = beta_ref.unwrap_or(*b);
            *entropy_coeff = entropy.unwrap_or(*entropy_coeff);
        }
        ObjectiveKind::GrpoRw { beta_ref: b } => *b = beta_ref.unwrap_or(*b),
        ObjectiveKind::Gpg { alpha: a } => *a = alpha.unwrap_or(*a),
        ObjectiveKind::Trpa { beta, kl_coeff } => {
            *beta = beta_trpa.unwrap_or(*beta);
            *kl_coeff = trpa_kl.unwrap_or(*kl_coeff);
        }
        _ => {}
    }
    if let Some(skip) = e.take::<bool>("objective.skip_degenerate")? {
        spec.skip_degenerate = skip;
    }
    spec.validate().map_err(|err| ConfigError {
        line: kind_line,
        field: Some("objective.kind".into()),
        message: err.to_string(),
    })?;

    let t = &mut cfg.train;
    t.objective = spec;
    t.trust_region = TrainConfig::default_trust_region(&spec);
    macro_rules! set {
        ($key:literal, $field:expr) => {
            if let Some(v) = e.take($key)? {
                $field = v;
            }
        };
    }
    set!("seed", t.seed);
    set!("steps", t.steps);
    set!("batch.questions", t.batch_questions);
    set!("batch.minibatch", t.minibatch);
    set!("rollout.n", t.n_responses);
    set!("rollout.temperature", t.temperature);
    set!("optim.lr", t.learning_rate);
    set!("optim.weight_decay", t.weight_decay);
    set!("optim.beta1", t.beta1);
    set!("optim.beta2", t.beta2);
    set!("optim.eps", t.adam_eps);

    let mode_line = e.line("kl.mode");
    if let Some(mode) = e.take::<String>("kl.mode")? {
        t.trust_region.mode = mode.parse::<KlMode>().map_err(|err| ConfigError {
            line: mode_line,
            field: Some("kl.mode".into()),
            message: err.to_string(),
        })?;
    }
    let coeff_line = e.line("kl.coeff");
    if let Some(c) = e.take::<f64>("kl.coeff")? {
        match &mut t.trust_region.mode {
            KlMode::Plain { coeff } => *coeff = c,
            _ => {
                return Err(ConfigError {
                    line: coeff_line,
                    field: Some("kl.coeff".into()),
                    message: "only used with kl.mode = plain".into(),
                })
            }
        }
    }
    set!("kl.delta", t.trust_region.delta);
    set!("kl.beta", t.trust_region.beta);

    let path_line = e.line("bank.path");
    let path: Option<String> = e.take("bank.path")?;
    let generated = [
        "bank.questions",
        "bank.difficulty_min",
        "bank.difficulty_max",
        "bank.vocab",
        "bank.len",
    ];
    if let Some(p) = path {
        if let Some(k) = generated.iter().find(|k| e.map.contains_key(**k)) {
            return Err(ConfigError {
                line: path_line,
                field: Some("bank.path".into()),
                message: format!("conflicts with `{k}`"),
            });
        }
        cfg.bank = BankSpec::File(PathBuf::from(p));
    } else if let BankSpec::Generated {
        questions,
        difficulty_min,
        difficulty_max,
        vocab,
        len,
    } = &mut cfg.bank
    {
        set!("bank.questions", *questions);
        set!("bank.difficulty_min", *difficulty_min);
        set!("bank.difficulty_max", *difficulty_max);
        set!("bank.vocab", *vocab);
        set!("bank.len", *len);
        let ok = *questions > 0
            && *vocab >= 2
            && *len >= 1
            && 0.0 < *difficulty_min
            && difficulty_min <= difficulty_max
            && *difficulty_max < 1.0;
        if !ok {
            return Err(ConfigError::field(
                "bank",
                "need questions > 0, vocab >= 2, len >= 1 and 0 < difficulty_min <= difficulty_max < 1",
            ));
        }
    }
    set!("policy.history_order", cfg.history_order);
    if cfg.history_order > 1 {
        return Err(ConfigError::field("policy.history_order", "must be 0 or 1"));
    }
    let out: Option<String> = e.take("output.dir")?;
    if let Some(dir) = out {
        cfg.output_dir = PathBuf::from(dir);
    }
    set!("ckpt.every", cfg.ckpt_every);
    debug_assert!(e.map.is_empty(), "unconsumed keys: {:?}", e.map.keys());

    cfg.train
        .validate()
        .map_err(|err| core_error(&e, "train", err))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_objective_round_trips() {
        for name in objectives::OBJECTIVE_NAMES {
            let cfg = parse(&format!("objective.kind = {name}\nseed = 7\n")).unwrap();
            assert_eq!(cfg.train.objective.name(), name);
            assert_eq!(parse(&cfg.to_text()).unwrap(), cfg, "{name}");
        }
        let plain = parse("kl.mode = plain\nkl.coeff = 0.002\n").unwrap();
        assert_eq!(parse(&plain.to_text()).unwrap(), plain);
    }

    #[test]
    fn scoring_sets_tau_default() {
        let cfg = parse("objective.scoring = l-ratio\n").unwrap();
        assert_eq!(cfg.train.objective.kind, ObjectiveKind::Disco { tau: 1.0 });
        let cfg = parse("objective.scoring = l-ratio\nobjective.tau = 3\n").unwrap();
        assert_eq!(cfg.train.objective.kind, ObjectiveKind::Disco { tau: 3.0 });
    }

    #[test]
    fn overrides_apply() {
        let cfg =
            parse("objective.kind = dapo\nobjective.epsilon_high = 0.3\nsteps = 12 # short\n")
                .unwrap();
        assert_eq!(
            cfg.train.objective.scoring.variant,
            ScoreVariant::ClippedLRatio {
                eps_low: 0.2,
                eps_high: 0.3
            }
        );
        assert_eq!(cfg.train.steps, 12);
        assert_eq!(cfg.train.trust_region.mode, KlMode::None);
    }

    #[test]
    fn errors_name_line_and_field() {
        let err = parse("seed = 1\nobjective.kind = ppo\n").unwrap_err();
        assert_eq!(
            (err.line, err.field.as_deref()),
            (Some(2), Some("objective.kind"))
        );
        let err = parse("objective.kind = grpo\nobjective.tau = 2\n").unwrap_err();
        assert_eq!(
            (err.line, err.field.as_deref()),
            (Some(2), Some("objective.tau"))
        );
        let err = parse("steps = many\n").unwrap_err();
        assert_eq!(err.field.as_deref(), Some("steps"));
        let err = parse("foo = 1\n").unwrap_err();
        assert_eq!(err.field.as_deref(), Some("foo"));
        let err = parse("seed = 1\nseed = 2\n").unwrap_err();
        assert_eq!(err.line, Some(2));
        assert!(parse("no equals sign\n").is_err());
        assert!(parse("kl.coeff = 0.1\n").is_err());
        assert!(parse("batch.minibatch = 5\n").is_err());
        assert!(parse("bank.path = x.txt\nbank.vocab = 3\n").is_err());
    }

    #[test]
    fn generated_bank_is_seeded() {
        let cfg =
            parse("bank.questions = 4\nbank.vocab = 3\nbank.len = 2\nbank.difficulty_min = 0.2\n")
                .unwrap();
        let (bank, theta0) = cfg.setup().unwrap();
        assert_eq!(bank.len(), 4);
        assert_eq!(theta0.num_questions(), 4);
        assert_eq!(cfg.setup().unwrap().0, bank);
    }
}
