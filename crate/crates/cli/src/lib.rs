//! Command-line front end: config parsing and the `train`, `compare`,
//! `decompose` and `gradcheck` commands.

pub mod config;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use disco_core::decomposition::{self, Method, MethodParams};
use disco_core::gradcheck::{self, NamedTarget, Target};
use disco_core::objectives::ObjectiveKind;
use disco_core::policy::checkpoint::Encoding;
use disco_core::policy::stream_rng;
use disco_core::trainer::{self, train_with_hook};
use disco_core::DiscoError;

use config::{ConfigError, RunConfig};

/// Exit code for bad input: configs, flags, missing files.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DiscoError> for CliError {
    fn from(e: DiscoError) -> Self {
        match e {
            DiscoError::Config(_) | DiscoError::Format { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Options shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Global {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub quiet: bool,
    /// Rollout worker threads; 1 when unset.
    pub threads: Option<usize>,
}

impl Global {
    fn say(&self, msg: impl fmt::Display) {
        if !self.quiet {
            println!("{msg}");
        }
    }
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn load_config(path: &Path, global: &Global) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::from_file(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = global.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.output_dir = out.clone();
    }
    cfg.train.threads = global.threads.unwrap_or(1);
    Ok(cfg)
}

/// Runs one config: metrics CSV, final checkpoint, optional periodic
/// checkpoints and the resolved config.
pub fn cmd_train(config_path: &Path, global: &Global) -> CliResult<()> {
    let cfg = load_config(config_path, global)?;
    let (bank, theta0) = cfg.setup()?;
    global.say(format_args!(
        "seed {} | {} | {} questions | {} steps",
        cfg.train.seed,
        cfg.train.objective,
        bank.len(),
        cfg.train.steps
    ));
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("config.resolved"), cfg.to_text().as_bytes())?;
    let every = cfg.ckpt_every;
    let outcome = train_with_hook(&cfg.train, &bank, &theta0, |view| {
        if every > 0 && view.step % every == 0 {
            let bytes = trainer::encode_checkpoint(view.params, view.optimizer, Encoding::Binary);
            write_atomic(&out.join(format!("ckpt_{:06}.bin", view.step)), &bytes)?;
        }
        Ok(())
    })?;
    write_atomic(
        &out.join("metrics.csv"),
        trainer::metrics_csv(&outcome.metrics).as_bytes(),
    )?;
    let bytes = trainer::encode_checkpoint(&outcome.params, &outcome.optimizer, Encoding::Binary);
    write_atomic(&out.join("final.bin"), &bytes)?;
    if let Some(last) = outcome.metrics.last() {
        global.say(format_args!(
            "step {}: reward {:.3}, entropy {:.3}, solved {:.3}, unsolved {:.3}",
            last.step, last.reward_mean, last.entropy, last.frac_solved, last.frac_unsolved
        ));
    }
    global.say(format_args!("wrote {}", out.display()));
    Ok(())
}

fn run_labels(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    stems
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if stems.iter().filter(|t| *t == s).count() > 1 {
                format!("{s}{i}")
            } else {
                s.clone()
            }
        })
        .collect()
}

/// Trains several configs on a shared bank and writes one wide CSV.
pub fn cmd_compare(config_paths: &[PathBuf], global: &Global) -> CliResult<()> {
    if config_paths.len() < 2 {
        return Err(CliError::Usage("compare needs at least two configs".into()));
    }
    let configs = config_paths
        .iter()
        .map(|p| load_config(p, global))
        .collect::<CliResult<Vec<_>>>()?;
    let first = &configs[0];
    for (path, c) in config_paths.iter().zip(&configs).skip(1) {
        let mismatch = if c.train.seed != first.train.seed {
            Some("seed")
        } else if c.train.steps != first.train.steps {
            Some("steps")
        } else if c.train.temperature != first.train.temperature {
            Some("rollout.temperature")
        } else if c.bank != first.bank || c.history_order != first.history_order {
            Some("bank")
        } else {
            None
        };
        if let Some(field) = mismatch {
            return Err(CliError::Usage(format!(
                "{}: {field} differs from {}",
                path.display(),
                config_paths[0].display()
            )));
        }
    }
    let (bank, theta0) = first.setup()?;
    global.say(format_args!(
        "seed {} | {} runs",
        first.train.seed,
        configs.len()
    ));
    let trains: Vec<_> = configs.iter().map(|c| c.train.clone()).collect();
    let runs = trainer::compare_run(&trains, &bank, &theta0)?;
    let csv = trainer::wide_metrics_csv(&run_labels(config_paths), &runs)?;
    let out = global
        .out
        .clone()
        .unwrap_or_else(|| first.output_dir.clone());
    let path = out.join("compare.csv");
    write_atomic(&path, csv.as_bytes())?;
    global.say(format_args!("wrote {}", path.display()));
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DecomposeArgs {
    pub method: Option<Method>,
    pub alpha: f64,
    pub trials: usize,
    pub resolution: usize,
}

impl Default for DecomposeArgs {
    fn default() -> Self {
        Self {
            method: None,
            alpha: 1.0,
            trials: 1000,
            resolution: 101,
        }
    }
}

/// Weight curves plus the identity check; fails if any identity is violated.
pub fn cmd_decompose(args: &DecomposeArgs, global: &Global) -> CliResult<()> {
    let seed = global.seed.unwrap_or(0);
    let out = global.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    global.say(format_args!("seed {seed}"));
    let mut rows = decomposition::emit_weight_curves(args.resolution, args.alpha)?;
    if let Some(m) = args.method {
        rows.retain(|r| r.0 == m.name());
    }
    write_atomic(
        &out.join("weights.csv"),
        decomposition::weight_curves_csv(&rows).as_bytes(),
    )?;
    let methods: Vec<Method> = match args.method {
        Some(m) => vec![m],
        None => Method::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    for (i, m) in methods.iter().enumerate() {
        let params = MethodParams {
            alpha: args.alpha,
            ..MethodParams::default_for(*m)
        };
        let mut rng = stream_rng(seed, i as u64);
        let report = decomposition::verify_identity(*m, &params, args.trials, &mut rng)?;
        if let Some(note) = report.note {
            global.say(format_args!("{m:<8} {note}"));
            continue;
        }
        write_atomic(
            &out.join(format!("identity_{}.csv", m.name())),
            report.to_csv().as_bytes(),
        )?;
        global.say(format_args!(
            "{m:<8} {} trials, max deviation {:.3e}{}",
            report.rows.len(),
            report.max_deviation,
            if report.passed() { "" } else { "  VIOLATED" }
        ));
        if !report.passed() {
            failed.push(m.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "identity violated for {}",
            failed.join(", ")
        )))
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckArgs {
    pub objective: Option<String>,
    pub tau: Option<f64>,
    pub instances: usize,
    pub flip_sign: bool,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            objective: None,
            tau: None,
            instances: gradcheck::DEFAULT_INSTANCES,
            flip_sign: false,
        }
    }
}

fn select_targets(args: &GradcheckArgs) -> CliResult<Vec<NamedTarget>> {
    let mut targets = gradcheck::default_targets();
    if let Some(name) = &args.objective {
        targets.retain(|t| &t.name == name);
        if targets.is_empty() {
            let names: Vec<String> = gradcheck::default_targets()
                .into_iter()
                .map(|t| t.name)
                .collect();
            return Err(CliError::Usage(format!(
                "unknown objective `{name}` (expected one of {})",
                names.join(", ")
            )));
        }
    }
    if let Some(tau) = args.tau {
        if !(tau > 0.0) {
            return Err(CliError::Usage(format!("--tau must be > 0, got {tau}")));
        }
        for t in &mut targets {
            if let Target::Objective(spec) = &mut t.target {
                if let ObjectiveKind::Disco { tau: x } = &mut spec.kind {
                    *x = tau;
                }
            }
        }
    }
    Ok(targets)
}

/// Finite-difference check of every gradient; fails if any instance exceeds
/// the tolerance.
pub fn cmd_gradcheck(args: &GradcheckArgs, global: &Global) -> CliResult<()> {
    let seed = global.seed.unwrap_or(0);
    global.say(format_args!("seed {seed}"));
    let opts = gradcheck::Options {
        instances: args.instances,
        seed,
        flip_sign: args.flip_sign,
        ..gradcheck::Options::default()
    };
    let mut failed = Vec::new();
    for target in select_targets(args)? {
        let report = gradcheck::run_check(&target, &opts)?;
        global.say(&report);
        if !report.passed() {
            failed.push(format!(
                "{} (instance seeds {:?})",
                report.name, report.failing_seeds
            ));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: {}",
            failed.join("; ")
        )))
    }
}
