use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use disco_cli::{
    cmd_compare, cmd_decompose, cmd_gradcheck, cmd_train, DecomposeArgs, Global, GradcheckArgs,
};
use disco_core::decomposition::Method;

#[derive(Parser)]
#[command(
    name = "disco",
    version,
    about = "Discriminative constrained policy optimization lab"
)]
struct Cli {
    /// Output directory (overrides output.dir)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed (overrides the config seed)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output
    #[arg(long, global = true)]
    quiet: bool,
    /// Rollout worker threads
    #[arg(long, env = "DISCO_THREADS", hide_env_values = true, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration
    Train { config: PathBuf },
    /// Train several configurations and write aligned metrics
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
    },
    /// Write question-weight curves and check the weighted discriminative identity
    Decompose {
        #[arg(long)]
        method: Option<Method>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 101)]
        resolution: usize,
    },
    /// Compare analytic gradients with finite differences
    Gradcheck {
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, hide = true)]
        flip_sign: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let global = Global {
        out: cli.out,
        seed: cli.seed,
        quiet: cli.quiet,
        threads: cli.threads,
    };
    let result = match cli.command {
        Command::Train { config } => cmd_train(&config, &global),
        Command::Compare { configs } => cmd_compare(&configs, &global),
        Command::Decompose {
            method,
            alpha,
            trials,
            resolution,
        } => cmd_decompose(
            &DecomposeArgs {
                method,
                alpha,
                trials,
                resolution,
            },
            &global,
        ),
        Command::Gradcheck {
            objective,
            tau,
            instances,
            flip_sign,
        } => cmd_gradcheck(
            &GradcheckArgs {
                objective,
                tau,
                instances,
                flip_sign,
            },
            &global,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
