use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eralab::erasure::ErasureMethod;
use eralab::pipeline::commands::{self, StageOptions};
use eralab::Result;

#[derive(Parser)]
#[command(
    name = "eralab",
    version,
    about = "Concept erasure and reactivation on a toy diffusion model"
)]
struct Cli {
    /// Experiment config (TOML). Defaults to the built-in reference setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log progress and timings to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Stage {
    /// Concept index to act on.
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Esd,
    Projection,
}

#[derive(Subcommand)]
enum Command {
    /// Train the original model.
    Train {
        #[arg(long, default_value = "out/original.json")]
        out: PathBuf,
    },
    /// Erase one concept from a checkpoint.
    Erase {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "out/erased.json")]
        out: PathBuf,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[command(flatten)]
        stage: Stage,
    },
    /// Gradient-guided reactivation probe.
    ProbeGg {
        #[arg(long = "in")]
        input: PathBuf,
        /// Guiding checkpoint; the input guides itself when omitted.
        #[arg(long)]
        guiding: Option<PathBuf>,
        #[arg(long, default_value = "out/gradient_guided.json")]
        out: PathBuf,
        #[command(flatten)]
        stage: Stage,
    },
    /// Instance-personalization probe with a fresh rare token.
    ProbeIp {
        #[arg(long = "in")]
        input: PathBuf,
        /// JSON array of reference points; drawn from the universe when omitted.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "out/personalization.json")]
        out: PathBuf,
        #[command(flatten)]
        stage: Stage,
    },
    /// Evaluate checkpoints against the original.
    Eval {
        #[arg(long)]
        original: PathBuf,
        /// Further checkpoints; each is named by its file stem.
        models: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long, default_value = "out/eval")]
        out: PathBuf,
    },
    /// Gradient-guided probes at several step budgets.
    Sweep {
        #[arg(long)]
        erased: PathBuf,
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        guiding: Option<PathBuf>,
        /// Comma-separated budgets, e.g. 20,50,200.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long, default_value = "out/sweep")]
        out: PathBuf,
    },
    /// Simulate coupled SDEs and compare with the deviation bound.
    SdeVerify {
        /// TOML with the SDE fields and an optional `bound`.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "out/sde")]
        out: PathBuf,
    },
    /// Randomized checks of score ascent on quadratic scores.
    AscentCheck {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "out/ascent")]
        out: PathBuf,
    },
    /// Full protocol: train, erase, probe, evaluate and sweep.
    Report {
        #[arg(long, default_value = "out/report")]
        out: PathBuf,
    },
}

fn options(stage: &Stage, seed: Option<u64>) -> StageOptions {
    StageOptions {
        target: stage.target,
        steps: stage.steps,
        seed,
    }
}

fn run(cli: &Cli) -> Result<String> {
    let config = || commands::load_config(cli.config.as_deref());
    let seed = cli.seed;
    match &cli.command {
        Command::Train { out } => commands::cmd_train(&config()?, seed, out),
        Command::Erase {
            input,
            out,
            method,
            stage,
        } => {
            let method = method.map(|m| match m {
                Method::Esd => ErasureMethod::EsdStyle,
                Method::Projection => ErasureMethod::ProjectionEdit,
            });
            commands::cmd_erase(&config()?, input, out, method, &options(stage, seed))
        }
        Command::ProbeGg {
            input,
            guiding,
            out,
            stage,
        } => commands::cmd_probe_gg(&config()?, input, guiding.as_deref(), out, &options(stage, seed)),
        Command::ProbeIp {
            input,
            reference,
            out,
            stage,
        } => commands::cmd_probe_ip(&config()?, input, reference.as_deref(), out, &options(stage, seed)),
        Command::Eval {
            original,
            models,
            target,
            out,
        } => commands::cmd_eval(&config()?, original, models, *target, seed, out),
        Command::Sweep {
            erased,
            original,
            guiding,
            budgets,
            target,
            out,
        } => {
            let opts = StageOptions {
                target: *target,
                steps: None,
                seed,
            };
            commands::cmd_sweep(
                &config()?,
                erased,
                original,
                guiding.as_deref(),
                budgets.as_deref(),
                &opts,
                out,
            )
        }
        Command::SdeVerify { spec, out } => commands::cmd_sde_verify(spec, seed, out),
        Command::AscentCheck { spec, out } => commands::cmd_ascent_check(spec.as_deref(), seed, out),
        Command::Report { out } => commands::cmd_report(&config()?, seed, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
