mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "lpa", version, about = "Learnable pulse accumulator toolkit")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every randomized step. Falls back to the config file, then PULSE_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for CSV, SVG and checkpoint artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the property suite over every module.
    Verify {
        /// Inject a deliberate fault into one reference computation.
        #[arg(long)]
        self_test_fault: bool,
    },
    /// Timing benchmark and analytic cost tables.
    Bench {
        #[command(subcommand)]
        kind: BenchKind,
    },
    /// Per-layer MSE diagnostic sweep of the toy teacher.
    Sweep,
    /// Progressive replacement of teacher attention layers with LPA layers.
    Convert(ConvertArgs),
    /// Run a checkpoint on one input with the soft or hard path.
    Infer(InferArgs),
}

#[derive(Subcommand, Debug)]
enum BenchKind {
    /// Median forward time of attention and LPA over sequence lengths.
    Scaling {
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<usize>>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Also write a log-log SVG plot.
        #[arg(long)]
        plot: bool,
    },
    /// Roofline cost breakdown per component.
    Roofline {
        /// Hardware profile JSON (defaults to the built-in m4-pro profile).
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        t: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        pulses: Option<Vec<usize>>,
        #[arg(long)]
        plot: bool,
    },
    /// Per-layer peak memory of the score matrix and the gate tensor.
    Memory {
        #[arg(long, value_delimiter = ',')]
        durations: Option<Vec<f64>>,
        #[arg(long)]
        pulses: Option<usize>,
        #[arg(long)]
        plot: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OrderKind {
    /// Ascending sweep MSE.
    Mse,
    /// Descending sweep MSE.
    Reverse,
    /// Both orders on the same seeds, with a comparison table.
    Both,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long, value_enum, default_value_t = OrderKind::Mse)]
    order: OrderKind,
    /// Number of consecutive seeds to run, starting at the run seed.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Stop after this many replaced layers.
    #[arg(long)]
    max_layers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Encoder checkpoint (JSON parameter store).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input tensor as JSON `{"shape": [n, d_in], "data": [...]}`; a seeded
    /// synthetic sample when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Run LPA layers through compiled segment programs.
    #[arg(long)]
    hard: bool,
    /// Run both paths and print the max abs deviation between them.
    #[arg(long)]
    compare: bool,
    /// Write the compiled programs of every LPA layer to programs.json.
    #[arg(long)]
    dump_programs: bool,
    /// Check the saturation margin of every LPA layer and warn on violations.
    #[arg(long)]
    strict: bool,
    /// Soft-path temperature (defaults to the checkpoint's, or 0.01 with --compare/--strict).
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    margin: f64,
}

/// Failure kinds mapped to exit codes.
pub enum Failure {
    Property(String),
    Usage(String),
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    let env_seed = match std::env::var("PULSE_SEED") {
        Ok(v) => Some(v.trim().parse::<u64>().map_err(|e| Failure::Usage(format!("PULSE_SEED={v}: {e}")))?),
        Err(_) => None,
    };
    let seed = cli.seed.or(cfg.seed).or(env_seed).unwrap_or(0);
    if let Some(out) = cli.out {
        cfg.out = Some(out);
    }
    let ctx = commands::Context::new(cfg, seed).map_err(Failure::Usage)?;
    match cli.command {
        Command::Verify { self_test_fault } => commands::verify(&ctx, self_test_fault),
        Command::Bench { kind } => match kind {
            BenchKind::Scaling { ns, iterations, plot } => commands::scaling(&ctx, ns, iterations, plot),
            BenchKind::Roofline {
                profile,
                t,
                d,
                heads,
                pulses,
                plot,
            } => commands::roofline(&ctx, profile, t, d, heads, pulses, plot),
            BenchKind::Memory {
                durations,
                pulses,
                plot,
            } => commands::memory(&ctx, durations, pulses, plot),
        },
        Command::Sweep => commands::sweep(&ctx),
        Command::Convert(args) => commands::convert(&ctx, &args),
        Command::Infer(args) => commands::infer(&ctx, &args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Property(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
