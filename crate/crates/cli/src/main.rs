//! `rbm`: simulation, convergence, consistency and cost reports for
//! multi-species particle systems with random-batch interactions.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "rbm", version, about = "Random-batch simulation of multi-species interacting particle systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the random-batch (or full) dynamics and write trajectories.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Use the full O(N^2) interaction instead of random batches.
        #[arg(long)]
        full: bool,
    },
    /// Coupled full vs random-batch runs over a list of step sizes.
    Converge {
        #[command(flatten)]
        common: Common,
    },
    /// Check the remainder statistics against their closed form.
    Consistency {
        #[command(flatten)]
        common: Common,
        /// Monte-Carlo mode with this many sampled partitions instead of enumeration.
        #[arg(long, value_name = "SAMPLES")]
        mc: Option<u64>,
        /// EXPERIMENTAL test hook: drop the batch-count factor from the
        /// cross-species weights (a negative control that should fail).
        #[arg(long)]
        legacy_beta: bool,
    },
    /// Kernel-evaluation counts of full vs random-batch steps.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Skip the one-step runtime counter check.
        #[arg(long)]
        skip_runtime: bool,
    },
    /// List the built-in presets.
    ListPresets,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct Source {
    /// Built-in scenario name (see `rbm list-presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Scenario configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Common {
    #[command(flatten)]
    source: Source,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Step size; for `converge`, a comma-separated list.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    tau: Option<Vec<f64>>,
    #[arg(long, allow_negative_numbers = true)]
    end_time: Option<f64>,
    #[arg(long)]
    replicas: Option<usize>,
    /// One value for all species or one per species.
    #[arg(long, value_delimiter = ',')]
    batch_sizes: Option<Vec<usize>>,
    /// Particle counts, one value for all species or one per species.
    #[arg(long, value_delimiter = ',')]
    particles: Option<Vec<usize>>,
    /// Reference step is tau / 2^s.
    #[arg(long, value_name = "S")]
    ref_refinement: Option<u32>,
    /// Output directory.
    #[arg(long, default_value = "rbm-out")]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads (default: available parallelism).
    #[arg(long, env = "RBM_WORKERS")]
    workers: Option<usize>,
    /// Allow overrides that change a preset's pinned parameters.
    #[arg(long)]
    force: bool,
    /// Treat unknown configuration keys as warnings.
    #[arg(long)]
    lenient: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Usage errors exit 1 like other configuration errors; 2 is reserved for blow-ups.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let workers = match &cli.command {
        Command::Simulate { common, .. } | Command::Converge { common } | Command::Consistency { common, .. } | Command::Cost { common, .. } => {
            common.workers
        }
        Command::ListPresets => None,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(1);
        }
        pool = pool.num_threads(w);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let code = pool.install(|| commands::dispatch(cli.command));
    ExitCode::from(code)
}
