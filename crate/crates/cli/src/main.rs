//! `bliptest`: estimate and test blip effects of sequential treatments.

mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use bliptest::seqdata::OutcomeFamily;
use bliptest::Error;
use clap::builder::RangedU64ValueParser;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bliptest", version, about = "Wald tests for blip effects of sequential treatments")]
struct Cli {
    /// Worker threads for bootstrap and Monte Carlo replicates.
    #[arg(long, global = true, env = "BLIPTEST_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate point effects and the blip parameter of an SNMM.
    Estimate(EstimateArgs),
    /// Bootstrap the marginal covariance and run Wald tests.
    Test(TestArgs),
    /// Run a Monte Carlo study from a config file.
    Simulate(SimulateArgs),
    /// Two-period workflow with regression-adjusted point effects.
    Medical(MedicalArgs),
    /// Draw a synthetic dataset or print a data-generating spec.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset CSV with columns id, [x1], z1, ..., xT, zT, y.
    #[arg(long)]
    data: PathBuf,
    /// SNMM basis JSON; defaults to one indicator per treated stratum.
    #[arg(long)]
    snmm: Option<PathBuf>,
    /// Outcome family: normal, bernoulli or poisson.
    #[arg(long, default_value = "normal")]
    family: OutcomeFamily,
    /// Variance of stratum means: sample, pooled_normal or plugin_family.
    #[arg(long, default_value = "sample")]
    variance_mode: bliptest::point_effects::VarianceMode,
    /// Drop strata with an empty control cell instead of failing.
    #[arg(long)]
    exclude_inestimable: bool,
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Also write the JSON report (and any tables) into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Hypothesis JSON: one `{name, h, rho}` object or a list of them.
    #[arg(long)]
    hypothesis: PathBuf,
    /// Bootstrap replicates.
    #[arg(long = "boot", default_value_t = 500, value_parser = RangedU64ValueParser::<usize>::new().range(2..))]
    boot: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Study config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's bootstrap replicate count.
    #[arg(long = "boot", value_parser = RangedU64ValueParser::<usize>::new().range(2..))]
    boot: Option<usize>,
    /// Override the config's Monte Carlo replicate count.
    #[arg(long, value_parser = RangedU64ValueParser::<usize>::new().range(1..))]
    reps: Option<usize>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct MedicalArgs {
    /// CSV with columns [id], x11, x12, ..., z1, x2, z2, y.
    #[arg(long)]
    data: PathBuf,
    /// Baseline covariates of the z1 model, e.g. `x11,x13` (default: all).
    #[arg(long, value_delimiter = ',')]
    t1_covariates: Option<Vec<String>>,
    /// Baseline covariates of the z2 models (default: all).
    #[arg(long, value_delimiter = ',')]
    t2_covariates: Option<Vec<String>>,
    /// Drop covariates with p > 0.1 in the candidate models.
    #[arg(long)]
    auto_select: bool,
    #[arg(long = "boot", default_value_t = 500, value_parser = RangedU64ValueParser::<usize>::new().range(2..))]
    boot: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Shipped spec to draw from: normal, bernoulli or poisson.
    #[arg(long, default_value = "normal", conflicts_with = "config")]
    family: OutcomeFamily,
    /// DGP spec JSON instead of a shipped one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Draw the two-period medical-shaped design instead.
    #[arg(long, conflicts_with_all = ["config", "print_spec"])]
    medical: bool,
    /// With `--medical`: plant zero blip effects.
    #[arg(long, requires = "medical")]
    null: bool,
    /// Sample size.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the DGP spec as JSON instead of drawing data.
    #[arg(long)]
    print_spec: bool,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        e if e.is_statistical() => 2,
        Error::InvalidArgument(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Estimate(a) => commands::estimate(&a.data, &a.output),
        Command::Test(a) => commands::test(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Medical(a) => commands::medical(&a),
        Command::Generate(a) => commands::generate(&a),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
