use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use twostage::simulate::Scenario;
use twostage::{EffectKind, Error, EstimatorFamily, Result};
use twostage_cli::commands::{
    parse_schemes, run_analyze, run_check, run_simulate, AnalysisConfig, CheckConfig, SimulationKind,
    SimulationOptions,
};
use twostage_cli::config::Config;
use twostage_cli::report::Format;

#[derive(Parser)]
#[command(name = "twostage", version, about = "Analyze two-stage randomized experiments with spillovers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate primary, spillover and overall effects from a CSV file.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo study (coverage or iw-study).
    Simulate(SimulateArgs),
    /// Verify the estimator identities by full enumeration on a small design.
    Check(CheckArgs),
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    /// CSV with household_id, individual_id, h, z, y and optional covariates.
    #[arg(long)]
    input: Option<PathBuf>,
    /// hw, iw or both.
    #[arg(long)]
    scheme: Option<String>,
    /// Comma-separated: primary, spillover, overall.
    #[arg(long, value_delimiter = ',')]
    effects: Option<Vec<EffectKind>>,
    /// Comma-separated: unbiased, hajek, simple-difference, post-stratified,
    /// model-assisted, regression.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorFamily>>,
    #[arg(long)]
    ci_level: Option<f64>,
    /// Household-size strata, e.g. "2,3,4-7".
    #[arg(long)]
    post_stratify: Option<String>,
    /// Holdout CSV used to fit covariate coefficients.
    #[arg(long)]
    holdout: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    /// table, csv or jsonl.
    #[arg(long)]
    format: Option<Format>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// key = value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// coverage or iw-study.
    kind: SimulationKind,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Scenarios of the iw-study, a and/or b.
    #[arg(long, value_delimiter = ',')]
    scenario: Option<Vec<Scenario>>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(clap::Args)]
struct CheckArgs {
    /// Comma-separated household sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    /// Number of treated households.
    #[arg(long)]
    treated: usize,
    /// Largest number of assignments to enumerate.
    #[arg(long, default_value_t = twostage::randomize::DEFAULT_ENUMERATION_CAP)]
    cap: u128,
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    /// Seed of the random potential-outcome table.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let mut config = AnalysisConfig::new(PathBuf::new());
    if let Some(path) = &args.config {
        config.apply(&Config::load(path, &AnalysisConfig::KEYS)?)?;
    }
    if let Some(v) = args.input {
        config.input = v;
    }
    if config.input.as_os_str().is_empty() {
        return Err(Error::Structure("no input file given (--input)".into()));
    }
    if let Some(v) = args.scheme {
        config.schemes = parse_schemes(&v)?;
    }
    if let Some(v) = args.effects {
        config.effects = v;
    }
    if let Some(v) = args.estimators {
        config.estimators = v;
    }
    if let Some(v) = args.ci_level {
        config.ci_level = v;
    }
    if let Some(v) = args.post_stratify {
        config.post_stratify = Some(v);
    }
    if let Some(v) = args.holdout {
        config.holdout = Some(v);
    }
    if let Some(v) = args.covariates {
        config.covariates = v;
    }
    if let Some(v) = args.seed {
        config.seed = Some(v);
    }
    if let Some(v) = args.format {
        config.format = v;
    }
    if let Some(v) = args.out_dir {
        config.out_dir = Some(v);
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    run_analyze(&config, &mut out)?;
    out.flush()?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let opts = SimulationOptions {
        config: args.config,
        seed: args.seed,
        reps: args.reps,
        scenarios: args.scenario.unwrap_or_default(),
        out_dir: args.out_dir,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    run_simulate(args.kind, &opts, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Returns whether every identity passed.
fn check(args: CheckArgs) -> Result<bool> {
    let config = CheckConfig {
        cap: args.cap,
        tolerance: args.tolerance,
        seed: args.seed,
        ..CheckConfig::new(args.sizes, args.treated)
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let checks = run_check(&config, &mut out)?;
    out.flush()?;
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    // clap's own usage-error code (2) would collide with the capacity code
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Analyze(args) => analyze(args).map(|_| true),
        Command::Simulate(args) => simulate(args).map(|_| true),
        Command::Check(args) => check(args),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more identities failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
