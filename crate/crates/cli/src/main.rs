use clap::{Args, Parser, Subcommand};
use skewlab::runner::{self, Experiment, ExperimentConfig, DEFAULT_SEED};
use std::path::PathBuf;
use std::process::ExitCode;

/// Numerical experiments on partially hyperbolic skew products over the cat map.
#[derive(Parser)]
#[command(name = "skewlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the Markov property of the partition and write the transition matrix.
    VerifyPartition(RunArgs),
    /// Constant-Jacobian, cs-invariance and center-exponent checks.
    Properties(RunArgs),
    /// Push a reference measure forward and report the Gibbs-state estimate.
    EstimateMu(RunArgs),
    /// Fiber averages along a section as the iterate count grows.
    Hitting(RunArgs),
    /// Transverse measures on two sections and their holonomy comparison.
    Transverse(RunArgs),
    /// Run the leafwise coupling and fit its tail.
    Coupling(RunArgs),
    /// Deviation probabilities of Birkhoff averages.
    Ldp(RunArgs),
    /// Decay of correlations for two observables.
    Correlations(RunArgs),
    /// Cluster fiber coordinates near a base point.
    CenterAtoms(RunArgs),
    /// Print the built-in fixtures.
    ListFixtures,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; the built-in defaults are used without one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fixture name, overriding the config.
    #[arg(long)]
    fixture: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(exp: Experiment, args: RunArgs) -> Result<bool, runner::RunError> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| runner::RunError::Config(e.to_string()))?;
    }
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if args.fixture.is_some() {
        cfg.fixture = args.fixture;
    }
    let seed = args.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let dir = args
        .output_dir
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(exp.name()));
    let out = runner::run(&cfg, exp, seed, &dir)?;
    println!("{}", format_summary(&out.summary));
    println!("wrote {}", out.dir.display());
    Ok(out.all_passed)
}

fn format_summary(v: &skewlab::runner::Value) -> String {
    let checks = v["checks"].as_array().cloned().unwrap_or_default();
    let mut s = format!("{} (seed {})", v["experiment"].as_str().unwrap_or("?"), v["seed"]);
    for c in checks {
        let mark = if c["pass"].as_bool() == Some(true) { "pass" } else { "FAIL" };
        s.push_str(&format!("\n  {mark:4}  {}  value {} threshold {}", c["name"].as_str().unwrap_or("?"), c["value"], c["threshold"]));
    }
    s
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (exp, args) = match cli.command {
        Command::ListFixtures => {
            println!("{:<18} {:>6} {:>6} {:>8}  note", "name", "kappa", "delta", "alpha");
            for f in runner::list_fixtures() {
                println!("{:<18} {:>6} {:>6} {:>8.5}  {}", f.name, f.kappa, f.delta, f.alpha, f.note);
            }
            return ExitCode::SUCCESS;
        }
        Command::VerifyPartition(a) => (Experiment::VerifyPartition, a),
        Command::Properties(a) => (Experiment::Properties, a),
        Command::EstimateMu(a) => (Experiment::EstimateMu, a),
        Command::Hitting(a) => (Experiment::Hitting, a),
        Command::Transverse(a) => (Experiment::Transverse, a),
        Command::Coupling(a) => (Experiment::Coupling, a),
        Command::Ldp(a) => (Experiment::Ldp, a),
        Command::Correlations(a) => (Experiment::Correlations, a),
        Command::CenterAtoms(a) => (Experiment::CenterAtoms, a),
    };
    match run(exp, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
