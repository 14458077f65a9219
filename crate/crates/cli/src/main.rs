use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use dcsplit_core::experiments::{
    run_sweep, simulate_scenario, solve_scenario, validate_scenario, write_sim_outputs, write_solve_outputs,
    write_sweep_csv, write_validation, PolicyFile, Provenance, ScenarioConfig,
};
use dcsplit_core::{ConstraintBasis, Error, Simulator};

/// Delay-optimal traffic splitting between a macro cell and a small cell.
#[derive(Debug, Parser)]
#[command(name = "dcsplit", version)]
struct Cli {
    /// Scenario JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides `sim.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `constraint_basis`: rate or per_arrival.
    #[arg(long, global = true)]
    constraint_basis: Option<ConstraintBasis>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the constrained problem; writes report.json, policy.json,
    /// policy_k*.csv and thresholds.json.
    Solve,
    /// Simulate a solved policy; writes sim_report.json.
    Simulate {
        /// policy.json written by `solve`.
        #[arg(long)]
        policy: PathBuf,
        /// Also write the event trace of the first replication here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the config's `sweep` section; writes <config stem>.csv.
    Sweep,
    /// Solve, simulate and check the exact averages against the simulated
    /// confidence intervals; writes validation.json.
    Validate,
}

/// Exact averages fell outside the simulated confidence intervals.
#[derive(Debug)]
struct ValidationFailed(String);

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "validation failed: {}", self.0)
    }
}

impl std::error::Error for ValidationFailed {}

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_VALIDATION: u8 = 4;
const EXIT_IO: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ValidationFailed>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) | Error::Csv(_) => EXIT_IO,
                Error::InvalidParam { .. }
                | Error::Json(_)
                | Error::PolicyShape { .. }
                | Error::PolicyLookup { .. }
                | Error::InvalidState(_) => EXIT_CONFIG,
                _ => EXIT_SOLVER,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::InvalidParam {
            name: "config",
            reason: "--config <path> is required".into(),
        })?;
    let mut config =
        ScenarioConfig::from_path(path).with_context(|| format!("reading config {}", path.display()))?;
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if let Some(basis) = cli.constraint_basis {
        config = config.with_constraint_basis(basis);
    }
    Ok(config)
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn solve(cli: &Cli, config: &ScenarioConfig) -> Result<()> {
    let output = solve_scenario(config).context("solving the constrained problem")?;
    let r = &output.summary.report;
    println!(
        "C = {:.6}  B = {:.6}/s ({:.6} per arrival)  beta* = {:.6}  q = {:.6}  threshold-form = {}",
        r.avg_delay,
        r.avg_blocking,
        r.avg_blocking_per_arrival,
        r.mixture.beta_star,
        r.mixture.q,
        output.summary.threshold_form
    );
    for path in write_solve_outputs(&cli.out, config, &output)? {
        announce(&path);
    }
    Ok(())
}

fn simulate(cli: &Cli, config: &ScenarioConfig, policy: &Path, trace: Option<&Path>) -> Result<()> {
    let file = PolicyFile::from_path(policy).with_context(|| format!("reading policy {}", policy.display()))?;
    let mixture = file
        .to_mixture(&config.params)
        .with_context(|| format!("loading policy {}", policy.display()))?;
    let summary = simulate_scenario(config, &mixture)?;
    let r = &summary.report;
    println!(
        "C = {:.6} ± {:.6}  B = {:.6} ± {:.6}/s  events = {}",
        r.delay_rate.mean,
        r.delay_rate.half_width.unwrap_or(f64::NAN),
        r.blocking_rate.mean,
        r.blocking_rate.half_width.unwrap_or(f64::NAN),
        r.counts.events
    );
    announce(&write_sim_outputs(&cli.out, &summary)?);
    if let Some(path) = trace {
        let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        Simulator::new(&config.params)?.run_traced(&mixture, &config.sim, &mut out)?;
        announce(path);
    }
    Ok(())
}

fn sweep(cli: &Cli, config: &ScenarioConfig) -> Result<()> {
    let spec = config.sweep.as_ref().ok_or_else(|| Error::InvalidParam {
        name: "sweep",
        reason: "the config has no `sweep` section".into(),
    })?;
    let rows = run_sweep(config, spec)?;
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("point {} failed: {}", r.value, r.error.as_deref().unwrap_or_default());
    }
    let stem = cli
        .config
        .as_deref()
        .and_then(Path::file_stem)
        .ok_or_else(|| anyhow!("config path has no file name"))?;
    std::fs::create_dir_all(&cli.out)?;
    let path = cli.out.join(stem).with_extension("csv");
    let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    let provenance = Provenance::new(&config.params, config.sim.seed);
    write_sweep_csv(&mut out, &provenance, spec, config.constraint_basis, &rows)?;
    announce(&path);
    Ok(())
}

fn validate(cli: &Cli, config: &ScenarioConfig) -> Result<()> {
    let (_, report) = validate_scenario(config)?;
    for c in &report.checks {
        println!(
            "{} {}: exact {:.6}, simulated {:.6} ± {:.6}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.exact,
            c.simulated.mean,
            c.simulated.half_width.unwrap_or(f64::NAN)
        );
    }
    let d = &report.delay_check;
    println!(
        "{} realized vs model delay: gap {:.6}, joint half-width {:.6}",
        if d.agree { "PASS" } else { "FAIL" },
        d.gap,
        d.joint_half_width
    );
    announce(&write_validation(&cli.out, &report)?);
    if !report.passed {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .chain((!d.agree).then_some("realized_vs_model_delay"))
            .collect();
        bail!(ValidationFailed(failed.join(", ")));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Solve => solve(cli, &config),
        Command::Simulate { policy, trace } => simulate(cli, &config, policy, trace.as_deref()),
        Command::Sweep => sweep(cli, &config),
        Command::Validate => validate(cli, &config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
