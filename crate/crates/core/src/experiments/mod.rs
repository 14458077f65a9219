//! End-to-end drivers: scenario configs, solve artifacts, policy grids and
//! threshold profiles, sweeps and the exact-versus-simulated check.
//!
//! Output files written by [`write_solve_outputs`]:
//!
//! | file              | content                                             |
//! |-------------------|-----------------------------------------------------|
//! | `report.json`     | provenance, parameters and the solve report         |
//! | `policy.json`     | both mixture components, `q`, `β*` and `ε`          |
//! | `policy_k{k}.csv` | long-format grid for tag `k`, both components       |
//! | `thresholds.json` | threshold profile per tag and component             |
//!
//! Every output is a pure function of the config and seed, so repeated
//! runs produce byte-identical files.

mod config;
mod grid;
mod sweep;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{params_hash, Provenance, ScenarioConfig};
pub use grid::{
    extract_policy_grids, extract_thresholds, segment_limit, segments, Component, PolicyGrid, Segment,
    ThresholdProfile, ThresholdRow,
};
pub use sweep::{run_sweep, worker_threads, write_sweep_csv, SweepParam, SweepRow, SweepSpec};

use crate::constrained::{solve_on_model, ConstrainedSolveReport, Pipeline, RandomizedMixture};
use crate::error::{Error, Result};
use crate::model::{Action, ModelParams};
use crate::sim::{compare_delays, DelayComparison, Estimate, SimReport, Simulator};
use crate::solver::{DecisionRule, Policy};

/// Serialized constrained policy: both components and the mixing weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub provenance: Provenance,
    pub q: f64,
    pub beta_star: f64,
    pub epsilon: f64,
    pub deterministic: bool,
    pub low: Vec<u8>,
    pub high: Vec<u8>,
}

impl PolicyFile {
    pub fn new(provenance: Provenance, mixture: &RandomizedMixture) -> Self {
        let codes = |p: &Policy| p.actions().iter().map(|a| a.code()).collect();
        Self {
            provenance,
            q: mixture.q,
            beta_star: mixture.beta_star,
            epsilon: mixture.epsilon,
            deterministic: mixture.deterministic,
            low: codes(&mixture.low),
            high: codes(&mixture.high),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Rebuilds the mixture, checking both components against `params`.
    pub fn to_mixture(&self, params: &ModelParams) -> Result<RandomizedMixture> {
        if self.provenance.params_sha256 != params_hash(params) {
            return Err(Error::InvalidParam {
                name: "policy",
                reason: "policy file was solved for different model parameters".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::InvalidParam {
                name: "q",
                reason: format!("mixing weight must lie in [0, 1], got {}", self.q),
            });
        }
        let policy = |codes: &[u8]| Policy::new(params, codes.iter().map(|&c| Action(c)).collect());
        Ok(RandomizedMixture {
            low: policy(&self.low)?,
            high: policy(&self.high)?,
            q: self.q,
            beta_star: self.beta_star,
            epsilon: self.epsilon,
            deterministic: self.deterministic,
        })
    }
}

/// Marker for the four cells of a grid legend.
pub fn action_symbol(a: Action) -> &'static str {
    match a.code() {
        0 => "square",
        1 => "asterisk",
        2 => "circle",
        3 => "triangle",
        _ => "",
    }
}

fn action_meaning(params: &ModelParams, k: usize, a: Action) -> String {
    if a.is_block() {
        return "block".into();
    }
    let size = match params.event(k) {
        Some(crate::model::Event::Foreground { size } | crate::model::Event::Background { size }) => size,
        _ => 0,
    };
    let to_m = a.code() as usize - 1;
    format!("{to_m} to M, {} to S", size.saturating_sub(to_m))
}

/// Long-format CSV of the tag-`k` grids of both components: one row per
/// `(component, s1, s2)`, preceded by `#` provenance and legend lines.
pub fn write_policy_csv(
    out: &mut dyn Write,
    provenance: &Provenance,
    params: &ModelParams,
    mixture: &RandomizedMixture,
    k: usize,
) -> Result<()> {
    let grids = [
        PolicyGrid::from_policy(params, &mixture.low, k, Component::Low)?,
        PolicyGrid::from_policy(params, &mixture.high, k, Component::High)?,
    ];
    out.write_all(provenance.header_lines().as_bytes())?;
    writeln!(out, "# k: {k}")?;
    writeln!(out, "# q: {} (probability of the low component)", mixture.q)?;
    let mut seen: Vec<Action> = grids
        .iter()
        .flat_map(|g| g.actions.iter().flatten().copied())
        .collect();
    seen.sort();
    seen.dedup();
    for a in seen {
        writeln!(
            out,
            "# legend: {} = {} ({})",
            a.code(),
            action_symbol(a),
            action_meaning(params, k, a)
        )?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["component", "k", "s1", "s2", "action", "symbol"])?;
    for g in &grids {
        for s1 in 0..g.dim_s1() {
            for s2 in 0..g.dim_s2() {
                let a = g.get(s1, s2);
                w.write_record([
                    g.component.name().to_string(),
                    k.to_string(),
                    s1.to_string(),
                    s2.to_string(),
                    a.code().to_string(),
                    action_symbol(a).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub provenance: Provenance,
    pub params: ModelParams,
    pub report: ConstrainedSolveReport,
    /// Whether every row of every grid is threshold-form.
    pub threshold_form: bool,
}

pub struct SolveOutput {
    pub summary: SolveSummary,
    pub grids: Vec<PolicyGrid>,
    pub thresholds: Vec<ThresholdProfile>,
    pub pipeline: Pipeline,
}

pub fn solve_scenario(config: &ScenarioConfig) -> Result<SolveOutput> {
    config.validate()?;
    let pipeline = Pipeline::new(&config.params)?;
    let report = solve_on_model(&pipeline.model, &config.solve_options())?;
    let grids = extract_policy_grids(&config.params, &report.mixture)?;
    let thresholds: Vec<_> = grids.iter().map(|g| extract_thresholds(&config.params, g)).collect();
    Ok(SolveOutput {
        summary: SolveSummary {
            provenance: Provenance::new(&config.params, config.sim.seed),
            params: config.params.clone(),
            threshold_form: thresholds.iter().all(ThresholdProfile::threshold_form),
            report,
        },
        grids,
        thresholds,
        pipeline,
    })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes the solve artifacts into `dir` (created if needed) and returns
/// the paths written.
pub fn write_solve_outputs(dir: &Path, config: &ScenarioConfig, output: &SolveOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let provenance = &output.summary.provenance;
    let mixture = &output.summary.report.mixture;
    let mut written = Vec::new();

    let path = dir.join("report.json");
    write_json(&path, &output.summary)?;
    written.push(path);

    let path = dir.join("policy.json");
    write_json(&path, &PolicyFile::new(provenance.clone(), mixture))?;
    written.push(path);

    for k in 1..config.params.num_tags() {
        let path = dir.join(format!("policy_k{k}.csv"));
        let mut buf = Vec::new();
        write_policy_csv(&mut buf, provenance, &config.params, mixture, k)?;
        fs::write(&path, buf)?;
        written.push(path);
    }

    let path = dir.join("thresholds.json");
    write_json(&path, &output.thresholds)?;
    written.push(path);
    Ok(written)
}

#[derive(Debug, Clone, Serialize)]
pub struct SimSummary {
    pub provenance: Provenance,
    pub report: SimReport,
    pub delay_check: DelayComparison,
}

pub fn simulate_scenario<R: DecisionRule + Sync + ?Sized>(config: &ScenarioConfig, rule: &R) -> Result<SimSummary> {
    let report = Simulator::new(&config.params)?.run(rule, &config.sim)?;
    Ok(SimSummary {
        provenance: Provenance::new(&config.params, config.sim.seed),
        delay_check: compare_delays(&report),
        report,
    })
}

pub fn write_sim_outputs(dir: &Path, summary: &SimSummary) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("sim_report.json");
    write_json(&path, summary)?;
    Ok(path)
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub exact: f64,
    pub simulated: Estimate,
    pub passed: bool,
}

impl Check {
    fn new(name: &str, exact: f64, simulated: Estimate) -> Self {
        Self {
            name: name.into(),
            exact,
            passed: simulated.covers(exact),
            simulated,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub provenance: Provenance,
    pub checks: Vec<Check>,
    pub delay_check: DelayComparison,
    pub passed: bool,
}

/// Solves the scenario, simulates the mixture and checks that the exact
/// `C̄` and `B̄` fall inside the simulated 95% intervals and that realized
/// delays agree with the accrued model cost.
pub fn validate_scenario(config: &ScenarioConfig) -> Result<(SolveOutput, ValidationReport)> {
    let solved = solve_scenario(config)?;
    let report = &solved.summary.report;
    let sim = Simulator::with_costs(&config.params, solved.pipeline.costs.clone())?.run(&report.mixture, &config.sim)?;
    let checks = vec![
        Check::new("avg_delay", report.avg_delay, sim.delay_rate),
        Check::new("avg_blocking", report.avg_blocking, sim.blocking_rate),
        Check::new(
            "avg_blocking_per_arrival",
            report.avg_blocking_per_arrival,
            sim.blocking_per_arrival,
        ),
    ];
    let delay_check = compare_delays(&sim);
    let passed = checks.iter().all(|c| c.passed) && delay_check.agree;
    let validation = ValidationReport {
        provenance: Provenance::new(&config.params, config.sim.seed),
        checks,
        delay_check,
        passed,
    };
    Ok((solved, validation))
}

pub fn write_validation(dir: &Path, report: &ValidationReport) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("validation.json");
    write_json(&path, report)?;
    Ok(path)
}
