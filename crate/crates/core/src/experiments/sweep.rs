use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constrained::{solve_constrained, ConstraintBasis};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::sim::{simulate, SimReport};

use super::config::{Provenance, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    LambdaFg,
    LambdaBg,
    BackhaulDelay,
    BMax,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LambdaFg => "lambda_fg",
            SweepParam::LambdaBg => "lambda_bg",
            SweepParam::BackhaulDelay => "backhaul_delay",
            SweepParam::BMax => "b_max",
        }
    }

    pub fn apply(self, base: &ModelParams, value: f64) -> ModelParams {
        let mut p = base.clone();
        match self {
            SweepParam::LambdaFg => p.lambda_fg = value,
            SweepParam::LambdaBg => p.lambda_bg = value,
            SweepParam::BackhaulDelay => p.backhaul_delay = value,
            SweepParam::BMax => p.b_max = value,
        }
        p
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    /// Non-negative and strictly increasing.
    pub values: Vec<f64>,
    /// Also simulate each point's mixture.
    #[serde(default = "default_true")]
    pub simulate: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidParam {
            name: "sweep.values",
            reason,
        };
        if self.values.is_empty() {
            return Err(bad("at least one value is required".into()));
        }
        if let Some(v) = self.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(bad(format!("values must be finite and >= 0, got {v}")));
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("values must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// One sweep point. Blocking is reported per second; `b_*_per_arrival`
/// divides by the weighted arrival rate. Failed points keep the value and
/// the error message with the numeric columns left empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub c_exact: Option<f64>,
    pub b_exact: Option<f64>,
    pub b_exact_per_arrival: Option<f64>,
    pub beta_star: Option<f64>,
    pub q: Option<f64>,
    pub constraint_active: Option<bool>,
    pub converged: Option<bool>,
    pub c_sim: Option<f64>,
    pub c_sim_half_width: Option<f64>,
    pub b_sim: Option<f64>,
    pub b_sim_half_width: Option<f64>,
    pub b_sim_per_arrival: Option<f64>,
    pub error: Option<String>,
}

/// Worker count from `DCSPLIT_THREADS`, or rayon's default.
pub fn worker_threads() -> usize {
    std::env::var("DCSPLIT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

fn run_point(base: &ScenarioConfig, spec: &SweepSpec, value: f64) -> SweepRow {
    let mut row = SweepRow {
        value,
        ..SweepRow::default()
    };
    let params = spec.parameter.apply(&base.params, value);
    let outcome = solve_constrained(&params, &base.solve_options()).and_then(|report| {
        row.c_exact = Some(report.avg_delay);
        row.b_exact = Some(report.avg_blocking);
        row.b_exact_per_arrival = Some(report.avg_blocking_per_arrival);
        row.beta_star = Some(report.mixture.beta_star);
        row.q = Some(report.mixture.q);
        row.constraint_active = Some(report.constraint_active);
        row.converged = Some(report.converged);
        if spec.simulate {
            let sim: SimReport = simulate(&params, &report.mixture, &base.sim)?;
            row.c_sim = Some(sim.delay_rate.mean);
            row.c_sim_half_width = sim.delay_rate.half_width;
            row.b_sim = Some(sim.blocking_rate.mean);
            row.b_sim_half_width = sim.blocking_rate.half_width;
            row.b_sim_per_arrival = Some(sim.blocking_per_arrival.mean);
        }
        Ok(())
    });
    if let Err(e) = outcome {
        row.error = Some(e.to_string());
    }
    row
}

/// Solves (and optionally simulates) every point; points run in parallel.
pub fn run_sweep(base: &ScenarioConfig, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    base.params.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::InvalidParam {
            name: "DCSPLIT_THREADS",
            reason: e.to_string(),
        })?;
    Ok(pool.install(|| spec.values.par_iter().map(|&v| run_point(base, spec, v)).collect()))
}

fn cell<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Writes the sweep table as CSV preceded by `#` provenance lines.
pub fn write_sweep_csv(
    out: &mut dyn Write,
    provenance: &Provenance,
    spec: &SweepSpec,
    basis: ConstraintBasis,
    rows: &[SweepRow],
) -> Result<()> {
    out.write_all(provenance.header_lines().as_bytes())?;
    writeln!(out, "# parameter: {}", spec.parameter.name())?;
    writeln!(
        out,
        "# constraint_basis: {}",
        match basis {
            ConstraintBasis::Rate => "rate",
            ConstraintBasis::PerArrival => "per_arrival",
        }
    )?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        spec.parameter.name(),
        "c_exact",
        "b_exact",
        "b_exact_per_arrival",
        "beta_star",
        "q",
        "constraint_active",
        "converged",
        "c_sim",
        "c_sim_half_width",
        "b_sim",
        "b_sim_half_width",
        "b_sim_per_arrival",
        "error",
    ])?;
    for r in rows {
        w.write_record([
            r.value.to_string(),
            cell(&r.c_exact),
            cell(&r.b_exact),
            cell(&r.b_exact_per_arrival),
            cell(&r.beta_star),
            cell(&r.q),
            cell(&r.constraint_active),
            cell(&r.converged),
            cell(&r.c_sim),
            cell(&r.c_sim_half_width),
            cell(&r.b_sim),
            cell(&r.b_sim_half_width),
            cell(&r.b_sim_per_arrival),
            cell(&r.error),
        ])?;
    }
    w.flush()?;
    Ok(())
}
