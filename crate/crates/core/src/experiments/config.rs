use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::constrained::{ConstraintBasis, SolveOptions};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::sim::SimConfig;

use super::sweep::SweepSpec;

/// One JSON document describing a scenario: the model parameters as
/// top-level keys plus `solver`, `sim`, `constraint_basis` and, for sweeps,
/// `sweep`.
///
/// ```json
/// {
///   "lambda_fg": 6.67, "lambda_bg": 1.0, "mu_m": 1.0, "mu_s": 1.5,
///   "n_m": 6, "n_s": 6, "batch_probs": [0.5, 0.5], "delta": 0.5,
///   "b_max": 0.02,
///   "solver": { "tol": 1e-9 },
///   "sim": { "horizon": 60000, "seed": 7, "replications": 3 },
///   "constraint_basis": "rate"
/// }
/// ```
///
/// `queue_cap` (10) and `backhaul_delay` (0.5) may be omitted; every other
/// model key is required. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioConfig {
    #[serde(flatten)]
    pub params: ModelParams,
    pub solver: SolveOptions,
    pub sim: SimConfig,
    pub constraint_basis: ConstraintBasis,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

const SECTIONS: [&str; 4] = ["solver", "sim", "constraint_basis", "sweep"];

impl ScenarioConfig {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            solver: SolveOptions::default(),
            sim: SimConfig::default(),
            constraint_basis: ConstraintBasis::Rate,
            sweep: None,
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut root: Map<String, Value> = serde_json::from_str(text)?;
        let mut take = |key: &str| root.remove(key);
        let solver = take("solver");
        let sim = take("sim");
        let basis = take("constraint_basis");
        let sweep = take("sweep");
        debug_assert!(SECTIONS.iter().all(|k| !root.contains_key(*k)));

        let params: ModelParams = serde_json::from_value(Value::Object(root))?;
        let section = |name: &'static str, err: serde_json::Error| Error::InvalidParam {
            name,
            reason: err.to_string(),
        };
        let mut solver: SolveOptions = match solver {
            Some(v) => serde_json::from_value(v).map_err(|e| section("solver", e))?,
            None => SolveOptions::default(),
        };
        let sim: SimConfig = match sim {
            Some(v) => serde_json::from_value(v).map_err(|e| section("sim", e))?,
            None => SimConfig::default(),
        };
        let constraint_basis: ConstraintBasis = match basis {
            Some(v) => serde_json::from_value(v).map_err(|e| section("constraint_basis", e))?,
            None => ConstraintBasis::Rate,
        };
        let sweep: Option<SweepSpec> = match sweep {
            Some(v) => Some(serde_json::from_value(v).map_err(|e| section("sweep", e))?),
            None => None,
        };
        solver.constraint_basis = constraint_basis;

        let config = Self {
            params,
            solver,
            sim,
            constraint_basis,
            sweep,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.sim.validate()?;
        if let Some(sweep) = &self.sweep {
            sweep.validate()?;
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self
    }

    pub fn with_constraint_basis(mut self, basis: ConstraintBasis) -> Self {
        self.constraint_basis = basis;
        self.solver.constraint_basis = basis;
        self
    }

    /// Solver options with the scenario's constraint basis applied.
    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            constraint_basis: self.constraint_basis,
            ..self.solver.clone()
        }
    }
}

/// Hex SHA-256 of the canonical JSON encoding of `params`.
pub fn params_hash(params: &ModelParams) -> String {
    let canonical = serde_json::to_vec(params).expect("parameters serialize");
    Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
}

/// Identifies what produced an output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub params_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(params: &ModelParams, seed: u64) -> Self {
        Self {
            tool: "dcsplit".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            params_sha256: params_hash(params),
            seed,
        }
    }

    /// `# key: value` lines for the top of a CSV file.
    pub fn header_lines(&self) -> String {
        format!(
            "# tool: {} {}\n# params_sha256: {}\n# seed: {}\n",
            self.tool, self.version, self.params_sha256, self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE_II: &str = r#"{
        "lambda_fg": 6.67, "lambda_bg": 1.0, "mu_m": 1.0, "mu_s": 1.5,
        "n_m": 6, "n_s": 6, "batch_probs": [0.5, 0.5], "delta": 0.5, "b_max": 0.02
    }"#;

    #[test]
    fn minimal_config_matches_the_reference_scenario() {
        let config = ScenarioConfig::from_json_str(TABLE_II).unwrap();
        assert_eq!(config.params, ModelParams::table_ii());
        assert_eq!(config.solver, SolveOptions::default());
        assert_eq!(config.sim, SimConfig::default());
    }

    #[test]
    fn missing_model_key_is_named() {
        let text = TABLE_II.replace(r#""mu_s": 1.5,"#, "");
        let err = ScenarioConfig::from_json_str(&text).unwrap_err();
        assert!(err.to_string().contains("mu_s"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        let top = TABLE_II.replace("\"delta\"", "\"mu_x\": 1, \"delta\"");
        assert!(ScenarioConfig::from_json_str(&top).unwrap_err().to_string().contains("mu_x"));
        let nested = TABLE_II.replace("\"delta\"", "\"solver\": {\"tolerance\": 1}, \"delta\"");
        let err = ScenarioConfig::from_json_str(&nested).unwrap_err().to_string();
        assert!(err.contains("solver") && err.contains("tolerance"), "{err}");
    }

    #[test]
    fn sections_override_defaults() {
        let text = TABLE_II.replace(
            "\"delta\"",
            r#""solver": {"max_iters": 7, "epsilon": 0.5},
               "sim": {"horizon": 100, "seed": 9, "replications": 2},
               "constraint_basis": "per_arrival", "delta""#,
        );
        let config = ScenarioConfig::from_json_str(&text).unwrap();
        assert_eq!(config.solver.max_iters, 7);
        assert_eq!(config.solver.epsilon, Some(0.5));
        assert_eq!(config.sim.seed, 9);
        assert_eq!(config.constraint_basis, ConstraintBasis::PerArrival);
        assert_eq!(config.solve_options().constraint_basis, ConstraintBasis::PerArrival);
    }

    #[test]
    fn serialization_round_trips() {
        let config = ScenarioConfig::new(ModelParams::table_ii()).with_seed(5);
        let text = serde_json::to_string(&config).unwrap();
        assert_eq!(ScenarioConfig::from_json_str(&text).unwrap(), config);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = params_hash(&ModelParams::table_ii());
        assert_eq!(a, params_hash(&ModelParams::table_ii()));
        assert_eq!(a.len(), 64);
        let b = params_hash(&ModelParams {
            b_max: 0.03,
            ..ModelParams::table_ii()
        });
        assert_ne!(a, b);
    }
}
