use crate::error::CliError;
use crate::ingest::IngestOptions;
use magcal_core::baselines::{TlConfig, TwoStepConfig};
use magcal_core::graph::WeightConfig;
use magcal_core::simulator::Scenario;
use magcal_core::solver::SolverConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const SCHEMA_VERSION: &str = "1.0";

/// Settings shared by `simulate`, `calibrate` and `delta`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Simulation settings; `scenario.noise` also sets the measurement
    /// weighting of ingested logs.
    pub scenario: Scenario,
    pub solver: SolverConfig,
    pub weights: WeightConfig,
    pub twostep: TwoStepConfig,
    pub tolles_lawson: TlConfig,
    pub ingest: IngestOptions,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: String| CliError::InvalidConfig(e);
        self.scenario.profile.validate().map_err(|e| invalid(e.to_string()))?;
        self.scenario.truth.validate().map_err(|e| invalid(e.to_string()))?;
        self.scenario.noise.validate().map_err(|e| invalid(e.to_string()))?;
        self.solver.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }
}

/// Reads a JSON document; a missing path yields the type's default.
pub fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::InvalidConfig(format!("{}: {e}", path.display())))
}

/// SHA-256 of the canonical JSON form of `value`, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_vec(value).expect("configuration serializes");
    hex::encode(Sha256::digest(&canonical))
}
