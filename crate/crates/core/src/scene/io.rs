use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Scenario;
use crate::error::{json_error, CoreError, Result};

pub const SCENARIO_SCHEMA: &str = "hamf-scn/1";

#[derive(Serialize)]
struct FileOut<'a> {
    schema: &'static str,
    #[serde(flatten)]
    scenario: &'a Scenario,
}

#[derive(Deserialize)]
struct FileIn {
    #[allow(dead_code)]
    schema: String,
    #[serde(flatten)]
    scenario: Scenario,
}

#[derive(Deserialize)]
struct SchemaProbe {
    schema: String,
}

pub fn scenario_to_json(s: &Scenario) -> String {
    serde_json::to_string_pretty(&FileOut { schema: SCENARIO_SCHEMA, scenario: s }).expect("scenario serializes")
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let probe: SchemaProbe = serde_json::from_str(text).map_err(|e| json_error(text, &e))?;
    if probe.schema != SCENARIO_SCHEMA {
        return Err(CoreError::Version { found: probe.schema, expected: SCENARIO_SCHEMA });
    }
    let file: FileIn = serde_json::from_str(text).map_err(|e| json_error(text, &e))?;
    file.scenario.validate()?;
    Ok(file.scenario)
}

pub fn save_scenario(path: &Path, s: &Scenario) -> Result<()> {
    std::fs::write(path, scenario_to_json(s)).map_err(|e| CoreError::io(path, e))
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    parse_scenario(&text)
}
