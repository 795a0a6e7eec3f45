//! Scenario collections: synthetic splits and directory-of-files datasets.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::features::{scene_input, SceneInput};
use crate::scene::{generate_scenario_with, load_scenario, save_scenario, GeneratorConfig, Scenario, Template};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: &str = "hamf-manifest/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub agents: usize,
    pub polylines: usize,
    pub templates: Vec<Template>,
    pub generator: GeneratorConfig,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 1000,
            val: 200,
            agents: 4,
            polylines: 8,
            templates: Template::ALL.to_vec(),
            generator: GeneratorConfig::default(),
        }
    }
}

/// Deterministic scenario `index` of a mixed-template stream.
pub fn generate_indexed(
    seed: u64,
    index: u64,
    templates: &[Template],
    agents: usize,
    polylines: usize,
    generator: &GeneratorConfig,
) -> Result<Scenario> {
    if templates.is_empty() {
        return Err(CoreError::Config("no templates selected".into()));
    }
    let scenario_seed = seed.wrapping_mul(1_000_003).wrapping_add(index);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario_seed);
    let template = templates[rng.random_range(0..templates.len())];
    generate_scenario_with(generator, scenario_seed, template, agents, polylines)
}

/// Train/validation scenarios drawn from disjoint index ranges of one stream.
pub fn synthetic_split(cfg: &SplitConfig) -> Result<(Vec<Scenario>, Vec<Scenario>)> {
    let make = |offset: u64, n: usize| -> Result<Vec<Scenario>> {
        (0..n as u64)
            .map(|i| generate_indexed(cfg.seed, offset + i, &cfg.templates, cfg.agents, cfg.polylines, &cfg.generator))
            .collect()
    };
    Ok((make(0, cfg.train)?, make(1 << 32, cfg.val)?))
}

pub fn scene_inputs(scenarios: &[Scenario]) -> Result<Vec<SceneInput>> {
    scenarios.iter().map(scene_input).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub seed: u64,
    pub templates: Vec<Template>,
    pub ids: Vec<String>,
    pub files: Vec<String>,
}

/// Scenario files of a dataset directory in file-name order (the manifest excluded).
pub fn scenario_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CoreError::io(dir, e))?.path();
        let is_json = path.extension().is_some_and(|e| e == "json");
        let is_manifest = path.file_name().is_some_and(|n| n == MANIFEST_FILE);
        if is_json && !is_manifest && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads a single scenario file or every scenario in a directory.
pub fn load_dataset(path: &Path) -> Result<Vec<Scenario>> {
    if path.is_file() {
        return Ok(vec![load_scenario(path)?]);
    }
    let files = scenario_files(path)?;
    if files.is_empty() {
        return Err(CoreError::Invalid(format!("no scenario files in {}", path.display())));
    }
    files.iter().map(|f| load_scenario(f)).collect()
}

/// Writes `count` scenarios of the stream described by `cfg` (seed, templates, sizes)
/// into `dir`, plus a manifest. An existing non-empty `dir` is an error unless `force`,
/// in which case its scenario files and manifest are replaced.
pub fn write_dataset(dir: &Path, cfg: &SplitConfig, count: usize, force: bool) -> Result<Manifest> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?;
        if entries.next().is_some() {
            if !force {
                return Err(CoreError::Invalid(format!("{} is not empty (pass --force to overwrite)", dir.display())));
            }
            for f in scenario_files(dir)? {
                std::fs::remove_file(&f).map_err(|e| CoreError::io(&f, e))?;
            }
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut manifest = Manifest {
        schema: MANIFEST_SCHEMA.to_string(),
        seed: cfg.seed,
        templates: cfg.templates.clone(),
        ids: Vec::with_capacity(count),
        files: Vec::with_capacity(count),
    };
    for i in 0..count as u64 {
        let s = generate_indexed(cfg.seed, i, &cfg.templates, cfg.agents, cfg.polylines, &cfg.generator)?;
        let name = format!("{i:06}.json");
        save_scenario(&dir.join(&name), &s)?;
        manifest.ids.push(s.id);
        manifest.files.push(name);
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CoreError::Invalid(format!("{}: {e}", path.display())))?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(CoreError::Version { found: manifest.schema, expected: MANIFEST_SCHEMA });
    }
    Ok(manifest)
}
