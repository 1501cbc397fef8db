//! Scenario loading: file, optional tuned fragment, `--set` overrides.

use std::path::{Path, PathBuf};

use oppfl::learner::Strategy;
use oppfl::scenario::{Scenario, SCHEMA_VERSION};
use serde_json::{Map, Value};

use crate::CliError;

pub const DATA_DIR_ENV: &str = "OPPFL_DATA_DIR";

/// Command-line adjustments applied on top of the scenario file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub fragment: Option<PathBuf>,
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
}

pub fn load_scenario(path: &Path, overrides: &Overrides) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut value = parse_json(&text, path)?;
    if let Some(frag) = &overrides.fragment {
        merge_fragment(&mut value, frag)?;
    }
    for set in &overrides.sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got '{set}'")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, key, parsed)
            .map_err(|e| CliError::Config(format!("--set {key}: {e}")))?;
    }
    if let Some(seed) = overrides.seed {
        set_path(&mut value, "seed", seed.into()).map_err(CliError::Config)?;
    }
    if let Some(strategy) = overrides.strategy {
        set_path(&mut value, "strategy", strategy.as_str().into()).map_err(CliError::Config)?;
    }
    let scenario: Scenario = serde_path_to_error::deserialize(value).map_err(|e| {
        CliError::Config(format!(
            "{}: field '{}': {}",
            path.display(),
            e.path(),
            e.inner()
        ))
    })?;
    scenario
        .validate()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(scenario)
}

fn parse_json(text: &str, path: &Path) -> Result<Value, CliError> {
    serde_json::from_str(text).map_err(|e| {
        CliError::Config(format!(
            "{}:{}:{}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

/// Sets `dotted` (object keys or array indices) to `new`, creating missing
/// objects along the way.
pub fn set_path(root: &mut Value, dotted: &str, new: Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed key '{dotted}'"));
    }
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), new);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| format!("'{part}' is not an array index"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| format!("index {idx} out of range (length {len})"))?;
                if last {
                    *slot = new;
                    return Ok(());
                }
                slot
            }
            _ => return Err(format!("'{part}' is inside a non-container value")),
        };
    }
    unreachable!("loop returns on the last segment")
}

/// Copies the `hyper` values of a tuning fragment into the scenario.
fn merge_fragment(value: &mut Value, path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let frag = parse_json(&text, path)?;
    let bad = |msg: &str| CliError::Config(format!("{}: {msg}", path.display()));
    let obj = frag
        .as_object()
        .ok_or_else(|| bad("fragment must be an object"))?;
    if let Some(k) = obj.keys().find(|k| *k != "schema" && *k != "hyper") {
        return Err(bad(&format!("unknown fragment key '{k}'")));
    }
    if obj.get("schema").and_then(Value::as_u64) != Some(SCHEMA_VERSION as u64) {
        return Err(bad("fragment schema must be 1"));
    }
    let hyper = obj
        .get("hyper")
        .and_then(Value::as_object)
        .ok_or_else(|| bad("fragment needs a 'hyper' object"))?;
    for (k, v) in hyper {
        set_path(value, &format!("hyper.{k}"), v.clone()).map_err(CliError::Config)?;
    }
    Ok(())
}

pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from)
}

/// Fails with a configuration error if any dataset file is missing.
pub fn check_data_files(scenario: &Scenario, root: &Path) -> Result<(), CliError> {
    for f in scenario.dataset.files(root) {
        if !f.is_file() {
            return Err(CliError::Config(format!(
                "dataset file {} not found (set {DATA_DIR_ENV} to the dataset root)",
                f.display()
            )));
        }
    }
    Ok(())
}
