//! Config files: the twin's settings plus a seed, with the scene given
//! inline or as a path relative to the config file.

use std::path::{Path, PathBuf};

use maglev_core::control::TwinConfig;
use maglev_core::haptics::Scene;
use serde_json::Value;

use crate::HarnessError;

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessConfig {
    pub twin: TwinConfig,
    pub seed: u64,
    /// Directory that relative paths in the file were resolved against.
    pub base_dir: PathBuf,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            twin: TwinConfig::default(),
            seed: 0,
            base_dir: PathBuf::from("."),
        }
    }
}

pub fn load_config(path: &Path) -> Result<HarnessConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    parse_config(&text, &base).map_err(|e| e.in_file(path))
}

/// Falls back to defaults when no file is given.
pub fn load_or_default(path: Option<&Path>) -> Result<HarnessConfig, HarnessError> {
    match path {
        Some(p) => load_config(p),
        None => Ok(HarnessConfig::default()),
    }
}

pub fn parse_config(text: &str, base_dir: &Path) -> Result<HarnessConfig, HarnessError> {
    let mut value: Value = serde_json::from_str(text).map_err(HarnessError::parse)?;
    let Value::Object(map) = &mut value else {
        return Err(HarnessError::Invalid("config must be a JSON object".into()));
    };
    let seed = match map.remove("seed") {
        None => 0,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| HarnessError::Invalid("seed: must be a non-negative integer".into()))?,
    };
    if let Some(Value::String(rel)) = map.get("scene") {
        let scene = load_scene(&base_dir.join(rel))?;
        map.insert(
            "scene".into(),
            serde_json::to_value(scene).expect("scene serializes"),
        );
    }
    if let Some(Value::String(rel)) = map.get("grid_cache_dir") {
        let dir = base_dir.join(rel);
        map.insert(
            "grid_cache_dir".into(),
            Value::String(dir.to_string_lossy().into_owned()),
        );
    }
    let twin: TwinConfig = serde_path_to_error::deserialize(value)
        .map_err(|e| HarnessError::Invalid(format!("{}: {}", e.path(), e.inner())))?;
    twin.validate()
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    Ok(HarnessConfig {
        twin,
        seed,
        base_dir: base_dir.to_path_buf(),
    })
}

pub fn load_scene(path: &Path) -> Result<Scene, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Scene::from_json(&text).map_err(|e| HarnessError::Invalid(format!("{}: {e}", path.display())))
}
