//! Top-level run configuration: every parameter block, paths and the seed.
//!
//! Configs are JSON. Missing keys take their defaults, unknown keys are
//! rejected. Dotted overrides (`detector.gamma=0.25`) are applied on the
//! JSON tree before deserializing, so they go through the same checks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::aeb_filter::FilterConfig;
use crate::classifier::TrainConfig;
use crate::detector::DetectorParams;
use crate::evaluation::EvaluationParams;
use crate::events::ReadOptions;
use crate::flowfield::FlowParams;
use crate::manager::{ManagerParams, TrackerConfig};
use crate::patch::PatchParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{origin}: {source}")]
    Parse { origin: String, source: serde_json::Error },
    #[error("override `{0}` must look like section.key=value")]
    BadOverride(String),
    #[error("override `{key}`: `{segment}` is not a section")]
    NotASection { key: String, segment: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EventParams {
    /// Largest tolerated backwards timestamp step when reading, µs.
    pub tolerance_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Classifier weights used by `track` unless overridden.
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub events: EventParams,
    pub flowfield: FlowParams,
    pub detector: DetectorParams,
    pub filter: FilterConfig,
    pub patch: PatchParams,
    pub classifier: TrainConfig,
    pub manager: ManagerParams,
    pub evaluation: EvaluationParams,
    pub paths: Paths,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.tracker().validate().map_err(ConfigError::Invalid)?;
        self.classifier.validate().map_err(ConfigError::Invalid)?;
        self.evaluation.validate().map_err(ConfigError::Invalid)
    }

    pub fn tracker(&self) -> TrackerConfig {
        TrackerConfig {
            flowfield: self.flowfield.clone(),
            detector: self.detector.clone(),
            filter: self.filter.clone(),
            patch: self.patch.clone(),
            manager: self.manager.clone(),
        }
    }

    pub fn read_options(&self) -> ReadOptions {
        ReadOptions {
            tolerance_us: self.events.tolerance_us,
        }
    }

    /// Training settings with the run seed folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.classifier.seed ^ self.seed,
            ..self.classifier.clone()
        }
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            origin: origin.to_string(),
            source,
        })?;
        Self::from_value(value, &[], origin)
    }

    /// Builds a config from an optional file plus overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let (value, origin) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                let v = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                    origin: p.display().to_string(),
                    source,
                })?;
                (v, p.display().to_string())
            }
            None => (Value::Object(Default::default()), "defaults".to_string()),
        };
        Self::from_value(value, overrides, &origin)
    }

    fn from_value(mut value: Value, overrides: &[String], origin: &str) -> Result<Self, ConfigError> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self = serde_json::from_value(value).map_err(|source| ConfigError::Parse {
            origin: origin.to_string(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `a.b.c=value` in a JSON tree. The value is parsed as JSON when it
/// can be and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(assignment.to_string()))?;
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(ConfigError::BadOverride(assignment.to_string()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for seg in &segments[..segments.len() - 1] {
        let map = node.as_object_mut().ok_or_else(|| ConfigError::NotASection {
            key: key.to_string(),
            segment: seg.to_string(),
        })?;
        node = map
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let last = segments[segments.len() - 1];
    node.as_object_mut()
        .ok_or_else(|| ConfigError::NotASection {
            key: key.to_string(),
            segment: last.to_string(),
        })?
        .insert(last.to_string(), value);
    Ok(())
}
