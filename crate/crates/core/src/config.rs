//! Experiment configuration: one JSON document with dotted-key overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::MatrixFormat;
use crate::error::{Error, Result};
use crate::model::RahnConfig;
use crate::rcm::RcmConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub matrix: Option<PathBuf>,
    pub matrix_format: MatrixFormat,
    pub user_metadata: Option<PathBuf>,
    pub service_metadata: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            matrix: None,
            matrix_format: MatrixFormat::MatrixText,
            user_metadata: None,
            service_metadata: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Training densities; single-run commands use the first one.
    pub densities: Vec<f64>,
    pub outlier_fraction: f64,
    /// Master seed for the split, clustering, initialisation and shuffling.
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            densities: vec![0.02, 0.04, 0.06, 0.08, 0.10],
            outlier_fraction: 0.10,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: PathsConfig,
    pub rcm: RcmConfig,
    pub model: RahnConfig,
    pub protocol: ProtocolConfig,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.rcm.validate()?;
        self.model.validate()?;
        let p = &self.protocol;
        if p.densities.is_empty() {
            return Err(Error::Config("protocol.densities is empty".into()));
        }
        if let Some(d) = p.densities.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
            return Err(Error::Config(format!("density {d} is outside (0, 1]")));
        }
        if !(0.0..1.0).contains(&p.outlier_fraction) {
            return Err(Error::Config(format!(
                "outlier_fraction {} is outside [0, 1)",
                p.outlier_fraction
            )));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.protocol.seed
    }

    /// Clustering settings carrying the master seed.
    pub fn rcm_config(&self) -> RcmConfig {
        RcmConfig {
            seed: self.protocol.seed,
            ..self.rcm
        }
    }

    /// Model settings carrying the master seed.
    pub fn model_config(&self) -> RahnConfig {
        RahnConfig {
            seed: self.protocol.seed,
            ..self.model
        }
    }

    pub fn primary_density(&self) -> f64 {
        self.protocol.densities.first().copied().unwrap_or(0.1)
    }
}

/// Sets `key` (dotted path, e.g. `model.d`) in a JSON document.
///
/// `raw` is parsed as JSON when possible and used as a string otherwise, so
/// `model.d=8`, `protocol.densities=[0.1]` and `paths.matrix=rt.txt` all work.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!("override {key:?} crosses a non-object")));
        }
        node = node
            .as_object_mut()
            .expect("checked object")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(map) => {
            map.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::Config(format!("override {key:?} crosses a non-object"))),
    }
}

/// Parses `key=value`.
pub fn parse_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))
}
