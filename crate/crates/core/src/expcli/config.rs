//! JSON run configuration: schema-checked parsing with materialized defaults.

use std::path::Path;

use serde_json::Value;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::trainer::RunConfig;

fn schema_error(prefix: &str, err: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = err.path().to_string();
    let inner = err.into_inner();
    let path = match (prefix, path.as_str()) {
        ("", ".") => String::new(),
        (p, ".") => p.to_string(),
        ("", q) => q.to_string(),
        (p, q) => format!("{p}.{q}"),
    };
    if path.is_empty() {
        Error::config(inner.to_string())
    } else {
        Error::config(format!("{path}: {inner}"))
    }
}

/// Parses a JSON value into a [`RunConfig`], filling `model.num_classes` and
/// `model.input_shape` from the dataset when absent.
pub fn config_from_value(mut value: Value) -> Result<RunConfig> {
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::config("config must be a JSON object"))?;
    let dataset = obj
        .get("dataset")
        .cloned()
        .ok_or_else(|| Error::config("missing key `dataset`"))?;
    let dataset: DatasetSpec = serde_path_to_error::deserialize(dataset).map_err(|e| schema_error("dataset", e))?;
    if let Some(Value::Object(model)) = obj.get_mut("model") {
        model
            .entry("num_classes")
            .or_insert_with(|| Value::from(dataset.num_classes()));
        model
            .entry("input_shape")
            .or_insert_with(|| Value::from(dataset.sample_shape()));
    }
    let config: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| schema_error("", e))?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid JSON: {e}")))?;
    config_from_value(value)
}

/// Reads and validates a run configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// The fully materialized JSON form of a config.
pub fn config_to_value(config: &RunConfig) -> Result<Value> {
    Ok(serde_json::to_value(config)?)
}
