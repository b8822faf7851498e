use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Failure;

/// Merges flag values with an optional JSON config file. A key takes the
/// file's value unless the flag was given on the command line.
pub fn resolve<T: DeserializeOwned>(
    flags: &impl Serialize,
    matches: &ArgMatches,
    config: Option<&Path>,
) -> Result<T, Failure> {
    let Value::Object(flag_map) = serde_json::to_value(flags).expect("flags serialize") else {
        unreachable!("flag structs serialize to objects")
    };
    let mut merged = match config {
        None => Map::new(),
        Some(path) => read_config(path)?,
    };
    if let Some(key) = merged.keys().find(|k| !flag_map.contains_key(*k)) {
        return Err(Failure::usage(format!(
            "unknown field {key:?} in config file"
        )));
    }
    for (key, value) in flag_map {
        let explicit = matches.value_source(&key) == Some(ValueSource::CommandLine);
        if explicit || !merged.contains_key(&key) {
            merged.insert(key, value);
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Failure::usage(format!("invalid configuration: {e}")))
}

fn read_config(path: &Path) -> Result<Map<String, Value>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(Failure::usage(format!(
            "{}: config must be a JSON object",
            path.display()
        ))),
        Err(e) => Err(Failure::usage(format!("{}: {e}", path.display()))),
    }
}
