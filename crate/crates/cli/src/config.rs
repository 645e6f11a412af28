//! `--config file.json` merging. Flags given on the command line win over
//! the file, the file wins over environment fallbacks and defaults.

use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Fully resolved invocation, embedded in every output file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub args: Value,
}

/// Locates the run config inside a config file. Accepts a bare run config,
/// any output file embedding one under `run_config`, or a flat object of
/// flag values.
fn extract_args(doc: Value, command: &str) -> Result<Map<String, Value>, CliError> {
    let doc = match doc {
        Value::Object(mut m) if m.contains_key("run_config") => m.remove("run_config").unwrap_or_default(),
        other => other,
    };
    let Value::Object(mut obj) = doc else {
        return Err(CliError::Usage("config: expected a JSON object".into()));
    };
    if let Some(Value::String(c)) = obj.get("command") {
        if c != command {
            return Err(CliError::Usage(format!(
                "config: written for `{c}`, not `{command}`"
            )));
        }
    }
    match obj.remove("args") {
        Some(Value::Object(args)) => Ok(args),
        Some(_) => Err(CliError::Usage("config: `args` must be an object".into())),
        None => {
            obj.remove("command");
            obj.remove("version");
            Ok(obj)
        }
    }
}

/// Applies the config file at `path` to `args`, skipping every field that
/// was set explicitly on the command line.
pub fn merge<T>(args: &T, matches: &ArgMatches, path: &Path, command: &str) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned,
{
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let doc: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let from_file = extract_args(doc, command)?;
    let Value::Object(mut current) = serde_json::to_value(args).map_err(|e| CliError::Usage(e.to_string()))? else {
        unreachable!("argument structs serialize to objects");
    };
    for (key, value) in from_file {
        if key == "config" {
            continue;
        }
        if !current.contains_key(&key) {
            return Err(CliError::Usage(format!("config: unknown field `{key}`")));
        }
        let explicit = matches!(matches.value_source(&key), Some(ValueSource::CommandLine));
        if !explicit {
            current.insert(key, value);
        }
    }
    serde_json::from_value(Value::Object(current))
        .map_err(|e| CliError::Usage(format!("config: {e}")))
}
