use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::UsageError;

pub const CONFIG_FILE: &str = "config.json";

/// Loads the `args` object of a resolved-config file and lets every flag
/// given explicitly on the command line override it.
pub fn merge<T: Serialize + DeserializeOwned>(args: T, matches: &ArgMatches, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else {
        return Ok(args);
    };
    let text = fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut base = match file.get("args").cloned().unwrap_or(file) {
        Value::Object(m) => m,
        _ => return Err(UsageError(format!("{} does not hold an args object", path.display())).into()),
    };
    let Value::Object(cli) = serde_json::to_value(&args)? else {
        unreachable!("argument structs serialize to objects");
    };
    for (k, v) in cli {
        if matches.value_source(&k) == Some(ValueSource::CommandLine) || !base.contains_key(&k) {
            base.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(base)).with_context(|| format!("applying {}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

pub fn require_path(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", path.display())).into())
    }
}

/// Writes `config.json` next to a command's outputs.
pub fn write_resolved<A: Serialize, R: Serialize>(dir: &Path, command: &str, args: &A, resolved: &R) -> Result<()> {
    let v = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": args,
        "resolved": resolved,
    });
    write_json(&dir.join(CONFIG_FILE), &v)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
