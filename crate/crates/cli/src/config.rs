//! JSON run configs with dotted-path overrides from the command line.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::CliError;

pub const SEED_ENV: &str = "OVSG_SEED";

/// Splits `--config FILE` out of `args` and turns the rest into `(dotted key, value)` pairs.
///
/// Accepted forms: `--a.b value`, `--a.b=value`, and a bare `--flag` meaning `true`.
pub fn parse_args(args: &[String]) -> Result<(Option<PathBuf>, Vec<(String, Value)>), CliError> {
    let mut config = None;
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let key = arg
            .strip_prefix("--")
            .filter(|k| !k.is_empty())
            .ok_or_else(|| CliError::Validation(format!("unexpected argument {arg:?}; overrides look like --key value")))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => match args.get(i + 1) {
                Some(next) if !next.starts_with("--") => {
                    i += 1;
                    (key.to_string(), Some(next.clone()))
                }
                _ => (key.to_string(), None),
            },
        };
        i += 1;
        if key == "config" {
            let path = raw.ok_or_else(|| CliError::Validation("--config needs a path".into()))?;
            config = Some(PathBuf::from(path));
            continue;
        }
        if key.split('.').any(str::is_empty) {
            return Err(CliError::Validation(format!("malformed key {key:?}")));
        }
        pairs.push((key, raw.map_or(Value::Bool(true), |r| parse_value(&r))));
    }
    Ok((config, pairs))
}

/// JSON if it parses as JSON, otherwise a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `value` at a dotted path, creating intermediate objects.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Validation(format!("cannot set {key:?}: {:?} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
    }
    Ok(())
}

/// Reads the config file (if any), applies overrides and the seed variable, then
/// deserializes into the command's config type. Unknown keys are rejected.
pub fn load<T: DeserializeOwned>(config: Option<&Path>, overrides: &[(String, Value)]) -> Result<(T, Value), CliError> {
    let mut root = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(CliError::Validation("config must be a JSON object".into()));
    }
    for (k, v) in overrides {
        set_path(&mut root, k, v.clone())?;
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
        set_path(&mut root, "seed", Value::from(seed))?;
    }
    let parsed = serde_json::from_value(root.clone()).map_err(|e| CliError::Validation(format!("config: {e}")))?;
    Ok((parsed, root))
}

pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} {} does not exist", path.display())))
    }
}
