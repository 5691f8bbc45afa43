//! JSON configuration files, overlays and resolved-config snapshots.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

pub const SNAPSHOT_FILE: &str = "resolved_config.json";

pub fn read_json_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Overlays `patch` onto `base` key by key, recursing into objects. Keys
/// that `base` does not have are rejected so typos do not pass silently.
pub fn merge(base: &mut Value, patch: &Value, context: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let name = if context.is_empty() { k.clone() } else { format!("{context}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &name)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(CliError::config(format!("unknown key '{name}'"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// `base` with `patch` overlaid, read back as `T`.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&Value>, context: &str) -> Result<T, CliError> {
    let mut v = serde_json::to_value(base).map_err(|e| CliError::config(e.to_string()))?;
    if let Some(p) = patch {
        if !p.is_object() {
            return Err(CliError::config(format!("'{context}' must be an object")));
        }
        merge(&mut v, p, context)?;
    }
    serde_json::from_value(v).map_err(|e| CliError::config(format!("{context}: {e}")))
}

/// Writes `resolved_config.json` into `dir`.
pub fn write_snapshot<T: Serialize>(dir: &Path, value: &T) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    stamp_core::grid::write_json(&dir.join(SNAPSHOT_FILE), value)?;
    Ok(())
}

pub fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| {
        let msg = e.to_string();
        let msg = msg.strip_prefix("configuration error: ").unwrap_or(&msg);
        CliError::config(format!("{what}: {msg}"))
    })
}
