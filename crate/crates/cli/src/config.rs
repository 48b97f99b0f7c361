//! Config files with flag overrides, and config hashing.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::desk::hex;

/// Reads a JSON object from `path`, or an empty object when `path` is `None`.
pub fn load_object(path: Option<&Path>) -> Result<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))? {
        Value::Object(m) => Ok(m),
        _ => bail!("config {} is not a JSON object", path.display()),
    }
}

/// Recursively overlays `top` onto `base`; objects merge key by key, other
/// values replace.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Builds the effective config: defaults of `T`, then the file, then the
/// flags that were given. `overrides` should serialize unset flags as
/// absent or null; nulls are ignored.
pub fn effective<T, O>(file: Option<&Path>, overrides: &O) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
    O: Serialize,
{
    let mut value = serde_json::to_value(T::default())?;
    merge(&mut value, Value::Object(load_object(file)?));
    merge(&mut value, strip_nulls(serde_json::to_value(overrides)?));
    let cfg: T = serde_json::from_value(value).context("invalid configuration")?;
    Ok(cfg)
}

fn strip_nulls(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, strip_nulls(v)))
                .collect(),
        ),
        other => other,
    }
}

/// SHA-256 of the compact JSON form. `serde_json` keeps struct field order,
/// so equal configs hash equally.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Inner {
        x: u32,
        y: u32,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Cfg {
        name: String,
        inner: Inner,
    }

    #[test]
    fn precedence_is_defaults_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"name": "a", "inner": {"x": 3}}"#).unwrap();
        let flags = serde_json::json!({"name": null, "inner": {"y": 7}});
        let cfg: Cfg = effective(Some(&p), &flags).unwrap();
        assert_eq!(
            cfg,
            Cfg {
                name: "a".into(),
                inner: Inner { x: 3, y: 7 }
            }
        );
        assert_eq!(config_hash(&cfg).unwrap(), config_hash(&cfg).unwrap());
    }

    #[test]
    fn unknown_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, "[1, 2]").unwrap();
        assert!(effective::<Cfg, _>(Some(&p), &serde_json::json!({})).is_err());
    }
}
