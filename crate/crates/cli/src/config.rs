//! Layered settings: built-in defaults, then the config file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Environment variable naming the directory default outputs go under.
pub const OUT_ROOT_ENV: &str = "MFTRYON_OUT";

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("out"), PathBuf::from)
}

/// Parsed config file: one TOML table per subcommand.
#[derive(Debug, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
        let table: toml::Table = text.parse().map_err(|e| crate::Validation(format!("{}: {e}", path.display())))?;
        let root = match serde_json::to_value(table)? {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        Ok(Self { root })
    }

    pub fn section(&self, name: &str) -> Option<&Value> {
        self.root.get(name)
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn check_keys(known: &Value, given: &Value, at: &str) -> Result<()> {
    if let (Value::Object(k), Value::Object(g)) = (known, given) {
        for (key, v) in g {
            let path = if at.is_empty() { key.clone() } else { format!("{at}.{key}") };
            match k.get(key) {
                Some(kv) => check_keys(kv, v, &path)?,
                None => return Err(crate::Validation(format!("unknown config key `{path}`")).into()),
            }
        }
    }
    Ok(())
}

/// `S::default()` overridden by the file section, then by the set flags.
/// Flag structs serialise only the fields the user gave.
pub fn resolve<S, F>(section: Option<&Value>, flags: &F) -> Result<S>
where
    S: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut value = serde_json::to_value(S::default())?;
    if let Some(sec) = section {
        if !sec.is_object() {
            return Err(crate::Validation("config file sections must be tables".into()).into());
        }
        check_keys(&value, sec, "")?;
        merge(&mut value, sec);
    }
    merge(&mut value, &serde_json::to_value(flags)?);
    serde_json::from_value(value).map_err(|e| crate::Validation(format!("config: {e}")).into())
}

/// Record of how an output was produced.
pub fn provenance(command: &str, resolved: &impl Serialize) -> Value {
    serde_json::json!({
        "tool": "mftryon",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "config": resolved,
    })
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct S {
        a: u32,
        b: String,
        inner: Inner,
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct Inner {
        x: f64,
        y: f64,
    }

    impl Default for S {
        fn default() -> Self {
            Self { a: 1, b: "default".into(), inner: Inner::default() }
        }
    }

    impl Default for Inner {
        fn default() -> Self {
            Self { x: 1.0, y: 2.0 }
        }
    }

    #[derive(Serialize)]
    struct Flags {
        #[serde(skip_serializing_if = "Option::is_none")]
        a: Option<u32>,
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: Value = serde_json::json!({"a": 5, "b": "file", "inner": {"y": 7.0}});
        let s: S = resolve(Some(&file), &Flags { a: Some(9) }).unwrap();
        assert_eq!(s, S { a: 9, b: "file".into(), inner: Inner { x: 1.0, y: 7.0 } });
        let s: S = resolve(None, &Flags { a: None }).unwrap();
        assert_eq!(s, S::default());
    }

    #[test]
    fn unknown_types_are_rejected() {
        let file: Value = serde_json::json!({"a": "many"});
        assert!(resolve::<S, _>(Some(&file), &Flags { a: None }).is_err());
        let file: Value = serde_json::json!({"inner": {"z": 1.0}});
        let err = resolve::<S, _>(Some(&file), &Flags { a: None }).unwrap_err();
        assert!(err.to_string().contains("inner.z"));
    }
}
