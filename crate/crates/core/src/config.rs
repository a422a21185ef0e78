//! TOML configuration files with `key.path=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Parses an override value as TOML, falling back to a bare string so that
/// `out_dir=runs/a` works without quoting.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override, creating intermediate tables.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {spec:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override {spec:?} has an empty key segment")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {spec:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads `path` (or starts from an empty table), applies `overrides` in
/// order, and deserializes the result. Missing keys take their defaults.
pub fn load_config<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<Table>(&text).map_err(|e| Error::format(p, e.to_string()))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(format!("invalid configuration: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize, PartialEq, Default)]
    #[serde(default, deny_unknown_fields)]
    struct Inner {
        rate: f64,
        name: String,
    }

    #[derive(Debug, Deserialize, PartialEq, Default)]
    #[serde(default, deny_unknown_fields)]
    struct Outer {
        steps: u64,
        inner: Inner,
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "steps = 3\n[inner]\nrate = 0.5\n").unwrap();
        let c: Outer = load_config(Some(&path), &["inner.name=runs/a".into(), "steps=7".into()]).unwrap();
        assert_eq!(
            c,
            Outer {
                steps: 7,
                inner: Inner { rate: 0.5, name: "runs/a".into() }
            }
        );
    }

    #[test]
    fn defaults_without_file() {
        let c: Outer = load_config(None, &[]).unwrap();
        assert_eq!(c, Outer::default());
    }

    #[test]
    fn errors() {
        assert!(matches!(load_config::<Outer>(None, &["steps".into()]), Err(Error::Config(_))));
        assert!(matches!(load_config::<Outer>(None, &["bogus=1".into()]), Err(Error::Config(_))));
        assert!(matches!(load_config::<Outer>(None, &["steps=1".into(), "steps.x=2".into()]), Err(Error::Config(_))));
        assert!(matches!(load_config::<Outer>(Some(Path::new("/nonexistent.toml")), &[]), Err(Error::Io { .. })));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "steps = [").unwrap();
        assert!(matches!(load_config::<Outer>(Some(&path), &[]), Err(Error::Format { .. })));
    }
}
