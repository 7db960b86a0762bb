//! Flat `key = value` configuration files.
//!
//! Keys mirror the field names of the core configuration structs. Values use
//! TOML scalar syntax; nested tables are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::Value;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlatConfig(BTreeMap<String, Value>);

impl FlatConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text)?;
        let mut map = BTreeMap::new();
        for (k, v) in table {
            if matches!(v, Value::Table(_) | Value::Array(_)) {
                bail!("config field `{k}`: only scalar values are allowed");
            }
            map.insert(k, v);
        }
        Ok(Self(map))
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.0.insert(key.to_string(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.0.iter()
    }

    /// Fails on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for k in self.0.keys() {
            if !known.contains(&k.as_str()) {
                bail!("unknown config field `{k}`");
            }
        }
        Ok(())
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(v) => bail!("config field `{key}`: expected a number, found `{v}`"),
        }
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(v) => bail!("config field `{key}`: expected a non-negative integer, found `{v}`"),
        }
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>> {
        Ok(self.u64(key)?.map(|v| v as usize))
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(*b)),
            Some(v) => bail!("config field `{key}`: expected true or false, found `{v}`"),
        }
    }

    pub fn string(&self, key: &str) -> Result<Option<String>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => bail!("config field `{key}`: expected a string, found `{v}`"),
        }
    }

    /// Renders as `key = value` lines in key order.
    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn typed_access_names_the_field() {
        let c = FlatConfig::parse("lr_init = \"fast\"\nepochs = 3\nlookahead = false").unwrap();
        let err = c.f64("lr_init").unwrap_err().to_string();
        assert!(err.contains("lr_init"), "{err}");
        assert_eq!(c.usize("epochs").unwrap(), Some(3));
        assert_eq!(c.f64("epochs").unwrap(), Some(3.0));
        assert_eq!(c.bool("lookahead").unwrap(), Some(false));
        assert!(c.check_known(&["epochs", "lookahead"]).unwrap_err().to_string().contains("lr_init"));
    }

    #[test]
    fn nested_tables_rejected() {
        assert!(FlatConfig::parse("[model]\nbands = 3").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = FlatConfig::default();
        c.set("a", 1.5);
        c.set("b", 2i64);
        c.set("c", "spectral");
        assert_eq!(FlatConfig::parse(&c.to_text()).unwrap(), c);
    }
}
