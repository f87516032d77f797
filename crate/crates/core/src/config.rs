//! Flat UTF-8 `key=value` text used for manifests, configs and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KeyValues { map })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse value {v:?} for key {key:?}"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    /// Overwrites `slot` if the key is present.
    pub fn read_into<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Sorted `key=value` lines.
    pub fn render(&self) -> String {
        self.map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_round_trip() {
        let kv = KeyValues::parse("# comment\n b = 2\n\na=0.1\n").unwrap();
        assert_eq!(kv.get::<f64>("a").unwrap(), Some(0.1));
        assert_eq!(kv.require::<u32>("b").unwrap(), 2);
        assert_eq!(kv.render(), "a=0.1\nb=2\n");
        assert_eq!(KeyValues::parse(&kv.render()).unwrap(), kv);
        assert!(KeyValues::parse("novalue").is_err());
        assert!(kv.get::<u32>("a").is_err());
    }

    #[test]
    fn floats_round_trip_exactly() {
        let mut kv = KeyValues::new();
        let x = 0.1f64 + 0.2;
        kv.set("x", x);
        let back = KeyValues::parse(&kv.render()).unwrap().require::<f64>("x").unwrap();
        assert_eq!(back.to_bits(), x.to_bits());
    }
}
