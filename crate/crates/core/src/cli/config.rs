//! Flat `key = value` configuration with dotted section prefixes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Keys under this prefix tune execution only and never enter the hash.
const RUNTIME_PREFIX: &str = "runtime.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    /// Parses one `key = value` per line. `#` starts a comment; blank lines
    /// are ignored; a repeated key is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: malformed key '{key}'", no + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", no + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    pub fn parse_key<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("cannot parse '{key}' = '{v}'")))
            })
            .transpose()
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse_key(key)?.unwrap_or(default))
    }

    pub fn require_parse<T: FromStr>(&self, key: &str) -> Result<T> {
        self.parse_key(key)?
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    /// Comma-separated reals.
    pub fn floats(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key).map(|v| parse_floats(key, v)).transpose()
    }

    pub fn require_floats(&self, key: &str) -> Result<Vec<f64>> {
        self.floats(key)?
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    /// Rows separated by `;`, entries by `,`.
    pub fn matrix(&self, key: &str) -> Result<Option<DMatrix<f64>>> {
        let Some(v) = self.get(key) else { return Ok(None) };
        let rows = v
            .split(';')
            .map(|r| parse_floats(key, r))
            .collect::<Result<Vec<_>>>()?;
        let cols = rows.first().map_or(0, Vec::len);
        if cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config(format!("'{key}' is not a rectangular matrix")));
        }
        Ok(Some(DMatrix::from_row_iterator(rows.len(), cols, rows.into_iter().flatten())))
    }

    pub fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.get(key).map(PathBuf::from))
    }

    /// Rejects any key that does not start with one of `prefixes` and is not
    /// listed in `exact`.
    pub fn check_known(&self, exact: &[&str], prefixes: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            let known = exact.contains(&key.as_str())
                || key.starts_with(RUNTIME_PREFIX)
                || prefixes.iter().any(|p| key.starts_with(p));
            if !known {
                return Err(Error::Config(format!("unknown key '{key}'")));
            }
        }
        Ok(())
    }

    /// Sorted `key = value` lines, runtime keys excluded.
    pub fn canonical(&self) -> String {
        self.entries
            .iter()
            .filter(|(k, _)| !k.starts_with(RUNTIME_PREFIX))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Content hash of [`Config::canonical`]: SHA-256 over
    /// `"config <len>\0<text>"`, the layout git uses for blobs.
    pub fn hash(&self) -> String {
        hash_text(&self.canonical())
    }

    pub fn seed(&self) -> Result<u64> {
        self.require_parse("seed")
            .map_err(|_| Error::Config("a numeric 'seed' is required (set it in the config or pass --seed)".into()))
    }
}

pub(crate) fn hash_text(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("config {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

fn parse_floats(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Config(format!("'{key}': '{s}' is not a finite number")))
        })
        .collect()
}
