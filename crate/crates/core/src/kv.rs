//! Flat `key = value` text with `#` comments.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parsed entries; every key must be consumed or [`KeyValues::finish`] fails.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: "empty key".into(),
                });
            }
            if entries
                .insert(key.clone(), (value.trim().to_string(), k + 1))
                .is_some()
            {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.take(key).map(|(v, _)| v)
    }

    pub fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|_| Error::Parse {
                line,
                msg: format!("invalid value `{v}` for `{key}`"),
            }),
        }
    }

    pub fn take_required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        self.take_parsed(key)?.ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("missing required key `{key}`"),
        })
    }

    /// Comma- or space-separated reals.
    pub fn take_vector(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>().map_err(|_| Error::Parse {
                        line,
                        msg: format!("invalid number `{s}` in `{key}`"),
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    pub fn remaining(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, (v, _))| (k.as_str(), v.as_str()))
    }

    /// Rejects leftover keys.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, _)) => Err(Error::UnknownKey(k)),
        }
    }
}
