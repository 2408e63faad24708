//! Layered run settings: command-line flags over a `key=value` file over defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};

/// Environment variable consulted when no seed is given explicitly.
pub const SEED_ENV: &str = "RAREMEM_SEED";

/// A mistake in how the tool was invoked; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Flag names are accepted with either `-` or `_` as the word separator.
fn canonical(key: &str) -> String {
    key.trim().replace('_', "-")
}

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    path: PathBuf,
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(usage(format!("{}:{}: expected key=value", path.display(), n + 1)));
            };
            let key = canonical(key);
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(usage(format!("{}:{}: duplicate key {key}", path.display(), n + 1)));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }
}

/// Resolves each setting once and remembers where its value came from.
#[derive(Debug)]
pub struct Settings {
    file: ConfigFile,
    resolved: Vec<(&'static str, String, &'static str)>,
}

impl Settings {
    /// Fails on any file key outside `known`.
    pub fn new(file: Option<ConfigFile>, known: &[&str]) -> Result<Self> {
        let file = file.unwrap_or_default();
        if let Some(bad) = file.entries.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(usage(format!(
                "unknown key {bad:?} in {} (expected one of: {})",
                file.path.display(),
                known.join(", ")
            )));
        }
        Ok(Self {
            file,
            resolved: Vec::new(),
        })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.file
            .entries
            .get(key)
            .map(|raw| {
                raw.parse::<T>()
                    .map_err(|e| usage(format!("{}: bad value for {key}: {e}", self.file.path.display())))
            })
            .transpose()
    }

    fn record<T: Display>(&mut self, key: &'static str, value: &T, source: &'static str) {
        self.resolved.push((key, value.to_string(), source));
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &'static str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let (value, source) = match flag {
            Some(v) => (Some(v), "flag"),
            None => match self.from_file(key)? {
                Some(v) => (Some(v), "config"),
                None => (None, "unset"),
            },
        };
        match &value {
            Some(v) => self.record(key, v, source),
            None => self.record(key, &"-", source),
        }
        Ok(value)
    }

    pub fn value<T: FromStr + Display>(&mut self, key: &'static str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match flag {
            Some(v) => {
                self.record(key, &v, "flag");
                Ok(v)
            }
            None => match self.from_file(key)? {
                Some(v) => {
                    self.record(key, &v, "config");
                    Ok(v)
                }
                None => {
                    self.record(key, &default, "default");
                    Ok(default)
                }
            },
        }
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &'static str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| usage(format!("--{key} is required (as a flag or in the config file)")))
    }

    /// Flag, then config file, then `RAREMEM_SEED`, then 0.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64> {
        if flag.is_some() || self.file.entries.contains_key("seed") {
            return self.value("seed", flag, 0);
        }
        match std::env::var(SEED_ENV) {
            Ok(raw) => {
                let seed = raw
                    .trim()
                    .parse::<u64>()
                    .map_err(|e| usage(format!("{SEED_ENV}={raw:?}: {e}")))?;
                self.record("seed", &seed, "env");
                Ok(seed)
            }
            Err(_) => {
                self.record("seed", &0u64, "default");
                Ok(0)
            }
        }
    }

    /// Writes the resolved settings to standard error, one per line.
    pub fn log(&self, command: &str) {
        for (key, value, source) in &self.resolved {
            eprintln!("config {command}.{key}={value} ({source})");
        }
    }
}

/// Wrapper so paths can go through [`Settings`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathArg(pub PathBuf);

impl FromStr for PathArg {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(PathArg(PathBuf::from(s)))
    }
}

impl Display for PathArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0.display())
    }
}
