use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Keys accepted in a `--config` file. Command-line flags take precedence.
pub const KEYS: &[&str] = &[
    "seed",
    "steps",
    "batch_size",
    "learning_rate",
    "warmup_steps",
    "checkpoint_every",
    "flow_steps",
    "hidden_width",
    "patch_size",
    "eta",
    "stride",
    "k",
];

/// Parsed `key = value` file; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FileConfig {
    origin: String,
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(CliError::Usage(format!(
                    "{origin}:{}: unknown key {key:?} (known: {})",
                    n + 1,
                    KEYS.join(", ")
                )));
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CliError::Usage(format!("{origin}:{}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(Self {
            origin: origin.to_string(),
            values,
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        debug_assert!(KEYS.contains(&key), "undeclared config key {key}");
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::Usage(format!("{}: invalid value {v:?} for {key}: {e}", self.origin)))
            })
            .transpose()
    }

    /// Flag value if given, else the file value, else `default`.
    pub fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }
}
