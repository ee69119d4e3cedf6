//! Flat dotted-key JSON config files.
//!
//! Keys mirror flag names per subcommand (`train.lambda`,
//! `prepare.min-user-core`, global `seed`). Precedence: defaults, then
//! config file, then command-line flags.

use std::fmt;
use std::fs;
use std::path::Path;

use serde_json::Value;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Default)]
pub struct FileConfig {
    entries: serde_json::Map<String, Value>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("{} is not valid JSON: {e}", path.display())))?;
        let Value::Object(entries) = value else {
            return Err(ConfigError(format!(
                "{} must hold a flat JSON object",
                path.display()
            )));
        };
        for (key, value) in &entries {
            if value.is_object() || value.is_array() {
                return Err(ConfigError(format!(
                    "key {key:?} must be a scalar (flat dotted keys only)"
                )));
            }
        }
        Ok(Self { entries })
    }

    fn raw(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .map(Some)
                .ok_or_else(|| ConfigError(format!("key {key:?} must be a number"))),
        }
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(|n| Some(n as usize))
                .ok_or_else(|| ConfigError(format!("key {key:?} must be a nonnegative integer"))),
        }
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| ConfigError(format!("key {key:?} must be a nonnegative integer"))),
        }
    }

    pub fn get_string(&self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(|s| Some(s.to_string()))
                .ok_or_else(|| ConfigError(format!("key {key:?} must be a string"))),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .as_bool()
                .map(Some)
                .ok_or_else(|| ConfigError(format!("key {key:?} must be a boolean"))),
        }
    }
}

/// Flag wins, then the config file, then the default.
pub fn resolve<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag wins, then the config file; `None` when neither is set.
pub fn resolve_opt<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_file_default() {
        assert_eq!(resolve(Some(1), Some(2), 3), 1);
        assert_eq!(resolve(None, Some(2), 3), 2);
        assert_eq!(resolve::<usize>(None, None, 3), 3);
    }

    #[test]
    fn rejects_nested_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"lambda": 0.5}}"#).unwrap();
        assert!(FileConfig::load(Some(&path)).is_err());
        fs::write(&path, r#"{"train.lambda": 0.5, "seed": 7}"#).unwrap();
        let cfg = FileConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.get_f64("train.lambda").unwrap(), Some(0.5));
        assert_eq!(cfg.get_u64("seed").unwrap(), Some(7));
        assert!(cfg.get_string("train.lambda").is_err());
    }
}
