//! Optional JSON config file mirroring the flags; explicit flags win.

use std::path::Path;

use serde_json::Value;

use crate::{CliError, CliResult};

#[derive(Default)]
pub struct FileConfig {
    values: Value,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig { values: Value::Null });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let values: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !values.is_object() {
            return Err(CliError::Usage(format!(
                "config {} must be a JSON object of flag values",
                path.display()
            )));
        }
        Ok(FileConfig { values })
    }

    /// Value for a flag key (kebab-case, as on the command line).
    pub fn get<T: serde::de::DeserializeOwned>(&self, key: &str) -> Option<T> {
        self.values
            .get(key)
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
    }

    /// Flag if explicitly set, else the config file's value, else the default.
    pub fn resolve<T: serde::de::DeserializeOwned>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> T {
        flag.or_else(|| self.get(key)).unwrap_or(default)
    }

    pub fn resolve_opt<T: serde::de::DeserializeOwned>(
        &self,
        flag: Option<T>,
        key: &str,
    ) -> Option<T> {
        flag.or_else(|| self.get(key))
    }
}
