//! Flat `key = value` run configuration.
//!
//! A config file is turned into command-line flags placed ahead of the real
//! ones, so explicit flags win and the argument parser does all the type
//! checking. Keys are flag names without the leading dashes.

use std::path::Path;

use clap::{ArgAction, Command};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}` for `{command}`")]
    UnknownKey { line: usize, key: String, command: String },
    #[error("line {line}: `{key}` takes true or false, found `{value}`")]
    NotBool { line: usize, key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunConfig {
    /// `(line, key, value)` in file order.
    pub entries: Vec<(usize, String, String)>,
}

impl RunConfig {
    /// Parses the file body. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: line.to_string(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: line.to_string(),
                });
            }
            entries.push((i + 1, k.to_string(), v.to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> std::io::Result<String> {
        std::fs::read_to_string(path)
    }

    /// Flags for subcommand `sub`. Switches are emitted only when true.
    pub fn to_args(&self, sub: &Command) -> Result<Vec<String>, ConfigError> {
        let mut out = Vec::new();
        for (line, key, value) in &self.entries {
            let arg = sub
                .get_arguments()
                .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
                .ok_or_else(|| ConfigError::UnknownKey {
                    line: *line,
                    key: key.clone(),
                    command: sub.get_name().to_string(),
                })?;
            if matches!(arg.get_action(), ArgAction::SetTrue) {
                match value.as_str() {
                    "true" => out.push(format!("--{key}")),
                    "false" => {}
                    _ => {
                        return Err(ConfigError::NotBool {
                            line: *line,
                            key: key.clone(),
                            value: value.clone(),
                        })
                    }
                }
            } else {
                out.push(format!("--{key}={value}"));
            }
        }
        Ok(out)
    }
}
