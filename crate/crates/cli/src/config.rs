//! Layered settings: built-in defaults, then the TOML file, then
//! `MMCR_{SECTION}_{KEY}` environment variables, then command-line flags.
//!
//! Every layer is a TOML table per section, merged key by key before the
//! section is deserialized into its typed struct.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::CliError;

pub const SECTIONS: [&str; 5] = ["synth", "preprocess", "train", "prune", "service"];

#[derive(Debug, Clone, Default)]
pub struct Layers {
    file: Table,
    env: Table,
}

/// A scalar from the environment: TOML syntax when it parses, otherwise the
/// raw string.
fn env_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl Layers {
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                let t: Table = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                if let Some(k) = t.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
                    return Err(CliError::Usage(format!("{}: unknown section [{k}]", p.display())));
                }
                t
            }
            None => Table::new(),
        };
        let mut env_table = Table::new();
        for (k, v) in env {
            let Some(rest) = k.strip_prefix("MMCR_") else { continue };
            let Some((section, key)) = rest.split_once('_') else { continue };
            let section = section.to_ascii_lowercase();
            if !SECTIONS.contains(&section.as_str()) || key.is_empty() {
                continue;
            }
            env_table
                .entry(section)
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("sections are tables")
                .insert(key.to_ascii_lowercase(), env_value(&v));
        }
        Ok(Self { file, env: env_table })
    }

    /// Resolves one section on top of `base`.
    pub fn section<T: Serialize + DeserializeOwned>(&self, name: &str, base: &T, flags: Table) -> Result<T, CliError> {
        let mut merged = Table::try_from(base).map_err(|e| CliError::Internal(e.to_string()))?;
        for layer in [&self.file, &self.env] {
            match layer.get(name) {
                Some(Value::Table(t)) => merged.extend(t.clone()),
                Some(_) => return Err(CliError::Usage(format!("config entry {name} must be a section"))),
                None => {}
            }
        }
        merged.extend(flags);
        Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("[{name}] {}", e.message())))
    }
}

/// Collects the flags that were actually given.
#[derive(Default)]
pub struct Flags(Table);

impl Flags {
    pub fn set<V: Into<Value>>(mut self, key: &str, v: Option<V>) -> Self {
        if let Some(v) = v {
            self.0.insert(key.into(), v.into());
        }
        self
    }

    pub fn set_str<V: ToString>(self, key: &str, v: Option<V>) -> Self {
        self.set(key, v.map(|v| v.to_string()))
    }

    pub fn table(self) -> Table {
        self.0
    }
}
