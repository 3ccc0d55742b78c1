//! Configuration layering: built-in defaults, then a TOML file, then
//! `key.path=value` overrides. Unknown keys are errors at every layer.
//!
//! ```toml
//! [synth]
//! n_subjects = 50
//! seed = 0
//!
//! [train]
//! lr_main = 0.01
//! layout = ["C", "DTE", "max", "min", "mean", "var", "mode", "median"]
//! ```

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datagen::SynthConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Everything a pipeline run can be configured with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Schema(format!("config: {e}")))
    }
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `key.path` to `value` in `table`. The value is read as a TOML value
/// when it parses as one (`0.5`, `true`, `[2, 8]`, `"x"`) and as a bare
/// string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Defaults, overlaid by `file` (TOML text), overlaid by `overrides`.
pub fn layered<C>(file: Option<&str>, overrides: &[String]) -> Result<C>
where
    C: Default + Serialize + DeserializeOwned,
{
    let mut table = toml::Table::try_from(C::default()).map_err(|e| Error::Schema(format!("config defaults: {e}")))?;
    if let Some(text) = file {
        let t: toml::Table = toml::from_str(text).map_err(|e| Error::Schema(format!("config file: {e}")))?;
        merge(&mut table, t);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Schema(format!("config: {e}")))
}
