//! Layered configuration: built-in defaults, then a flat `key = value` file,
//! then command-line flags.
//!
//! Keys are the field names of [`SynthConfig`], [`NetConfig`] and
//! [`TrainConfig`] (loss weights are `lambda_c`, `lambda_s`, `lambda_p`). A key
//! may carry a `synth.`, `net.` or `train.` prefix; `seed` applies to both
//! synthesis and training. Values are read as JSON where possible, otherwise
//! as bare strings, so `guide = value` and `width_schedule = [16, 32, 32, 16]`
//! both work.

use std::collections::BTreeSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use unir_core::network::NetConfig;
use unir_core::synthesis::SynthConfig;
use unir_core::training::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub synth: SynthConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub threads: usize,
    /// Keys set by the config file or a flag.
    pub explicit: BTreeSet<String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            threads: 1,
            explicit: BTreeSet::new(),
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("configs serialise to JSON")
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `key` in `obj` and checks the result still deserialises as `T`.
fn set_field<T: DeserializeOwned>(
    obj: &mut Value,
    key: &str,
    value: &Value,
) -> Result<Option<T>, String> {
    let Some(slot) = obj.get_mut(key) else {
        return Ok(None);
    };
    let old = std::mem::replace(slot, value.clone());
    match serde_json::from_value::<T>(obj.clone()) {
        Ok(parsed) => Ok(Some(parsed)),
        Err(e) => {
            obj[key] = old;
            Err(e.to_string())
        }
    }
}

impl Settings {
    /// Applies one `key = value` pair.
    pub fn apply(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
        let bad = |msg: String| CliError::Input(format!("config key {key}: {msg}"));
        let value = parse_value(raw.trim());
        let (scope, name) = match key.split_once('.') {
            Some((s, n)) => (Some(s), n),
            None => (None, key),
        };
        let wants = |s: &str| scope.is_none() || scope == Some(s);
        let mut hit = false;

        if name == "threads" && scope.is_none() {
            self.threads = serde_json::from_value(value.clone()).map_err(|e| bad(e.to_string()))?;
            hit = true;
        }
        if wants("synth") {
            let mut obj = to_value(&self.synth);
            if let Some(cfg) = set_field(&mut obj, name, &value).map_err(bad)? {
                self.synth = cfg;
                hit = true;
            }
        }
        if wants("net") {
            let mut obj = to_value(&self.net);
            if let Some(cfg) = set_field(&mut obj, name, &value).map_err(bad)? {
                self.net = cfg;
                hit = true;
            }
        }
        if wants("train") {
            let mut obj = to_value(&self.train);
            if let Some(cfg) = set_field::<TrainConfig>(&mut obj, name, &value).map_err(bad)? {
                self.train = cfg;
                hit = true;
            } else if name != "loss" {
                let mut loss = to_value(&self.train.loss);
                if let Some(w) = set_field(&mut loss, name, &value).map_err(bad)? {
                    self.train.loss = w;
                    hit = true;
                }
            }
        }
        if !hit {
            return Err(CliError::Input(format!("unknown config key {key}")));
        }
        self.explicit.insert(name.to_string());
        Ok(())
    }

    /// Applies every assignment in a config file. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Input(format!(
                    "{origin}:{}: expected key = value",
                    i + 1
                )));
            };
            self.apply(key.trim(), value)
                .map_err(|e| CliError::Input(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn build(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut s = Self::default();
        if let Some(path) = file {
            s.apply_file(path)?;
        }
        for (k, v) in overrides {
            s.apply(k, v)?;
        }
        Ok(s)
    }
}
