//! JSON training configs: partial files merged over the defaults, then
//! `key.path=value` overrides. Unknown keys are errors.

use std::fs;
use std::path::Path;

use plr_core::trainer::TrainConfig;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{io_err, ReidError, Result};

fn merge(base: &mut Value, patch: &Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| ReidError::Config(format!("unknown key {here}")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON when it
/// can be (numbers, booleans, arrays), as a bare string otherwise.
pub fn apply_override(cfg: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ReidError::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut slot = &mut *cfg;
    for part in key.trim().split('.') {
        slot = match slot {
            Value::Object(m) => m.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| ReidError::Config(format!("unknown key {key}")))?;
    }
    *slot = value;
    Ok(())
}

/// Reads a config file (if any) over the defaults and applies overrides.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(TrainConfig::default())?;
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(io_err(p))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| ReidError::Config(format!("{}: {e}", p.display())))?;
        merge(&mut v, &patch, "")?;
    }
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    let cfg: TrainConfig = serde_json::from_value(v).map_err(|e| ReidError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// SHA-256 of the config's JSON form, hex encoded.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}
