//! Run configuration for `train`: a JSON file, then `LIVERCBIR_` environment
//! overrides, then command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use ctcbir_core::ssl::{EncoderSpec, HeadSpec, LossMode, ModelSpec, TrainConfig};
use ctcbir_core::{Error, Result};

pub const ENV_PREFIX: &str = "LIVERCBIR_";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
    pub loss_mode: LossMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// The model input always matches the augmentation output size.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            encoder: self.model.encoder.clone(),
            head: self.model.head.clone(),
            input_size: self.train.augment.out_size,
            loss_mode: self.model.loss_mode,
        }
    }

    /// Reads `file` (when given) and applies environment overrides.
    pub fn load(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::invalid(format!("config {}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        apply_env(&mut value, env)?;
        serde_json::from_value(value).map_err(|e| Error::invalid(format!("run config: {e}")))
    }
}

/// `LIVERCBIR_TRAIN__BATCH_SIZE=16` sets `train.batch_size`; `__` separates
/// nesting levels. Values are parsed as JSON and fall back to a plain string.
/// Only variables whose first segment names a top-level key are used, so the
/// per-flag variables of other subcommands pass through untouched.
pub fn apply_env(value: &mut Value, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_ascii_lowercase(), v)))
        .filter(|(k, _)| k.contains("__"))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<&str> = key.split("__").collect();
        let root = value.as_object().map(|o| o.contains_key(path[0])).unwrap_or(false);
        if !root {
            continue;
        }
        let parsed = serde_json::from_str(&raw).unwrap_or(Value::String(raw.clone()));
        set_path(value, &path, parsed)
            .map_err(|_| Error::invalid(format!("{ENV_PREFIX}{}: no such config key", key.to_ascii_uppercase())))?;
    }
    Ok(())
}

fn set_path(value: &mut Value, path: &[&str], new: Value) -> std::result::Result<(), ()> {
    let (last, parents) = path.split_last().ok_or(())?;
    let mut cur = value;
    for p in parents {
        cur = cur.get_mut(*p).ok_or(())?;
    }
    let obj = cur.as_object_mut().ok_or(())?;
    if !obj.contains_key(*last) {
        // Optional fields are omitted when unset; anything else is a typo.
        if !matches!(*last, "lr" | "pred_hidden") {
            return Err(());
        }
    }
    obj.insert(last.to_string(), new);
    Ok(())
}
