//! Run configuration: a JSON file layered over built-in defaults, with
//! `--set dotted.key=value` overrides on top. Every command that consumes
//! one writes the fully resolved form next to its outputs, so a run is
//! replayable from that file alone.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use slak_core::model::ModelConfig;
use slak_core::trainer::{SyntheticTask, TrainConfig};
use slak_core::{Result, SlakError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: SyntheticTask,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::micro(),
            train: TrainConfig::desk(2000),
            task: SyntheticTask::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()
    }
}

fn bad(reason: impl Into<String>) -> SlakError {
    SlakError::invalid_config("config", reason)
}

/// Resolution order: defaults, then `seed_fallback` (the SLAK_SEED
/// environment variable), then the file, then `--set` pairs. The fallback
/// only survives when the file does not name a seed itself.
pub fn load_run_config(
    path: Option<&Path>,
    overrides: &[String],
    seed_fallback: Option<u64>,
) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(seed) = seed_fallback {
        value["train"]["seed"] = seed.into();
    }
    if let Some(p) = path {
        let text = fs::read_to_string(p)
            .map_err(|e| bad(format!("{}: {e}", p.display())))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", p.display())))?;
        merge(&mut value, file, "")?;
    }
    for pair in overrides {
        apply_set(&mut value, pair)?;
    }
    let run: RunConfig = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    run.validate()?;
    Ok(run)
}

/// Deep-merges `incoming` into `base`, rejecting keys the schema does not
/// have so typos surface as diagnostics instead of silently ignored fields.
fn merge(base: &mut Value, incoming: Value, at: &str) -> Result<()> {
    let (Value::Object(b), Value::Object(inc)) = (&mut *base, incoming) else {
        return Err(bad(format!("`{}` must be a JSON object", if at.is_empty() { "<top level>" } else { at })));
    };
    for (k, v) in inc {
        let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
        match b.get_mut(&k) {
            Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &here)?,
            Some(slot) => *slot = v,
            None => return Err(bad(format!("unknown field `{here}`"))),
        }
    }
    Ok(())
}

/// `dotted.key=value`; the value is parsed as JSON when possible and kept
/// as a string otherwise, so `--set train.batch=32` and
/// `--set model.dw_variant=full` both work. Array elements are addressed
/// by index: `model.stage_dims.0=48`.
pub fn apply_set(value: &mut Value, pair: &str) -> Result<()> {
    let Some((key, raw)) = pair.split_once('=') else {
        return Err(bad(format!("`--set {pair}` is not KEY=VALUE")));
    };
    let parsed: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = value;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| bad(format!("unknown key `{key}`")))?,
            Value::Array(arr) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| bad(format!("`{part}` is not an array index in `{key}`")))?;
                arr.get_mut(idx)
                    .ok_or_else(|| bad(format!("index {idx} out of bounds in `{key}`")))?
            }
            _ => return Err(bad(format!("`{key}` does not address a field"))),
        };
    }
    *slot = parsed;
    Ok(())
}
