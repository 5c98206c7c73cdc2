//! Resolution of `--config`: a preset name or a TOML file.
//!
//! ```toml
//! preset = "toy"        # tiny | toy | desk | full (default desk)
//!
//! [model]               # overrides on the preset's model config
//! channels = 32
//!
//! [train]               # overrides on the preset's training regimen
//! lr = 1e-3
//! data.partial_size = 128
//! ```

use std::path::Path;

use revnet::training::{DataSpec, TrainConfig};
use revnet::ModelConfig;
use toml::{Table, Value};

pub const DEFAULT_PRESET: &str = "desk";

#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Model and training presets sharing a name.
pub fn preset(name: &str) -> Option<Resolved> {
    let model = ModelConfig::preset(name)?;
    let train = match name {
        "tiny" | "toy" => TrainConfig::toy(),
        "full" => TrainConfig { data: DataSpec::new(2048, 8192), ..TrainConfig::desk() },
        _ => TrainConfig::desk(),
    };
    Some(Resolved { model, train })
}

pub fn resolve(arg: Option<&str>) -> Result<Resolved, String> {
    let arg = arg.unwrap_or(DEFAULT_PRESET);
    if let Some(r) = preset(arg) {
        return Ok(r);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(format!("--config {arg:?} is neither a preset (tiny, toy, desk, full) nor an existing file"));
    }
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn from_toml(text: &str) -> Result<Resolved, String> {
    let mut file: Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let name = match file.remove("preset") {
        None => DEFAULT_PRESET.to_string(),
        Some(Value::String(s)) => s,
        Some(other) => return Err(format!("preset must be a string, got {other}")),
    };
    let base = preset(&name).ok_or_else(|| format!("unknown preset {name:?}"))?;
    let model_over = section(&mut file, "model")?;
    let train_over = section(&mut file, "train")?;
    if let Some(key) = file.keys().next() {
        return Err(format!("unknown top-level key {key:?}"));
    }
    let model: ModelConfig = overlay(&base.model, model_over).map_err(|e| format!("[model]: {e}"))?;
    let train: TrainConfig = overlay(&base.train, train_over).map_err(|e| format!("[train]: {e}"))?;
    model.validate().map_err(|e| e.to_string())?;
    train.validate().map_err(|e| e.to_string())?;
    Ok(Resolved { model, train })
}

fn section(file: &mut Table, key: &str) -> Result<Table, String> {
    match file.remove(key) {
        None => Ok(Table::new()),
        Some(Value::Table(t)) => Ok(t),
        Some(_) => Err(format!("[{key}] must be a table")),
    }
}

fn overlay<T>(base: &T, over: Table) -> Result<T, String>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut value = Value::try_from(base).map_err(|e| e.to_string())?;
    merge(&mut value, Value::Table(over), "")?;
    value.try_into().map_err(|e: toml::de::Error| e.to_string())
}

fn merge(into: &mut Value, from: Value, at: &str) -> Result<(), String> {
    match (into, from) {
        (Value::Table(dst), Value::Table(src)) => {
            for (k, v) in src {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match dst.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(format!("unknown key {path:?}")),
                }
            }
            Ok(())
        }
        (slot, v) => {
            // Integers are accepted where the base holds a float.
            *slot = match (&*slot, v) {
                (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
                (_, v) => v,
            };
            Ok(())
        }
    }
}
