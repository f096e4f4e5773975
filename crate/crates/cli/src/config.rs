use std::path::Path;

use deca_core::model::DecaConfig;
use deca_core::train::TrainConfig;
use deca_core::DecaError;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

/// Environment variable that replaces `train.seed` when set.
pub const SEED_ENV: &str = "DECA_SEED";

/// Everything needed to rebuild and train a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: DecaConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses a config document. A model block that names an RGB variant
    /// without `input_channels` gets three channels.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let bad = |e: serde_json::Error| DecaError::Config(format!("invalid config: {e}"));
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
        if let Some(model) = value.get_mut("model").and_then(|m| m.as_object_mut()) {
            if !model.contains_key("input_channels") {
                if let Some(v) = model.get("variant").cloned() {
                    let variant: deca_core::model::Variant = serde_json::from_value(v).map_err(bad)?;
                    model.insert("input_channels".into(), variant.domain().channels().into());
                }
            }
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(bad)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::error::CliError::io(format!("cannot read config {}", path.display()), e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    /// Applies `DECA_SEED` if present.
    pub fn apply_env(&mut self) -> CliResult<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.train.seed = s.trim().parse().map_err(|_| {
                DecaError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }
}
