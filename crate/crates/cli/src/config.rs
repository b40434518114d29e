use std::path::Path;

use anyhow::{Context, Result};
use audioreason::eval::MatcherRegistry;
use audioreason::orchestrator::PipelineConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub workers: usize,
    pub matcher: String,
    /// Ask the text model to map unmatched answers onto a letter.
    pub normalize: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            workers: 4,
            matcher: MatcherRegistry::DEFAULT.into(),
            normalize: true,
        }
    }
}

/// The TOML config file: pipeline settings at top level, harness settings under `[eval]`.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct FileConfig {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }
}
