use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cats_core::distill::{CorpusConfig, LossConfig, TrainConfig};
use cats_core::error::{Error, Result};
use cats_core::sweep::SweepSpec;
use cats_core::{EngineConfig, MemoryConfig, ModelConfig};
use serde::{Deserialize, Serialize};

/// Contents of a `--config` TOML file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub engine: EngineConfig,
    pub memory: MemoryConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub sweep: SweepSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        toml::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings of one invocation, written next to its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub config_path: Option<PathBuf>,
    pub model: ModelConfig,
    pub engine: EngineConfig,
    pub memory: MemoryConfig,
    pub loss: LossConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<&'a SweepSpec>,
    pub seed: u64,
    pub outputs: Vec<PathBuf>,
    pub created_unix_seconds: u64,
}

impl RunManifest<'_> {
    pub fn timestamp() -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
    }

    /// Writes `<output>.manifest.json`.
    pub fn write_next_to(&self, output: &Path) -> Result<PathBuf> {
        let mut name = output.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        std::fs::write(&path, json + "\n").map_err(|source| Error::Io { path: path.clone(), source })?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse_and_default() {
        let c: RunConfig = toml::from_str(
            r#"
            [model]
            n_layers = 6
            l_dm = 1
            l_sv = 3
            [engine]
            mode = "two-stage"
            gamma = 3
            policy = { kind = "typical", epsilon = 0.3, alpha = 0.09, temperature = 0.7 }
            [memory]
            dram_budget = 1000000
            [loss]
            k = 8
            "#,
        )
        .unwrap();
        assert_eq!(c.model.n_layers, 6);
        assert_eq!(c.model.d_model, ModelConfig::default().d_model);
        assert_eq!(c.engine.gamma, 3);
        assert_eq!(c.memory.dram_budget, 1_000_000);
        assert_eq!(c.loss.k, 8);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[engine]\ngama = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[nonsense]\n").is_err());
    }
}
