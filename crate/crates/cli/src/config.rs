//! TOML run configuration.
//!
//! One section per stage. Unknown keys are rejected everywhere. Precedence,
//! lowest to highest: built-in defaults, section values, `[global] seed`
//! (copied into every stage seed), command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use maskpress_core::oracle::synth::SynthCorpusSpec;
use maskpress_core::pipeline::PipelineConfig;
use maskpress_diffumask::{Arch, GridSpec, InferenceConfig, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalSection {
    pub seed: Option<u64>,
    pub verbosity: Option<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub global: GlobalSection,
    pub synth: SynthCorpusSpec,
    pub dataset: PipelineConfig,
    pub model: Arch,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub grid: GridSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Missing(format!("config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?
            }
        };
        if let Some(seed) = cfg.global.seed {
            cfg.synth.seed = seed;
            cfg.dataset.seed = seed;
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse_and_global_seed_applies() {
        let cfg: RunConfig = toml::from_str(
            r#"
            [global]
            seed = 9
            [synth]
            n_prompts = 3
            [dataset.shots]
            strategy = "variable_k"
            mean_target = 2.5
            [train]
            epochs = 2
            [train.optimizer]
            kind = "adam"
            beta1 = 0.9
            beta2 = 0.999
            eps = 1e-8
            [grid]
            top_k_values = [1, 2]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.synth.n_prompts, 3);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.grid.top_k_values, vec![1, 2]);
        assert_eq!(cfg.model, Arch::toy());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[nonsense]\n").is_err());
        assert!(toml::from_str::<RunConfig>("[model]\nwidth = 3\n").is_err());
    }
}
