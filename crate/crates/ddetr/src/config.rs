//! Run configuration: a TOML file with `[model]`, `[data]`, and `[train]`
//! sections, each falling back to defaults when omitted.

use crate::data::SceneConfig;
use crate::train::TrainConfig;
use crate::transformer::ModelConfig;
use crate::{DdError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub fn default_model_config() -> ModelConfig {
    ModelConfig::default()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SceneConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: default_model_config(),
            data: SceneConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| DdError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        // The stem always runs to stride 32; the extra level when L = 4
        // doubles it once more.
        let mut stride = 32usize;
        if self.model.levels == 4 {
            stride *= 2;
        }
        if !self.data.image_size.is_multiple_of(stride) {
            return Err(DdError::Config(format!(
                "image size {} not divisible by total stride {stride} of a {}-level pyramid",
                self.data.image_size, self.model.levels
            )));
        }
        if self.model.n_queries < self.data.max_objects {
            return Err(DdError::InfeasibleSpec(format!(
                "{} queries cannot cover up to {} objects",
                self.model.n_queries, self.data.max_objects
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{AttnKind, Mode};

    #[test]
    fn empty_toml_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.model.channels, 32);
        assert_eq!(cfg.data.image_size, 64);
        assert_eq!(cfg.train.epochs, 40);
    }

    #[test]
    fn sections_override_selected_fields() {
        let cfg = RunConfig::from_toml_str(
            r#"
            [model]
            channels = 16
            heads = 4
            levels = 2
            mode = "two_stage"
            attn = "dense"

            [data]
            image_size = 32
            n_images = 12

            [train]
            lr = 0.002
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.channels, 16);
        assert_eq!(cfg.model.mode, Mode::TwoStage);
        assert_eq!(cfg.model.attn, AttnKind::Dense);
        assert_eq!(cfg.data.n_images, 12);
        assert_eq!(cfg.train.lr, 0.002);
        // untouched defaults survive
        assert_eq!(cfg.model.points, 4);
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn invalid_configs_rejected() {
        // image size not divisible by the pyramid stride
        assert!(RunConfig::from_toml_str("[data]\nimage_size = 60\n").is_err());
        // fewer queries than objects
        assert!(
            RunConfig::from_toml_str("[model]\nn_queries = 2\n[data]\nmax_objects = 4\n").is_err()
        );
        // bad enum value
        assert!(RunConfig::from_toml_str("[model]\nmode = \"banana\"\n").is_err());
        // channels not divisible by heads
        assert!(RunConfig::from_toml_str("[model]\nchannels = 30\n").is_err());
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let s = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(back.model.channels, cfg.model.channels);
        assert_eq!(back.train.grad_clip, cfg.train.grad_clip);
    }
}
