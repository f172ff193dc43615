//! TOML run configuration. Every key is optional; unknown keys are rejected.
//! Command-line flags override values read from the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skipgru::glove::GloveConfig;
use skipgru::net::VariantConfig;
use skipgru::optim::TrainConfig;
use skipgru::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub sessions: Option<PathBuf>,
    pub tracks: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Training {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub threshold: f64,
    pub task_weights: [f64; 4],
    /// Trailing fraction of the training file held out for model selection.
    pub valid_fraction: f64,
}

impl Default for Training {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.lr,
            seed: t.seed,
            clip_norm: t.clip_norm,
            threshold: t.threshold,
            task_weights: t.task_weights,
            valid_fraction: 0.1,
        }
    }
}

impl Training {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            seed: self.seed,
            clip_norm: self.clip_norm,
            threshold: self.threshold,
            task_weights: self.task_weights,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: VariantConfig,
    pub training: Training,
    pub glove: GloveConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                Self::parse(&text, p)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse(
            r#"
            [paths]
            sessions = "data/sessions.csv"
            [model]
            activation = "elu"
            hidden_size = 64
            [training]
            epochs = 3
            valid_fraction = 0.2
            [glove]
            dims = 32
            "#,
            Path::new("run.toml"),
        )
        .unwrap();
        assert_eq!(
            c.paths.sessions.as_deref(),
            Some(Path::new("data/sessions.csv"))
        );
        assert_eq!(c.model.hidden_size, 64);
        assert!(!c.model.use_batchnorm);
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.training.lr, 0.0005);
        assert_eq!(c.training.valid_fraction, 0.2);
        assert_eq!(c.glove.dim, 32);
        assert_eq!(c.glove.x_max, 100.0);
        assert_eq!(RunConfig::default().glove.dim, 150);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "[model]\nhiden_size = 3\n",
            "[training]\nlearning_rate = 0.1\n",
            "[other]\n",
        ] {
            assert!(
                RunConfig::parse(text, Path::new("x.toml")).is_err(),
                "{text}"
            );
        }
    }
}
