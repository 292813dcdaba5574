//! The TOML run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tealeaf_core::adversarial::AdversarialConfig;
use tealeaf_core::dataset::SplitRatios;
use tealeaf_core::explainers::OcclusionConfig;
use tealeaf_core::models::{ArchitectureId, BuildOptions, ModelScale};
use tealeaf_core::preprocess::{AugmentConfig, PreprocessConfig};
use tealeaf_core::trainer::TrainConfig;
use tealeaf_service::{DEFAULT_MAX_PAYLOAD, DEFAULT_OVERLAY_ALPHA};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    pub architecture: ArchitectureId,
    /// Copied into the split, model initialisation, shuffling and augmentation.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub adversarial: AdversarialConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub explain: ExplainSection,
    #[serde(default)]
    pub serve: ServeSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub scale: ModelScale,
    pub pretrained: bool,
    pub weights_dir: Option<PathBuf>,
    pub freeze_backbone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub oversample: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        let r = SplitRatios::default();
        SplitSection {
            train: r.train,
            val: r.val,
            test: r.test,
            oversample: true,
        }
    }
}

impl SplitSection {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExplainMethod {
    GradCam,
    Occlusion,
    #[default]
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    pub method: ExplainMethod,
    pub overlay_alpha: f32,
    pub occlusion: OcclusionConfig,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            method: ExplainMethod::Both,
            overlay_alpha: DEFAULT_OVERLAY_ALPHA,
            occlusion: OcclusionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub host: String,
    pub port: u16,
    pub max_payload_bytes: usize,
    pub overlay_alpha: f32,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection {
            host: "127.0.0.1".into(),
            port: 8080,
            max_payload_bytes: DEFAULT_MAX_PAYLOAD,
            overlay_alpha: DEFAULT_OVERLAY_ALPHA,
        }
    }
}

fn prefixed(section: &str, e: tealeaf_core::Error) -> CliError {
    match e {
        tealeaf_core::Error::InvalidConfig { key, reason } => {
            let key = if key.starts_with(&format!("{section}.")) {
                key
            } else {
                format!("{section}.{key}")
            };
            CliError::Config { key, reason }
        }
        other => other.into(),
    }
}

fn check_alpha(key: &str, alpha: f32) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(CliError::Config {
            key: key.into(),
            reason: "must lie in [0, 1]".into(),
        })
    }
}

impl RunConfig {
    /// Preset for one architecture with its training hyperparameters.
    pub fn preset(architecture: ArchitectureId) -> Self {
        RunConfig {
            dataset_root: PathBuf::from("data/teaLeafBD"),
            output_dir: PathBuf::from(format!("runs/{architecture}")),
            architecture,
            seed: 42,
            model: ModelSection {
                pretrained: true,
                ..ModelSection::default()
            },
            split: SplitSection::default(),
            train: TrainConfig::for_architecture(architecture),
            adversarial: AdversarialConfig::default(),
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
            explain: ExplainSection::default(),
            serve: ServeSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::ConfigParse(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::ConfigParse(m) => CliError::ConfigParse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }

    /// Propagates the top-level seed and checks every section.
    pub fn finalize(mut self) -> Result<Self, CliError> {
        self.train.seed = self.seed;
        self.augment.seed = self.seed;
        self.train.validate().map_err(|e| prefixed("train", e))?;
        self.adversarial.validate().map_err(|e| prefixed("adversarial", e))?;
        self.preprocess.validate().map_err(|e| prefixed("preprocess", e))?;
        self.augment.validate().map_err(|e| prefixed("augment", e))?;
        self.split.ratios().validate().map_err(|e| match e {
            tealeaf_core::Error::RatioSumInvalid(s) => CliError::Config {
                key: "split".into(),
                reason: format!("ratios must sum to 1, got {s}"),
            },
            other => prefixed("split", other),
        })?;
        let side = self.preprocess.height.min(self.preprocess.width);
        self.explain
            .occlusion
            .validate_for(self.preprocess.height, self.preprocess.width)
            .map_err(|e| match e {
                tealeaf_core::Error::PatchLargerThanImage { patch, .. } => CliError::Config {
                    key: "explain.occlusion.patch_size".into(),
                    reason: format!("{patch} exceeds the {side}-pixel input"),
                },
                other => prefixed("explain.occlusion", other),
            })?;
        check_alpha("explain.overlay_alpha", self.explain.overlay_alpha)?;
        check_alpha("serve.overlay_alpha", self.serve.overlay_alpha)?;
        if self.serve.max_payload_bytes == 0 {
            return Err(CliError::Config {
                key: "serve.max_payload_bytes".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(self)
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            scale: self.model.scale,
            preprocess: self.preprocess.clone(),
            seed: self.seed,
            pretrained: self.model.pretrained,
            weights_dir: self.model.weights_dir.clone(),
            freeze_backbone: self.model.freeze_backbone,
        }
    }
}
