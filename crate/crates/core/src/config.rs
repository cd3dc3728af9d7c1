//! TOML run configuration.
//!
//! ```toml
//! [codec]
//! preset = "toy"          # or "default"; fields below override it
//! code_depth = 16
//! max_iterations = 4
//!
//! [train]
//! steps = 500
//! batch_size = 4
//! crop_size = 64
//! learning_rate = 2e-4
//! seed = 7
//!
//! [loss]
//! bit_penalty_weight = 0.01
//! forced_pass_weight = 1.0
//! quality_threshold = 4.0
//!
//! [dataset]
//! root = "images"         # omit for the built-in synthetic set
//! synthetic_count = 8
//!
//! [output]
//! dir = "run"
//! ```
//!
//! Relative paths resolve against the config file's directory. The
//! `SCT_OUTPUT_DIR` environment variable overrides `output.dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::layers::ConvSpec;
use crate::net::{CodecConfig, DecoderStage, EncoderStage, GainMode};
use crate::train::{LossConfig, TrainConfig};

pub const OUTPUT_DIR_ENV: &str = "SCT_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Toy,
    Default,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub preset: Preset,
    pub tile_size: Option<usize>,
    pub code_depth: Option<usize>,
    pub max_iterations: Option<usize>,
    pub gain_mode: Option<GainMode>,
    pub encoder: Option<Vec<EncoderStage>>,
    pub decoder_input: Option<ConvSpec>,
    pub decoder: Option<Vec<DecoderStage>>,
}

impl CodecSection {
    pub fn resolve(&self) -> Result<CodecConfig> {
        let mut c = match self.preset {
            Preset::Toy => CodecConfig::toy(),
            Preset::Default => CodecConfig::default(),
        };
        if let Some(v) = self.tile_size {
            c.tile_size = v;
        }
        if let Some(v) = self.code_depth {
            c.code_depth = v;
        }
        if let Some(v) = self.max_iterations {
            c.max_iterations = v;
        }
        if let Some(v) = self.gain_mode {
            c.gain_mode = v;
        }
        if let Some(v) = &self.encoder {
            c.encoder = v.clone();
        }
        if let Some(v) = self.decoder_input {
            c.decoder_input = v;
        }
        if let Some(v) = &self.decoder {
            c.decoder = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub codec: CodecSection,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub dataset: DatasetSpec,
    pub output: OutputSection,
}

/// A validated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub codec: CodecConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub dataset: DatasetSpec,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Parses and validates TOML text. `base` anchors relative paths.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let codec = file.codec.resolve()?;
        file.train.validate(&codec)?;
        file.loss.validate()?;
        let mut dataset = file.dataset;
        if let Some(root) = &dataset.root {
            if root.is_relative() {
                dataset.root = Some(base.join(root));
            }
        }
        let output_dir = match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) => PathBuf::from(dir),
            None => {
                let dir = file.output.dir.unwrap_or_else(|| PathBuf::from("sct-run"));
                if dir.is_relative() {
                    base.join(dir)
                } else {
                    dir
                }
            }
        };
        Ok(RunConfig {
            codec,
            train: file.train,
            loss: file.loss,
            dataset,
            output_dir,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }
}
