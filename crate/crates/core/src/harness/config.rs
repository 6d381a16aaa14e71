use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clip::ContrastiveConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::lm::DecodeConfig;
use crate::numerics::OptimizerKind;
use crate::recon::{ReconConfig, SdfTrainConfig};
use crate::tta::TtaConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// CLIP embedding of the raw image only.
    Baseline,
    /// Blend of the raw-image and reconstruction embeddings.
    Fused,
    /// The rendered reconstruction is the only image the model sees.
    ReconDescribe,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(EvalMode::Baseline),
            "fused" => Ok(EvalMode::Fused),
            "recon-describe" => Ok(EvalMode::ReconDescribe),
            _ => Err(Error::Config(format!("unknown eval mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// Grid resolution used when reconstructing test images.
    pub grid_resolution: usize,
    /// Accept an instruction-1 answer that merely contains the class name.
    pub substring_match: bool,
    /// Evaluate only the first this-many test records.
    pub max_samples: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Fused,
            grid_resolution: 32,
            substring_match: false,
            max_samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    /// Where checkpoints, traces and reports go.
    pub out_dir: PathBuf,
    pub stages: BTreeSet<u8>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub clip: ContrastiveConfig,
    pub recon: ReconConfig,
    pub sdf_train: SdfTrainConfig,
    pub fusion: FusionConfig,
    pub decode: DecodeConfig,
    pub tta: TtaConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_dir: PathBuf::from("data/train"),
            test_dir: PathBuf::from("data/test"),
            out_dir: PathBuf::from("runs/default"),
            stages: [1, 2, 3].into_iter().collect(),
            batch_size: 16,
            learning_rate: 0.00002,
            weight_decay: 0.0,
            optimizer: OptimizerKind::Sgd,
            epochs: 1,
            clip: ContrastiveConfig::default(),
            recon: ReconConfig::default(),
            sdf_train: SdfTrainConfig::default(),
            fusion: FusionConfig::default(),
            decode: DecodeConfig::default(),
            tta: TtaConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.stages.iter().find(|s| !(1..=3).contains(*s)) {
            return Err(Error::Config(format!("unknown stage {s}")));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
        }
        self.fusion.validate()?;
        self.tta.validate()?;
        if self.decode.beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}
