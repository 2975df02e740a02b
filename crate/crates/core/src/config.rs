//! Run configuration. Every field is serialized; unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DistortionDefaults;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::EncoderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    Desk,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scale> {
        match s {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            _ => Err(Error::InvalidArgument(format!("unknown scale `{s}` (expected full or desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub encoder: EncoderConfig,
    pub blocks: usize,
    pub patch_fine: usize,
    pub patch_coarse: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    pub fine_size: usize,
    pub coarse_size: usize,
    pub base_channels: usize,
    pub coarse_res_blocks: usize,
    pub fine_res_blocks: usize,
    pub vt: DiscriminatorConfig,
}

impl GanConfig {
    pub fn full() -> GanConfig {
        GanConfig {
            fine_size: 512,
            coarse_size: 256,
            base_channels: 64,
            coarse_res_blocks: 9,
            fine_res_blocks: 3,
            vt: DiscriminatorConfig {
                encoder: EncoderConfig {
                    dim: 64,
                    heads: 4,
                    mlp: vec![128, 64],
                    dropout: 0.1,
                },
                blocks: 8,
                patch_fine: 64,
                patch_coarse: 32,
            },
        }
    }

    pub fn desk() -> GanConfig {
        GanConfig {
            fine_size: 64,
            coarse_size: 32,
            base_channels: 16,
            coarse_res_blocks: 9,
            fine_res_blocks: 3,
            vt: DiscriminatorConfig {
                encoder: EncoderConfig {
                    dim: 16,
                    heads: 4,
                    mlp: vec![32, 16],
                    dropout: 0.1,
                },
                blocks: 8,
                patch_fine: 8,
                patch_coarse: 4,
            },
        }
    }

    pub fn for_scale(scale: Scale) -> GanConfig {
        match scale {
            Scale::Full => GanConfig::full(),
            Scale::Desk => GanConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.coarse_size * 2 != self.fine_size {
            return bad(format!("coarse size {} must be half of fine size {}", self.coarse_size, self.fine_size));
        }
        if self.coarse_size % 4 != 0 {
            return bad(format!("coarse size {} must be divisible by 4", self.coarse_size));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.fine_size % self.vt.patch_fine != 0 || self.coarse_size % self.vt.patch_coarse != 0 {
            return bad("image sizes must be divisible by the patch sizes".into());
        }
        if (self.fine_size / self.vt.patch_fine) != (self.coarse_size / self.vt.patch_coarse) {
            return bad("both discriminators must see the same number of patches".into());
        }
        self.vt.encoder.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub d_steps_per_g_step: usize,
    /// Save a checkpoint every this many epochs (0 disables periodic saves).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 2,
            epochs: 200,
            d_steps_per_g_step: 2,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.beta1, self.beta2, self.eps].iter().all(|v| *v > 0.0);
        if !positive || self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::InvalidArgument("optimizer constants out of range".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.d_steps_per_g_step == 0 {
            return Err(Error::InvalidArgument("batch_size, epochs and d_steps_per_g_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    /// Weight file of a perceptual/evaluation feature extractor; the seeded
    /// random extractor is used when absent.
    pub extractor: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scale: Scale,
    pub seed: u64,
    pub gan: GanConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub distortion: DistortionDefaults,
    pub paths: Paths,
}

impl RunConfig {
    pub fn for_scale(scale: Scale) -> RunConfig {
        RunConfig {
            scale,
            seed: 0,
            gan: GanConfig::for_scale(scale),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            distortion: DistortionDefaults::default(),
            paths: Paths::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gan.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.distortion.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}
