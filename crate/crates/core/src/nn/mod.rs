//! Layers and composite blocks. A block only records parameter paths and
//! hyperparameters; the values live in a [`ParameterStore`] so that whole
//! networks can be frozen, saved and restored by path prefix.

mod attention;
mod blocks;
mod layers;

pub use attention::{EncoderBlock, EncoderConfig, MultiHeadAttention};
pub use blocks::{Cbl, Downsample, ResidualBlock, SepConvBn, Sff, Upsample};
pub use layers::{BatchNorm, Conv, Dense, LayerNorm, SeparableConv, TransposedConv};

use crate::tensor::DropoutKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call forward context: batch-norm statistics source and dropout keys.
#[derive(Debug, Clone, Copy)]
pub struct Ctx {
    pub mode: Mode,
    pub seed: u64,
    pub step: u64,
}

impl Ctx {
    pub fn train(seed: u64, step: u64) -> Ctx {
        Ctx {
            mode: Mode::Train,
            seed,
            step,
        }
    }

    pub fn eval() -> Ctx {
        Ctx {
            mode: Mode::Eval,
            seed: 0,
            step: 0,
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Dropout is active only in training mode.
    pub fn dropout_key(&self, path: &str) -> Option<DropoutKey> {
        self.is_train().then(|| DropoutKey {
            seed: self.seed,
            layer: path_id(path),
            step: self.step,
        })
    }
}

/// Stable 64-bit FNV-1a hash of a parameter path.
pub fn path_id(path: &str) -> u64 {
    path.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
