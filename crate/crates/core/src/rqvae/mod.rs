//! Trajectory autoencoder with a residual-quantized bottleneck.
//!
//! The encoder halves the sequence three times, recording whether each
//! length was odd so the decoder can restore the exact original length. The
//! latent sequence is projected to `d_q` channels and quantized greedily by
//! `L` codebooks of increasing size, each level coding the residual left by
//! the previous ones. The decoder upsamples the summed codewords back to `n`
//! points while cross-attending to an encoding of the route, and predicts the
//! per-point relative-percent and offset labels.

mod model;
mod quantizer;
mod train;

pub use model::{
    full_path_gradcheck, toy_config, FrozenQuant, LossBreakdown, Prediction, RoadFeatures, RqVae, SampleRef,
    StepOutput,
};
pub use quantizer::{residual_quantize, vq_lookup, PatternCode, Quantized, RqCodebooks};
pub use train::{train, EpochMetrics, TrainConfig, TrainSample};

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::NnError;

/// Number of 2× downsampling steps.
pub const DOWNSAMPLE_STEPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RqError {
    #[error("sequence of {n} points is too short (need at least {min})")]
    TooShort { n: usize, min: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("length mismatch: parity {parity:?} with {m} codes gives {got} points, expected {expected}")]
    Length {
        m: usize,
        parity: [u8; 3],
        got: usize,
        expected: usize,
    },
    #[error("code index {index} out of range for level {level} of size {size}")]
    CodeRange { level: usize, index: usize, size: usize },
    #[error("unknown road segment {0}")]
    UnknownSegment(usize),
    #[error("non-finite loss or gradient at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Odd/even record of the three downsampling steps, in downsampling order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParityRecord {
    pub bits: [bool; 3],
}

impl ParityRecord {
    pub fn from_ints(bits: [u8; 3]) -> Option<Self> {
        if bits.iter().any(|&b| b > 1) {
            return None;
        }
        Some(Self {
            bits: [bits[0] == 1, bits[1] == 1, bits[2] == 1],
        })
    }

    pub fn to_ints(self) -> [u8; 3] {
        [self.bits[0] as u8, self.bits[1] as u8, self.bits[2] as u8]
    }
}

/// Applies `l ← ceil(l/2)` three times, recording `l mod 2` before each.
pub fn downsample_len(n: usize) -> Result<(usize, ParityRecord), RqError> {
    if n < 8 {
        return Err(RqError::TooShort { n, min: 8 });
    }
    let mut l = n;
    let mut bits = [false; 3];
    for b in &mut bits {
        *b = l % 2 == 1;
        l = l.div_ceil(2);
    }
    Ok((l, ParityRecord { bits }))
}

/// Inverse of [`downsample_len`]: `l ← 2l − bit` in reverse bit order.
pub fn upsample_len(m: usize, parity: ParityRecord) -> usize {
    stage_lengths(m, parity)[DOWNSAMPLE_STEPS]
}

/// `[m, l1, l2, n]`: the sequence length entering and leaving each decoder
/// stage.
pub fn stage_lengths(m: usize, parity: ParityRecord) -> [usize; 4] {
    let mut out = [m; 4];
    for s in 0..DOWNSAMPLE_STEPS {
        let bit = parity.bits[DOWNSAMPLE_STEPS - 1 - s] as usize;
        out[s + 1] = (2 * out[s]).saturating_sub(bit);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqvaeConfig {
    /// Encoder channel schedule: input embedding width, then the width after
    /// each downsampling block. The last entry is `d_e`.
    pub channels: [usize; 4],
    pub d_q: usize,
    pub head_dim: usize,
    pub codebook_sizes: Vec<usize>,
    pub beta: f64,
    pub road_dim: usize,
    pub road_layers: usize,
    /// Hidden width of the road transformer's feed-forward layers.
    pub road_ff: usize,
    /// Hidden width of the two output heads.
    pub head_hidden: usize,
    /// Number of road segments in the network.
    pub vocab: usize,
    /// Unit of the percent loss: predictions and labels are divided by it
    /// before the squared error, as offsets are by their scale.
    #[serde(default = "unit_scale")]
    pub percent_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl RqvaeConfig {
    pub fn with_vocab(vocab: usize) -> Self {
        Self {
            channels: [64, 128, 128, 256],
            d_q: 64,
            head_dim: 64,
            codebook_sizes: alloc::vec![32, 64, 128, 256],
            beta: 0.25,
            road_dim: 128,
            road_layers: 4,
            road_ff: 256,
            head_hidden: 64,
            vocab,
            percent_scale: 1.0,
        }
    }

    pub fn d(&self) -> usize {
        self.channels[0]
    }

    pub fn d_e(&self) -> usize {
        self.channels[3]
    }

    pub fn levels(&self) -> usize {
        self.codebook_sizes.len()
    }

    pub fn validate(&self) -> Result<(), RqError> {
        let err = |s: &str| Err(RqError::Config(s.into()));
        if self.channels.contains(&0) || self.d_q == 0 || self.road_dim == 0 || self.head_hidden == 0 {
            return err("dimensions must be positive");
        }
        if self.d_q >= self.d_e() {
            return err("d_q must be smaller than d_e");
        }
        if self.head_dim == 0
            || self.channels.iter().any(|c| c % self.head_dim != 0)
            || self.road_dim % self.head_dim != 0
        {
            return err("head_dim must divide every channel width and road_dim");
        }
        if self.codebook_sizes.is_empty() || self.codebook_sizes.contains(&0) {
            return err("codebooks must be non-empty");
        }
        if self.codebook_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return err("codebook sizes must be strictly increasing");
        }
        if !(self.beta >= 0.0) {
            return err("beta must be non-negative");
        }
        if !(self.percent_scale > 0.0) || !self.percent_scale.is_finite() {
            return err("percent_scale must be positive");
        }
        if self.vocab == 0 {
            return err("road vocabulary is empty");
        }
        Ok(())
    }
}
