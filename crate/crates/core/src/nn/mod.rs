//! A small differentiable-compute substrate.
//!
//! There is no general autodiff graph. Each layer exposes a `forward` that
//! returns whatever its `backward` needs and a `backward` that accumulates
//! parameter gradients into a [`Grads`] buffer and returns the gradient with
//! respect to its input. Models compose layers by hand in the same order in
//! both directions. All arithmetic is `f64`.
//!
//! Sequences are stored as `(len × dim)` row-major [`Tensor2`]s. Rows at or
//! beyond a [`PaddingMask`]'s valid length are padding: layers zero them in
//! the forward pass and ignore them in the backward pass, so padded positions
//! never contribute to a gradient.

mod attention;
pub mod gradcheck;
mod layers;
mod optim;
mod params;
mod tensor;

pub use attention::{AttentionCache, MultiHeadAttention};
pub use layers::{
    cross_entropy_rows, gelu, gelu_backward, mean_pool, mean_pool_backward, mse, sigmoid,
    sinusoidal_position_encoding, Conv1d, Conv1dCache, Embedding, FeedForward, FeedForwardCache,
    LayerNorm, LayerNormCache, Linear, TransformerBlock, TransformerCache,
};
pub use optim::{clip_grad_norm, cosine_lr, AdamW, OptimizerState};
pub use params::{Grads, ParamId, ParamStore, ParamTensor};
pub use tensor::Tensor2;

use alloc::string::String;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("head count {heads} does not divide model dim {dim}")]
    Heads { heads: usize, dim: usize },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

/// Number of leading rows of a sequence that hold data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaddingMask {
    pub valid_len: usize,
}

impl PaddingMask {
    pub fn new(valid_len: usize) -> Self {
        Self { valid_len }
    }

    /// Mask for a full, unpadded tensor.
    pub fn full(t: &Tensor2) -> Self {
        Self { valid_len: t.rows() }
    }

    /// Zeroes every padded row of `t`.
    pub fn apply(&self, t: &mut Tensor2) {
        let cols = t.cols();
        let start = self.valid_len.min(t.rows()) * cols;
        t.data_mut()[start..].fill(0.0);
    }

    /// Valid length after a stride-`stride` same-padded convolution.
    pub fn strided(&self, stride: usize) -> Self {
        Self {
            valid_len: self.valid_len.div_ceil(stride),
        }
    }
}
