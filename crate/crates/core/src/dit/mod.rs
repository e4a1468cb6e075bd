//! Toy diffusion transformer over 4×4 pixel patches.
//!
//! Each canvas patch becomes one token whose input features are the noisy
//! patch, the condition patch and the inpaint-mask patch, concatenated
//! channel-wise. Learned prompt tokens stand in for the text stream and sit
//! in front of the image tokens, so the joint sequence is `[T | G | P | F]`.
//! Blocks are pre-norm attention + MLP with adaLN modulation from a timestep
//! embedding. The network predicts the rectified-flow velocity `ε − x`.
//!
//! Forward and backward passes are written by hand over [`crate::tensor`]
//! and are generic over `f32` (training) and `f64` (gradient checking).

mod checkpoint;
mod flow;
mod model;
mod params;
mod patch;
mod sampler;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, OptimizerMoments, TensorInfo, FORMAT_VERSION,
};
pub use flow::{flow_pair, FlowSample};
pub use model::{backward, forward, forward_train, AttentionRecord, FocusTarget, KeyBlock, ModelInput, Tape};
pub use params::{ParamEntry, Parameters};
pub use patch::{patchify, patchify_mask, unpatchify};
pub use sampler::{euler_integrate, euler_sample, DEFAULT_STEPS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panels::PanelLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub time_dim: usize,
    pub layout: PanelLayout,
    /// Add the fixed 2-D sinusoidal position code to image tokens.
    pub positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            layers: 6,
            mlp_ratio: 4,
            time_dim: 128,
            layout: PanelLayout::default(),
            positional: true,
        }
    }
}

impl ModelConfig {
    /// Two layers, width 16, on an 8×12 panel: the gradient-check model.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            heads: 2,
            layers: 2,
            mlp_ratio: 2,
            time_dim: 16,
            layout: PanelLayout { height: 8, width: 12, patch: 4, text_tokens: 2 },
            positional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config("d_model must be divisible by 4 for the 2-D position code".into()));
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("layers and mlp_ratio must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be positive and even".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    /// Noisy patch + condition patch + one mask value per pixel.
    pub fn input_channels(&self) -> usize {
        let p = self.layout.patch;
        2 * self.layout.patch_channels() + p * p
    }

    pub fn seq_len(&self) -> usize {
        self.layout.total_keys()
    }
}
