//! A small vision transformer written from scratch: pre-norm blocks,
//! learned positional embeddings, a CLS token, and a linear head. The
//! forward pass is instrumented to expose last-layer token embeddings
//! and last-block per-head keys, and accepts any non-empty subset of
//! patch tokens so tokens can be dropped after the positional embedding.

mod checkpoint;
mod gradcheck;
pub(crate) mod kernels;
mod layout;
mod model;
mod optim;
mod record;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use gradcheck::{finite_difference, grad_check, GradCheckReport};
pub use layout::{ParamLayout, ParamSpec, Slot};
pub use model::{EmbeddedTokens, TokenOutput, ViTModel};
pub use optim::AdamW;
pub use record::{export_activations, ActivationRecord, ActivationSet};
pub use train::{train, TrainHyper, TrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            embed_dim: 32,
            heads: 4,
            blocks: 2,
            mlp_ratio: 2,
            classes: 2,
            seed: 0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return Err(Error::invalid("blocks, mlp_ratio and channels must be positive"));
        }
        if self.classes != 2 {
            return Err(Error::invalid("only binary classification is supported"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens (CLS excluded).
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}
