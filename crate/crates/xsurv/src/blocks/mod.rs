//! Building blocks of the network: Conv blocks, windowed self-/cross-attention
//! transformers, the hybrid parallel blocks that pair them, the region-specific
//! attention gate, and the two prediction heads.

mod attention;
mod conv_block;
mod heads;
mod hybrid;
mod rag;

pub use attention::{TransformerBlock, WindowAttention, WindowPlan};
pub use conv_block::{Conv3dLayer, ConvBlock, InstanceNorm3d, LayerNormUnit, LinearLayer};
pub use heads::{SegmentationHead, SurvivalHead};
pub use hybrid::{HpcaBlock, HpsaBlock};
pub use rag::{RagBlock, RagOutput, VanillaGate};

use crate::tensor::{Element, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum BlockError {
    #[error("block config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Static configuration of one encoder/decoder stage block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockConfig {
    pub channels_in: usize,
    pub channels_out: usize,
    /// Convolutions per Conv block.
    pub n_conv: usize,
    /// Transformer sub-blocks in the attention path (regular/shifted pairs).
    pub n_trans: usize,
    pub num_heads: usize,
    pub window: [usize; 3],
}

impl BlockConfig {
    pub fn validate(&self) -> Result<(), BlockError> {
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(BlockError::InvalidConfig(
                "channel counts must be positive".into(),
            ));
        }
        if self.num_heads > 0 && self.channels_out % self.num_heads != 0 {
            return Err(BlockError::InvalidConfig(format!(
                "channels_out {} not divisible by num_heads {}",
                self.channels_out, self.num_heads
            )));
        }
        if self.n_trans > 0 && self.n_trans % 2 != 0 {
            return Err(BlockError::InvalidConfig(format!(
                "n_trans {} must be even (regular/shifted window pairs)",
                self.n_trans
            )));
        }
        if self.n_trans > 0 && self.num_heads == 0 {
            return Err(BlockError::InvalidConfig(
                "transformer sub-blocks need num_heads >= 1".into(),
            ));
        }
        if self.window.iter().any(|&w| w == 0) {
            return Err(BlockError::InvalidConfig("window dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// A named trainable tensor; `decay` selects it for L2 weight decay.
pub struct ParamEntry<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub decay: bool,
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{}.{}", prefix, name)
    }
}

pub(crate) fn push_param<E: Element>(
    out: &mut Vec<ParamEntry<E>>,
    prefix: &str,
    name: &str,
    tensor: &Tensor<E>,
) {
    out.push(ParamEntry {
        name: join_name(prefix, name),
        tensor: tensor.clone(),
        decay: false,
    });
}

#[cfg(test)]
mod tests;
