//! Hybrid parallel blocks: a convolutional path and a windowed-attention path
//! run on the same input and fuse by element-wise addition. HPSA attends
//! within one modality stream; HPCA projects queries from its own stream and
//! keys/values from the partner modality.

use rand_chacha::ChaCha8Rng;

use super::{BlockConfig, BlockError, Conv3dLayer, ConvBlock, ParamEntry, TransformerBlock};
use crate::tensor::{Element, Tensor};

fn channel_proj<E: Element>(
    cfg: &BlockConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Conv3dLayer<E>> {
    (cfg.channels_in != cfg.channels_out)
        .then(|| Conv3dLayer::new(cfg.channels_in, cfg.channels_out, 1, 1, 0, rng))
}

fn alternating_blocks<E: Element>(
    cfg: &BlockConfig,
    cross: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TransformerBlock<E>>, BlockError> {
    (0..cfg.n_trans)
        .map(|i| {
            let shifted = i % 2 == 1;
            if cross {
                TransformerBlock::new_cross(cfg, shifted, rng)
            } else {
                TransformerBlock::new_self(cfg, shifted, rng)
            }
        })
        .collect()
}

/// Hybrid parallel self-attention block.
pub struct HpsaBlock<E: Element> {
    pub conv_path: ConvBlock<E>,
    pub proj_in: Option<Conv3dLayer<E>>,
    pub trans: Vec<TransformerBlock<E>>,
    /// 1x1x1 output projection of the attention path; zeroing it isolates the
    /// convolutional path exactly.
    pub proj_out: Conv3dLayer<E>,
}

impl<E: Element> HpsaBlock<E> {
    pub fn new(cfg: &BlockConfig, rng: &mut ChaCha8Rng) -> Result<Self, BlockError> {
        cfg.validate()?;
        Ok(HpsaBlock {
            conv_path: ConvBlock::new(cfg, rng)?,
            proj_in: channel_proj(cfg, rng),
            trans: alternating_blocks(cfg, false, rng)?,
            proj_out: Conv3dLayer::new(cfg.channels_out, cfg.channels_out, 1, 1, 0, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>, BlockError> {
        let conv_out = self.conv_path.forward(x)?;
        let mut t = match &self.proj_in {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        for block in &self.trans {
            t = block.forward_self(&t)?;
        }
        Ok(conv_out.add(&self.proj_out.forward(&t)?)?)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        self.conv_path.append_params(&format!("{}.conv_path", prefix), out);
        if let Some(p) = &self.proj_in {
            p.append_params(&format!("{}.proj_in", prefix), out);
        }
        for (i, b) in self.trans.iter().enumerate() {
            b.append_params(&format!("{}.trans{}", prefix, i), out);
        }
        self.proj_out.append_params(&format!("{}.proj_out", prefix), out);
    }
}

/// Hybrid parallel cross-attention block. Direction-specific: each branch owns
/// one of these, querying its own stream against the other modality.
pub struct HpcaBlock<E: Element> {
    pub conv_path: ConvBlock<E>,
    pub proj_self: Option<Conv3dLayer<E>>,
    pub proj_other: Option<Conv3dLayer<E>>,
    pub trans: Vec<TransformerBlock<E>>,
    pub proj_out: Conv3dLayer<E>,
}

impl<E: Element> HpcaBlock<E> {
    pub fn new(cfg: &BlockConfig, rng: &mut ChaCha8Rng) -> Result<Self, BlockError> {
        cfg.validate()?;
        Ok(HpcaBlock {
            conv_path: ConvBlock::new(cfg, rng)?,
            proj_self: channel_proj(cfg, rng),
            proj_other: channel_proj(cfg, rng),
            trans: alternating_blocks(cfg, true, rng)?,
            proj_out: Conv3dLayer::new(cfg.channels_out, cfg.channels_out, 1, 1, 0, rng),
        })
    }

    pub fn forward(&self, x_self: &Tensor<E>, x_other: &Tensor<E>) -> Result<Tensor<E>, BlockError> {
        if x_self.shape() != x_other.shape() {
            return Err(BlockError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "hpca_block",
                lhs: x_self.shape().to_vec(),
                rhs: x_other.shape().to_vec(),
            }));
        }
        let conv_out = self.conv_path.forward(x_self)?;
        let mut t = match &self.proj_self {
            Some(p) => p.forward(x_self)?,
            None => x_self.clone(),
        };
        let other = match &self.proj_other {
            Some(p) => p.forward(x_other)?,
            None => x_other.clone(),
        };
        for block in &self.trans {
            t = block.forward_cross(&t, &other)?;
        }
        Ok(conv_out.add(&self.proj_out.forward(&t)?)?)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        self.conv_path.append_params(&format!("{}.conv_path", prefix), out);
        if let Some(p) = &self.proj_self {
            p.append_params(&format!("{}.proj_self", prefix), out);
        }
        if let Some(p) = &self.proj_other {
            p.append_params(&format!("{}.proj_other", prefix), out);
        }
        for (i, b) in self.trans.iter().enumerate() {
            b.append_params(&format!("{}.trans{}", prefix, i), out);
        }
        self.proj_out.append_params(&format!("{}.proj_out", prefix), out);
    }
}
