//! Prediction heads: sigmoid segmentation maps and the discrete-time survival
//! head over pooled deep features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BlockError, Conv3dLayer, LinearLayer, ParamEntry};
use crate::tensor::{dropout, Element, Tensor};

/// Sigmoid-activated 1x1x1 convolution at the decoder's output resolution.
pub struct SegmentationHead<E: Element> {
    pub conv: Conv3dLayer<E>,
}

impl<E: Element> SegmentationHead<E> {
    pub fn new(channels_in: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        SegmentationHead {
            conv: Conv3dLayer::new(channels_in, out_channels, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>, BlockError> {
        Ok(self.conv.forward(x)?.sigmoid())
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        self.conv.append_params(&format!("{}.conv", prefix), out);
    }
}

const SURVIVAL_HIDDEN: usize = 64;
const LEAKY_SLOPE: f64 = 0.01;

/// Two fully-connected layers with dropout over the concatenated
/// global-average-pooled decoder features; sigmoid output gives the N
/// conditional survival probabilities. Both layers are flagged for weight
/// decay.
pub struct SurvivalHead<E: Element> {
    pub fc1: LinearLayer<E>,
    pub fc2: LinearLayer<E>,
    pub dropout: f64,
    pub features_in: usize,
}

impl<E: Element> SurvivalHead<E> {
    pub fn new(features_in: usize, n_intervals: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        SurvivalHead {
            fc1: LinearLayer::new(features_in, SURVIVAL_HIDDEN, rng),
            fc2: LinearLayer::new(SURVIVAL_HIDDEN, n_intervals, rng),
            dropout,
            features_in,
        }
    }

    /// `features: [B, F]` -> `[B, N]` probabilities in (0, 1).
    pub fn forward(
        &self,
        features: &Tensor<E>,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor<E>, BlockError> {
        if features.shape().len() != 2 || features.shape()[1] != self.features_in {
            return Err(BlockError::Tensor(crate::tensor::TensorError::AxisMismatch {
                op: "survival_head",
                axis: 1,
                expected: self.features_in,
                got: features.shape().last().copied().unwrap_or(0),
            }));
        }
        let hidden = self
            .fc1
            .forward(features)?
            .leaky_relu(E::of_f64(LEAKY_SLOPE));
        let dropped = dropout(&hidden, self.dropout, train, rng);
        Ok(self.fc2.forward(&dropped)?.sigmoid())
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        let start = out.len();
        self.fc1.append_params(&format!("{}.fc1", prefix), out);
        self.fc2.append_params(&format!("{}.fc2", prefix), out);
        for entry in &mut out[start..] {
            entry.decay = true;
        }
    }
}
