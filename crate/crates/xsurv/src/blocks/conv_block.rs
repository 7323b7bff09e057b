//! Convolutional stage block and the small parameterized layers shared by the
//! rest of the network.

use rand_chacha::ChaCha8Rng;

use super::{push_param, BlockConfig, BlockError, ParamEntry};
use crate::tensor::{
    conv3d, instance_norm, kaiming_uniform, layer_norm, linear, ones_param, zeros_param, Element,
    Tensor,
};

const LEAKY_SLOPE: f64 = 0.01;

pub struct Conv3dLayer<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Element> Conv3dLayer<E> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel * kernel;
        Conv3dLayer {
            weight: kaiming_uniform(&[cout, cin, kernel, kernel, kernel], fan_in, LEAKY_SLOPE, rng),
            bias: zeros_param(&[cout]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>, BlockError> {
        Ok(conv3d(x, &self.weight, Some(&self.bias), self.stride, self.padding)?)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        push_param(out, prefix, "weight", &self.weight);
        push_param(out, prefix, "bias", &self.bias);
    }
}

pub struct InstanceNorm3d<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub eps: f64,
}

impl<E: Element> InstanceNorm3d<E> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm3d {
            gamma: ones_param(&[channels]),
            beta: zeros_param(&[channels]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>, BlockError> {
        Ok(instance_norm(x, &self.gamma, &self.beta, E::of_f64(self.eps))?)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        push_param(out, prefix, "gamma", &self.gamma);
        push_param(out, prefix, "beta", &self.beta);
    }
}

pub struct LayerNormUnit<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub eps: f64,
}

impl<E: Element> LayerNormUnit<E> {
    pub fn new(features: usize) -> Self {
        LayerNormUnit {
            gamma: ones_param(&[features]),
            beta: zeros_param(&[features]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>, BlockError> {
        Ok(layer_norm(x, &self.gamma, &self.beta, E::of_f64(self.eps))?)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        push_param(out, prefix, "gamma", &self.gamma);
        push_param(out, prefix, "beta", &self.beta);
    }
}

pub struct LinearLayer<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> LinearLayer<E> {
    pub fn new(fin: usize, fout: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearLayer {
            weight: kaiming_uniform(&[fin, fout], fin, LEAKY_SLOPE, rng),
            bias: zeros_param(&[fout]),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>, BlockError> {
        Ok(linear(x, &self.weight, Some(&self.bias))?)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        push_param(out, prefix, "weight", &self.weight);
        push_param(out, prefix, "bias", &self.bias);
    }
}

/// `n_conv` repetitions of 3x3x3 conv -> instance norm -> leaky-relu. The
/// first convolution maps `channels_in -> channels_out`, the rest preserve
/// the channel count; padding 1 keeps the spatial size.
pub struct ConvBlock<E: Element> {
    pub convs: Vec<Conv3dLayer<E>>,
    pub norms: Vec<InstanceNorm3d<E>>,
}

impl<E: Element> ConvBlock<E> {
    pub fn new(cfg: &BlockConfig, rng: &mut ChaCha8Rng) -> Result<Self, BlockError> {
        cfg.validate()?;
        if cfg.n_conv == 0 {
            return Err(BlockError::InvalidConfig(
                "conv block needs n_conv >= 1".into(),
            ));
        }
        let mut convs = Vec::with_capacity(cfg.n_conv);
        let mut norms = Vec::with_capacity(cfg.n_conv);
        for i in 0..cfg.n_conv {
            let cin = if i == 0 { cfg.channels_in } else { cfg.channels_out };
            convs.push(Conv3dLayer::new(cin, cfg.channels_out, 3, 1, 1, rng));
            norms.push(InstanceNorm3d::new(cfg.channels_out));
        }
        Ok(ConvBlock { convs, norms })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>, BlockError> {
        let mut cur = x.clone();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            cur = norm.forward(&conv.forward(&cur)?)?.leaky_relu(E::of_f64(LEAKY_SLOPE));
        }
        Ok(cur)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        for (i, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            conv.append_params(&format!("{}.conv{}", prefix, i), out);
            norm.append_params(&format!("{}.norm{}", prefix, i), out);
        }
    }
}
