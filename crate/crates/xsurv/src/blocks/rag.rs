//! Region-specific attention gate and the vanilla additive attention gate it
//! is compared against.
//!
//! The RAG produces three mutually exclusive spatial attention maps (primary
//! tumor, lymph node, background) by a per-voxel softmax over three gated
//! logits, then diverges the skip feature into branch-specific streams by
//! multiplying with the PT and MLN maps.

use rand_chacha::ChaCha8Rng;

use super::{BlockError, Conv3dLayer, ParamEntry};
use crate::tensor::{concat, Element, Tensor};

pub struct RagOutput<E: Element> {
    pub alpha_pt: Tensor<E>,
    pub alpha_mln: Tensor<E>,
    pub alpha_bg: Tensor<E>,
    pub x_pt: Tensor<E>,
    pub x_mln: Tensor<E>,
}

/// Bring a gating signal onto the skip feature's grid: the gate is either
/// already there or exactly one 2x upsampling away.
fn resample_gate<E: Element>(g: &Tensor<E>, target: &[usize]) -> Result<Tensor<E>, BlockError> {
    let gs = g.shape();
    if gs[2..] == target[2..] {
        return Ok(g.clone());
    }
    if gs[2] * 2 == target[2] && gs[3] * 2 == target[3] && gs[4] * 2 == target[4] {
        return Ok(g.upsample_trilinear_2x()?);
    }
    Err(BlockError::Tensor(crate::tensor::TensorError::ShapeMismatch {
        op: "rag_gate_resample",
        lhs: target.to_vec(),
        rhs: gs.to_vec(),
    }))
}

pub struct RagBlock<E: Element> {
    pub w_x: Conv3dLayer<E>,
    pub w_g_pt: Conv3dLayer<E>,
    pub w_g_mln: Conv3dLayer<E>,
    pub psi_pt: Conv3dLayer<E>,
    pub psi_mln: Conv3dLayer<E>,
    pub psi_bg: Conv3dLayer<E>,
}

impl<E: Element> RagBlock<E> {
    /// `skip_channels` feeds the shared `W_x`; both gates carry
    /// `gate_channels`. The intermediate width equals `skip_channels`.
    pub fn new(skip_channels: usize, gate_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let f = skip_channels;
        RagBlock {
            w_x: Conv3dLayer::new(skip_channels, f, 1, 1, 0, rng),
            w_g_pt: Conv3dLayer::new(gate_channels, f, 1, 1, 0, rng),
            w_g_mln: Conv3dLayer::new(gate_channels, f, 1, 1, 0, rng),
            psi_pt: Conv3dLayer::new(f, 1, 1, 1, 0, rng),
            psi_mln: Conv3dLayer::new(f, 1, 1, 1, 0, rng),
            psi_bg: Conv3dLayer::new(f, 1, 1, 1, 0, rng),
        }
    }

    pub fn forward(
        &self,
        x_skip: &Tensor<E>,
        g_pt: &Tensor<E>,
        g_mln: &Tensor<E>,
    ) -> Result<RagOutput<E>, BlockError> {
        let g_pt = resample_gate(g_pt, x_skip.shape())?;
        let g_mln = resample_gate(g_mln, x_skip.shape())?;
        let xs = self.w_x.forward(x_skip)?;
        let logit_pt = self
            .psi_pt
            .forward(&xs.add(&self.w_g_pt.forward(&g_pt)?)?.relu())?;
        let logit_mln = self
            .psi_mln
            .forward(&xs.add(&self.w_g_mln.forward(&g_mln)?)?.relu())?;
        let logit_bg = self.psi_bg.forward(&xs.relu())?;
        let alphas = concat(&[logit_pt, logit_mln, logit_bg], 1)?.softmax(1)?;
        let alpha_pt = alphas.narrow(1, 0, 1)?;
        let alpha_mln = alphas.narrow(1, 1, 1)?;
        let alpha_bg = alphas.narrow(1, 2, 1)?;
        let x_pt = x_skip.mul_channel_gate(&alpha_pt)?;
        let x_mln = x_skip.mul_channel_gate(&alpha_mln)?;
        Ok(RagOutput {
            alpha_pt,
            alpha_mln,
            alpha_bg,
            x_pt,
            x_mln,
        })
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        self.w_x.append_params(&format!("{}.w_x", prefix), out);
        self.w_g_pt.append_params(&format!("{}.w_g_pt", prefix), out);
        self.w_g_mln.append_params(&format!("{}.w_g_mln", prefix), out);
        self.psi_pt.append_params(&format!("{}.psi_pt", prefix), out);
        self.psi_mln.append_params(&format!("{}.psi_mln", prefix), out);
        self.psi_bg.append_params(&format!("{}.psi_bg", prefix), out);
    }
}

/// Vanilla additive attention gate: one sigmoid-activated map per branch,
/// computed independently (no mutual exclusivity). Intermediate width is half
/// the skip channels, as in the original gate.
pub struct VanillaGate<E: Element> {
    pub w_x: Conv3dLayer<E>,
    pub w_g: Conv3dLayer<E>,
    pub psi: Conv3dLayer<E>,
}

impl<E: Element> VanillaGate<E> {
    pub fn new(skip_channels: usize, gate_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let f = (skip_channels / 2).max(1);
        VanillaGate {
            w_x: Conv3dLayer::new(skip_channels, f, 1, 1, 0, rng),
            w_g: Conv3dLayer::new(gate_channels, f, 1, 1, 0, rng),
            psi: Conv3dLayer::new(f, 1, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, x_skip: &Tensor<E>, g: &Tensor<E>) -> Result<Tensor<E>, BlockError> {
        let g = resample_gate(g, x_skip.shape())?;
        let alpha = self
            .psi
            .forward(&self.w_x.forward(x_skip)?.add(&self.w_g.forward(&g)?)?.relu())?
            .sigmoid();
        Ok(x_skip.mul_channel_gate(&alpha)?)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        self.w_x.append_params(&format!("{}.w_x", prefix), out);
        self.w_g.append_params(&format!("{}.w_g", prefix), out);
        self.psi.append_params(&format!("{}.psi", prefix), out);
    }
}
