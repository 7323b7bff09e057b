//! The X-shape network: a dual-branch merging encoder (PET and CT streams
//! fused by hybrid parallel cross-attention), a dual-branch diverging decoder
//! (primary-tumor and lymph-node streams separated by region-specific
//! attention gates on the skip connections), and the segmentation and
//! survival heads. Ablation variants swap out the fusion or gating strategy.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    BlockConfig, BlockError, Conv3dLayer, ConvBlock, HpcaBlock, HpsaBlock, ParamEntry, RagBlock,
    SegmentationHead, SurvivalHead, VanillaGate,
};
use crate::tensor::{concat, Element, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    InvalidConfig(String),
    #[error("modality volumes differ in shape: {pet:?} vs {ct:?}")]
    ModalityMismatch { pet: Vec<usize>, ct: Vec<usize> },
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Which variant of the architecture to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Dual-branch encoder with HPCA fusion, dual-branch decoder with RAG.
    Full,
    /// One encoder branch over channel-concatenated PET+CT input.
    EarlyFusion,
    /// Two fully independent encoder branches (HPCA stages become HPSA);
    /// modalities meet only at the skip/bottleneck concatenation.
    LateFusion,
    PetOnly,
    CtOnly,
    /// One decoder branch supervised on PT only.
    SingleBranchPt,
    SingleBranchMln,
    /// One decoder branch with a two-channel head supervised on PT and MLN.
    SingleBranchJoint,
    /// Dual decoder, skips passed ungated.
    DualNoAg,
    /// Dual decoder, one sigmoid additive attention gate per branch.
    DualVanillaAg,
}

impl Ablation {
    pub fn single_encoder(&self) -> bool {
        matches!(self, Ablation::EarlyFusion | Ablation::PetOnly | Ablation::CtOnly)
    }

    pub fn single_decoder(&self) -> bool {
        matches!(
            self,
            Ablation::SingleBranchPt | Ablation::SingleBranchMln | Ablation::SingleBranchJoint
        )
    }
}

/// All architecture parameters of the network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Per-stage encoder channels (embedding dims).
    pub enc_channels: Vec<usize>,
    /// Per-stage decoder channels, deepest first.
    pub dec_channels: Vec<usize>,
    /// Leading stages built as plain Conv blocks.
    pub n_conv_stages: usize,
    /// Stages built as hybrid parallel self-attention blocks.
    pub n_self_stages: usize,
    /// Trailing stages built as hybrid parallel cross-attention blocks.
    pub n_cross_stages: usize,
    /// Convolutions per Conv block, per stage.
    pub n_conv: Vec<usize>,
    /// Transformer sub-blocks per stage (0 disables the attention path).
    pub n_trans: Vec<usize>,
    /// Attention heads per stage.
    pub heads: Vec<usize>,
    pub window: [usize; 3],
    pub n_intervals: usize,
    pub ablation: Ablation,
    /// Dropout rate of the survival head.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_channels: vec![8, 16, 32, 64, 128],
            dec_channels: vec![128, 64, 32, 16, 8],
            n_conv_stages: 1,
            n_self_stages: 1,
            n_cross_stages: 3,
            n_conv: vec![2, 3, 3, 4, 4],
            n_trans: vec![0, 2, 2, 2, 2],
            heads: vec![0, 2, 4, 8, 16],
            window: [5, 5, 5],
            n_intervals: 10,
            ablation: Ablation::Full,
            dropout: 0.3,
        }
    }
}

impl ModelConfig {
    /// Four-stage desk-scale variant for fast experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            enc_channels: vec![4, 8, 16, 32],
            dec_channels: vec![32, 16, 8, 4],
            n_conv_stages: 1,
            n_self_stages: 1,
            n_cross_stages: 2,
            n_conv: vec![1, 2, 2, 2],
            n_trans: vec![0, 2, 2, 2],
            heads: vec![0, 2, 4, 8],
            window: [3, 3, 3],
            n_intervals: 10,
            ablation: Ablation::Full,
            dropout: 0.3,
        }
    }

    pub fn stages(&self) -> usize {
        self.n_conv_stages + self.n_self_stages + self.n_cross_stages
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let s = self.stages();
        if s < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "need at least 2 stages, got {}",
                s
            )));
        }
        for (name, len) in [
            ("enc_channels", self.enc_channels.len()),
            ("dec_channels", self.dec_channels.len()),
            ("n_conv", self.n_conv.len()),
            ("n_trans", self.n_trans.len()),
            ("heads", self.heads.len()),
        ] {
            if len != s {
                return Err(ModelError::InvalidConfig(format!(
                    "{} has {} entries but there are {} stages",
                    name, len, s
                )));
            }
        }
        for st in 0..s {
            if (self.heads[st] == 0) != (self.n_trans[st] == 0) {
                return Err(ModelError::InvalidConfig(format!(
                    "stage {}: heads[s] must be 0 exactly when n_trans[s] is 0 ({} vs {})",
                    st, self.heads[st], self.n_trans[st]
                )));
            }
        }
        if self.n_intervals < 2 {
            return Err(ModelError::InvalidConfig(
                "n_intervals must be at least 2".into(),
            ));
        }
        if self.ablation.single_encoder() && self.n_cross_stages > 0 {
            return Err(ModelError::InvalidConfig(format!(
                "{:?} is a single-encoder mode and cannot have cross-attention stages; set n_cross_stages = 0 (replace them with conv or self stages)",
                self.ablation
            )));
        }
        Ok(())
    }

    fn stage_block_config(&self, s: usize) -> BlockConfig {
        BlockConfig {
            channels_in: self.enc_channels[s],
            channels_out: self.enc_channels[s],
            n_conv: self.n_conv[s],
            n_trans: self.n_trans[s],
            num_heads: self.heads[s],
            window: self.window,
        }
    }
}

enum StageBlock<E: Element> {
    Conv(ConvBlock<E>),
    Hpsa(HpsaBlock<E>),
    Hpca(HpcaBlock<E>),
}

impl<E: Element> StageBlock<E> {
    fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        match self {
            StageBlock::Conv(b) => b.append_params(prefix, out),
            StageBlock::Hpsa(b) => b.append_params(prefix, out),
            StageBlock::Hpca(b) => b.append_params(prefix, out),
        }
    }
}

struct EncoderBranch<E: Element> {
    /// Stage 0: stride-1 stem; stages >= 1: stride-2 downsampling entry.
    entries: Vec<Conv3dLayer<E>>,
    blocks: Vec<StageBlock<E>>,
}

impl<E: Element> EncoderBranch<E> {
    fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        for (s, (e, b)) in self.entries.iter().zip(&self.blocks).enumerate() {
            e.append_params(&format!("{}.stage{}.entry", prefix, s), out);
            b.append_params(&format!("{}.stage{}.block", prefix, s), out);
        }
    }
}

enum Gate<E: Element> {
    None,
    Rag(RagBlock<E>),
    Vanilla { pt: VanillaGate<E>, mln: VanillaGate<E> },
}

struct DecoderBranchOutputs<E: Element> {
    /// Conv-block outputs per decoder stage, deepest first.
    stage_outputs: Vec<Tensor<E>>,
}

/// Per-scale softmax attention maps exported from the RAG gates (already
/// cropped to the input grid).
pub struct ScaleAttention<E: Element> {
    pub alpha_pt: Tensor<E>,
    pub alpha_mln: Tensor<E>,
    pub alpha_bg: Tensor<E>,
}

pub struct ForwardOutput<E: Element> {
    pub pt_prob: Option<Tensor<E>>,
    pub mln_prob: Option<Tensor<E>>,
    /// `[B, n_intervals]` conditional survival probabilities.
    pub s_pred: Tensor<E>,
    /// Deepest scale first; populated in RAG mode only.
    pub attention: Vec<ScaleAttention<E>>,
    /// `[B, F]` concatenated global-average-pooled decoder features.
    pub deep_features: Tensor<E>,
}

pub struct XSurv<E: Element> {
    pub config: ModelConfig,
    branches: Vec<EncoderBranch<E>>,
    /// 1x1x1 fusion of the concatenated branch outputs at each scale.
    skip_fuse: Vec<Conv3dLayer<E>>,
    gates: Vec<Gate<E>>,
    decoders: Vec<Vec<ConvBlock<E>>>,
    seg_heads: Vec<SegmentationHead<E>>,
    survival_head: SurvivalHead<E>,
}

impl<E: Element> XSurv<E> {
    /// Deterministically build the network from a seed. Two builds from the
    /// same seed are parameter-for-parameter identical.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.stages();
        let abl = config.ablation;

        let n_branches = if abl.single_encoder() { 1 } else { 2 };
        let input_channels = if abl == Ablation::EarlyFusion { 2 } else { 1 };
        let mut branches = Vec::with_capacity(n_branches);
        for _ in 0..n_branches {
            let mut entries = Vec::with_capacity(s);
            let mut blocks = Vec::with_capacity(s);
            for st in 0..s {
                let (cin, stride) = if st == 0 {
                    (input_channels, 1)
                } else {
                    (config.enc_channels[st - 1], 2)
                };
                entries.push(Conv3dLayer::new(cin, config.enc_channels[st], 3, stride, 1, &mut rng));
                let bc = config.stage_block_config(st);
                let is_cross = st >= config.n_conv_stages + config.n_self_stages;
                let is_self = !is_cross && st >= config.n_conv_stages;
                let block = if is_cross && abl != Ablation::LateFusion {
                    StageBlock::Hpca(HpcaBlock::new(&bc, &mut rng)?)
                } else if is_self || (is_cross && abl == Ablation::LateFusion) {
                    if bc.n_trans > 0 {
                        StageBlock::Hpsa(HpsaBlock::new(&bc, &mut rng)?)
                    } else {
                        StageBlock::Conv(ConvBlock::new(&bc, &mut rng)?)
                    }
                } else if bc.n_trans > 0 {
                    StageBlock::Hpsa(HpsaBlock::new(&bc, &mut rng)?)
                } else {
                    StageBlock::Conv(ConvBlock::new(&bc, &mut rng)?)
                };
                blocks.push(block);
            }
            branches.push(EncoderBranch { entries, blocks });
        }

        // Scale s skip: concat of branch outputs -> dec_channels[S-1-s].
        let mut skip_fuse = Vec::with_capacity(s);
        for st in 0..s {
            let cin = n_branches * config.enc_channels[st];
            let cout = config.dec_channels[s - 1 - st];
            skip_fuse.push(Conv3dLayer::new(cin, cout, 1, 1, 0, &mut rng));
        }

        let n_dec_branches = if abl.single_decoder() { 1 } else { 2 };
        let use_gates = !abl.single_decoder();
        let mut gates = Vec::with_capacity(s);
        for d in 0..s {
            let skip_c = config.dec_channels[d];
            let gate_c = if d == 0 { config.dec_channels[0] } else { config.dec_channels[d - 1] };
            let gate = if !use_gates || abl == Ablation::DualNoAg {
                Gate::None
            } else if abl == Ablation::DualVanillaAg {
                Gate::Vanilla {
                    pt: VanillaGate::new(skip_c, gate_c, &mut rng),
                    mln: VanillaGate::new(skip_c, gate_c, &mut rng),
                }
            } else {
                Gate::Rag(RagBlock::new(skip_c, gate_c, &mut rng))
            };
            gates.push(gate);
        }

        let mut decoders = Vec::with_capacity(n_dec_branches);
        for _ in 0..n_dec_branches {
            let mut stages = Vec::with_capacity(s);
            for d in 0..s {
                let prev_c = if d == 0 { config.dec_channels[0] } else { config.dec_channels[d - 1] };
                let bc = BlockConfig {
                    channels_in: prev_c + config.dec_channels[d],
                    channels_out: config.dec_channels[d],
                    n_conv: config.n_conv[s - 1 - d],
                    n_trans: 0,
                    num_heads: 0,
                    window: config.window,
                };
                stages.push(ConvBlock::new(&bc, &mut rng)?);
            }
            decoders.push(stages);
        }

        let seg_out_channels = if abl == Ablation::SingleBranchJoint { 2 } else { 1 };
        let seg_heads = (0..n_dec_branches)
            .map(|_| SegmentationHead::new(config.dec_channels[s - 1], seg_out_channels, &mut rng))
            .collect();

        // Deep features: all-but-first decoder Conv block outputs, per branch.
        let feat = n_dec_branches * config.dec_channels[1..].iter().sum::<usize>();
        let survival_head = SurvivalHead::new(feat, config.n_intervals, config.dropout, &mut rng);

        Ok(XSurv {
            config: config.clone(),
            branches,
            skip_fuse,
            gates,
            decoders,
            seg_heads,
            survival_head,
        })
    }

    pub fn params(&self) -> Vec<ParamEntry<E>> {
        let mut out = Vec::new();
        let branch_names = ["pet", "ct"];
        for (i, b) in self.branches.iter().enumerate() {
            b.append_params(&format!("encoder.{}", branch_names[i]), &mut out);
        }
        for (s, f) in self.skip_fuse.iter().enumerate() {
            f.append_params(&format!("skip_fuse.scale{}", s), &mut out);
        }
        for (d, g) in self.gates.iter().enumerate() {
            match g {
                Gate::None => {}
                Gate::Rag(r) => r.append_params(&format!("gate{}.rag", d), &mut out),
                Gate::Vanilla { pt, mln } => {
                    pt.append_params(&format!("gate{}.ag_pt", d), &mut out);
                    mln.append_params(&format!("gate{}.ag_mln", d), &mut out);
                }
            }
        }
        let dec_names = ["pt", "mln"];
        for (i, dec) in self.decoders.iter().enumerate() {
            for (d, block) in dec.iter().enumerate() {
                block.append_params(&format!("decoder.{}.stage{}", dec_names[i], d), &mut out);
            }
        }
        for (i, h) in self.seg_heads.iter().enumerate() {
            h.append_params(&format!("seg_head.{}", dec_names[i]), &mut out);
        }
        self.survival_head.append_params("survival_head", &mut out);
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    fn encode_stage(
        &self,
        st: usize,
        inputs: &[Tensor<E>],
    ) -> Result<Vec<Tensor<E>>, ModelError> {
        let entered: Vec<Tensor<E>> = self
            .branches
            .iter()
            .zip(inputs)
            .map(|(b, x)| b.entries[st].forward(x))
            .collect::<Result<_, _>>()?;
        let mut outs = Vec::with_capacity(entered.len());
        for (bi, branch) in self.branches.iter().enumerate() {
            let out = match &branch.blocks[st] {
                StageBlock::Conv(b) => b.forward(&entered[bi])?,
                StageBlock::Hpsa(b) => b.forward(&entered[bi])?,
                StageBlock::Hpca(b) => {
                    let other = &entered[1 - bi];
                    b.forward(&entered[bi], other)?
                }
            };
            outs.push(out);
        }
        Ok(outs)
    }

    fn check_and_pad(
        &self,
        pet: &Tensor<E>,
        ct: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>, [usize; 3], [usize; 3]), ModelError> {
        if pet.shape() != ct.shape() {
            return Err(ModelError::ModalityMismatch {
                pet: pet.shape().to_vec(),
                ct: ct.shape().to_vec(),
            });
        }
        if pet.shape().len() != 5 || pet.shape()[1] != 1 {
            return Err(ModelError::InvalidConfig(format!(
                "expected [B,1,D,H,W] volumes, got {:?}",
                pet.shape()
            )));
        }
        let s = self.config.stages();
        let orig = [pet.shape()[2], pet.shape()[3], pet.shape()[4]];
        let factor = 1usize << (s - 1);
        let padded = orig.map(|d| d.div_ceil(factor) * factor);
        Ok((pet.pad3d_end(padded)?, ct.pad3d_end(padded)?, orig, padded))
    }

    fn branch_inputs(&self, pet_p: &Tensor<E>, ct_p: &Tensor<E>) -> Result<Vec<Tensor<E>>, ModelError> {
        Ok(match self.config.ablation {
            Ablation::EarlyFusion => vec![concat(&[pet_p.clone(), ct_p.clone()], 1)?],
            Ablation::PetOnly => vec![pet_p.clone()],
            Ablation::CtOnly => vec![ct_p.clone()],
            _ => vec![pet_p.clone(), ct_p.clone()],
        })
    }

    /// Per-branch encoder stage outputs (pre-fusion), outer index = branch.
    pub fn encoder_branch_features(
        &self,
        pet: &Tensor<E>,
        ct: &Tensor<E>,
    ) -> Result<Vec<Vec<Tensor<E>>>, ModelError> {
        let (pet_p, ct_p, _, _) = self.check_and_pad(pet, ct)?;
        let mut stage_inputs = self.branch_inputs(&pet_p, &ct_p)?;
        let mut features: Vec<Vec<Tensor<E>>> = vec![Vec::new(); stage_inputs.len()];
        for st in 0..self.config.stages() {
            let outs = self.encode_stage(st, &stage_inputs)?;
            for (bi, o) in outs.iter().enumerate() {
                features[bi].push(o.clone());
            }
            stage_inputs = outs;
        }
        Ok(features)
    }

    /// Run the network. `pet`/`ct` are `[B,1,D,H,W]` on a common grid; inputs
    /// are zero-padded internally so every dimension survives the stage-wise
    /// halving, and all outputs are cropped back.
    pub fn forward(
        &self,
        pet: &Tensor<E>,
        ct: &Tensor<E>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput<E>, ModelError> {
        let (pet_p, ct_p, orig, padded) = self.check_and_pad(pet, ct)?;
        let s = self.config.stages();

        // Merging encoder.
        let mut stage_inputs = self.branch_inputs(&pet_p, &ct_p)?;
        let mut skips = Vec::with_capacity(s);
        for st in 0..s {
            let outs = self.encode_stage(st, &stage_inputs)?;
            let merged = if outs.len() == 1 {
                outs[0].clone()
            } else {
                concat(&outs, 1)?
            };
            skips.push(self.skip_fuse[st].forward(&merged)?);
            stage_inputs = outs;
        }
        let bottleneck = skips[s - 1].clone();

        // Diverging decoder.
        let n_dec = self.decoders.len();
        let mut prev: Vec<Tensor<E>> = vec![bottleneck.clone(); n_dec];
        let mut branch_outputs: Vec<DecoderBranchOutputs<E>> = (0..n_dec)
            .map(|_| DecoderBranchOutputs {
                stage_outputs: Vec::with_capacity(s),
            })
            .collect();
        let mut attention = Vec::new();
        for d in 0..s {
            let x_skip = &skips[s - 1 - d];
            let (g_pt, g_mln) = if d == 0 {
                (bottleneck.clone(), bottleneck.clone())
            } else {
                (prev[0].clone(), prev[n_dec - 1].clone())
            };
            let gated: Vec<Tensor<E>> = match &self.gates[d] {
                Gate::None => vec![x_skip.clone(); n_dec],
                Gate::Rag(rag) => {
                    let out = rag.forward(x_skip, &g_pt, &g_mln)?;
                    attention.push(ScaleAttention {
                        alpha_pt: out.alpha_pt.crop3d(crop_dims(out.alpha_pt.shape(), orig, padded))?,
                        alpha_mln: out
                            .alpha_mln
                            .crop3d(crop_dims(out.alpha_mln.shape(), orig, padded))?,
                        alpha_bg: out.alpha_bg.crop3d(crop_dims(out.alpha_bg.shape(), orig, padded))?,
                    });
                    vec![out.x_pt, out.x_mln]
                }
                Gate::Vanilla { pt, mln } => {
                    vec![pt.forward(x_skip, &g_pt)?, mln.forward(x_skip, &g_mln)?]
                }
            };
            for bi in 0..n_dec {
                let carried = if d == 0 {
                    prev[bi].clone()
                } else {
                    prev[bi].upsample_trilinear_2x()?
                };
                let input = concat(&[carried, gated[bi].clone()], 1)?;
                let out = self.decoders[bi][d].forward(&input)?;
                branch_outputs[bi].stage_outputs.push(out.clone());
                prev[bi] = out;
            }
        }

        // Heads.
        let mut pt_prob = None;
        let mut mln_prob = None;
        for (bi, head) in self.seg_heads.iter().enumerate() {
            let full = head.forward(&prev[bi])?.crop3d(orig)?;
            match self.config.ablation {
                Ablation::SingleBranchJoint => {
                    pt_prob = Some(full.narrow(1, 0, 1)?);
                    mln_prob = Some(full.narrow(1, 1, 1)?);
                }
                Ablation::SingleBranchPt => pt_prob = Some(full),
                Ablation::SingleBranchMln => mln_prob = Some(full),
                _ => {
                    if bi == 0 {
                        pt_prob = Some(full);
                    } else {
                        mln_prob = Some(full);
                    }
                }
            }
        }

        let mut pooled = Vec::new();
        for outputs in &branch_outputs {
            for out in &outputs.stage_outputs[1..] {
                pooled.push(out.global_avg_pool()?);
            }
        }
        let deep_features = concat(&pooled, 1)?;
        let s_pred = self.survival_head.forward(&deep_features, train, rng)?;

        Ok(ForwardOutput {
            pt_prob,
            mln_prob,
            s_pred,
            attention,
            deep_features,
        })
    }
}

/// Spatial dims of an attention map cropped proportionally to the original
/// volume (the map lives at some power-of-two scale of the padded grid).
fn crop_dims(shape: &[usize], orig: [usize; 3], padded: [usize; 3]) -> [usize; 3] {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let scale = padded[a] / shape[2 + a];
        out[a] = orig[a].div_ceil(scale);
    }
    out
}

#[cfg(test)]
mod tests;
