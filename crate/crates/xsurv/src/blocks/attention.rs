//! Windowed multi-head attention over 3D feature maps, Swin-style: the volume
//! is tiled into non-overlapping windows, attention runs within each window
//! with a learned relative-position bias, and alternating sub-blocks shift the
//! tiling by half a window (with masking so shifted windows never attend
//! across wrap or padding boundaries).

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::{push_param, BlockConfig, BlockError, LayerNormUnit, LinearLayer, ParamEntry};
use crate::tensor::{matmul, zeros_param, Element, Tensor};

const MASKED: f64 = -1e30;

/// Per-window additive masks, deduplicated: most windows carry no mask at all.
pub struct WindowMasks<E: Element> {
    /// Index into `tables` per window, `None` for unmasked windows.
    pub per_window: Vec<Option<usize>>,
    pub tables: Vec<Vec<E>>,
}

/// Partition geometry for one (volume, window, shifted) combination.
pub struct WindowPlan<E: Element> {
    pub orig: [usize; 3],
    pub window: [usize; 3],
    pub padded: [usize; 3],
    pub counts: [usize; 3],
    pub shift: [usize; 3],
    pub masks: Option<Rc<WindowMasks<E>>>,
}

impl<E: Element> WindowPlan<E> {
    /// Clamp the window to the volume, pad to a multiple, and derive the
    /// shifted-window masks.
    pub fn new(dims: [usize; 3], window: [usize; 3], shifted: bool) -> Self {
        let mut w = [0usize; 3];
        let mut padded = [0usize; 3];
        let mut counts = [0usize; 3];
        let mut shift = [0usize; 3];
        for a in 0..3 {
            w[a] = window[a].min(dims[a]).max(1);
            counts[a] = dims[a].div_ceil(w[a]);
            padded[a] = counts[a] * w[a];
            shift[a] = if shifted && counts[a] > 1 { w[a] / 2 } else { 0 };
        }
        let masks = build_masks::<E>(dims, w, padded, counts, shift);
        WindowPlan {
            orig: dims,
            window: w,
            padded,
            counts,
            shift,
            masks: masks.map(Rc::new),
        }
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    pub fn n_windows(&self) -> usize {
        self.counts.iter().product()
    }

    /// `[N,C,D,H,W] -> [N*nW, T, C]` token layout (pad, roll, tile).
    pub fn partition(&self, x: &Tensor<E>) -> Result<Tensor<E>, BlockError> {
        let n = x.shape()[0];
        let c = x.shape()[1];
        let mut cur = x.pad3d_end(self.padded)?;
        if self.shift.iter().any(|&s| s > 0) {
            cur = cur.roll3d([
                -(self.shift[0] as isize),
                -(self.shift[1] as isize),
                -(self.shift[2] as isize),
            ])?;
        }
        let [nd, nh, nw] = self.counts;
        let [wd, wh, ww] = self.window;
        let split = cur.reshape(&[n, c, nd, wd, nh, wh, nw, ww])?;
        let perm = split.permute(&[0, 2, 4, 6, 3, 5, 7, 1])?;
        Ok(perm.reshape(&[n * self.n_windows(), self.tokens_per_window(), c])?)
    }

    /// Inverse of [`WindowPlan::partition`]: unroll + crop back to `orig`.
    pub fn unpartition(&self, tokens: &Tensor<E>, n: usize, c: usize) -> Result<Tensor<E>, BlockError> {
        let [nd, nh, nw] = self.counts;
        let [wd, wh, ww] = self.window;
        let split = tokens.reshape(&[n, nd, nh, nw, wd, wh, ww, c])?;
        let perm = split.permute(&[0, 7, 1, 4, 2, 5, 3, 6])?;
        let mut cur = perm.reshape(&[n, c, self.padded[0], self.padded[1], self.padded[2]])?;
        if self.shift.iter().any(|&s| s > 0) {
            cur = cur.roll3d([
                self.shift[0] as isize,
                self.shift[1] as isize,
                self.shift[2] as isize,
            ])?;
        }
        Ok(cur.crop3d(self.orig)?)
    }
}

/// Region/validity labeling of the rolled, padded grid. Attention is allowed
/// only between tokens of the same shift region that both come from real
/// (non-padding) voxels.
fn build_masks<E: Element>(
    dims: [usize; 3],
    window: [usize; 3],
    padded: [usize; 3],
    counts: [usize; 3],
    shift: [usize; 3],
) -> Option<WindowMasks<E>> {
    let any_pad = (0..3).any(|a| padded[a] != dims[a]);
    let any_shift = shift.iter().any(|&s| s > 0);
    if !any_pad && !any_shift {
        return None;
    }
    // Per-axis segment id of the pre-roll coordinate (Swin's three slices),
    // evaluated at each post-roll position.
    let axis_label = |a: usize| -> Vec<(u8, bool)> {
        (0..padded[a])
            .map(|p| {
                let q = (p + shift[a]) % padded[a];
                let seg = if shift[a] == 0 {
                    0
                } else if q < padded[a] - window[a] {
                    0
                } else if q < padded[a] - shift[a] {
                    1
                } else {
                    2
                };
                (seg, q < dims[a])
            })
            .collect()
    };
    let lab_d = axis_label(0);
    let lab_h = axis_label(1);
    let lab_w = axis_label(2);

    let t = window.iter().product::<usize>();
    let mut per_window = Vec::with_capacity(counts.iter().product());
    let mut tables: Vec<Vec<E>> = Vec::new();
    let mut signatures: Vec<Vec<(u8, bool)>> = Vec::new();

    for zi in 0..counts[0] {
        for yi in 0..counts[1] {
            for xi in 0..counts[2] {
                let mut labels = Vec::with_capacity(t);
                for dz in 0..window[0] {
                    let (sd, vd) = lab_d[zi * window[0] + dz];
                    for dy in 0..window[1] {
                        let (sh, vh) = lab_h[yi * window[1] + dy];
                        for dx in 0..window[2] {
                            let (sw, vw) = lab_w[xi * window[2] + dx];
                            labels.push(((sd * 3 + sh) * 3 + sw, vd && vh && vw));
                        }
                    }
                }
                let uniform = labels.iter().all(|&(r, v)| r == labels[0].0 && v)
                    || labels.iter().all(|&(_, v)| !v);
                if uniform {
                    per_window.push(None);
                    continue;
                }
                let idx = match signatures.iter().position(|s| s == &labels) {
                    Some(i) => i,
                    None => {
                        let mut table = vec![E::zero(); t * t];
                        for i in 0..t {
                            for j in 0..t {
                                let allowed =
                                    labels[i].0 == labels[j].0 && labels[i].1 && labels[j].1;
                                if !allowed {
                                    table[i * t + j] = E::of_f64(MASKED);
                                }
                            }
                        }
                        signatures.push(labels);
                        tables.push(table);
                        tables.len() - 1
                    }
                };
                per_window.push(Some(idx));
            }
        }
    }
    if per_window.iter().all(|m| m.is_none()) {
        return None;
    }
    Some(WindowMasks { per_window, tables })
}

/// Add the per-window masks onto attention logits `[N*nW, heads, T, T]`.
fn apply_masks<E: Element>(
    logits: &Tensor<E>,
    masks: &Rc<WindowMasks<E>>,
) -> Result<Tensor<E>, BlockError> {
    let s = logits.shape().to_vec();
    let (b, heads, tq, tk) = (s[0], s[1], s[2], s[3]);
    let n_windows = masks.per_window.len();
    debug_assert_eq!(b % n_windows, 0);
    let tt = tq * tk;
    let masks_fwd = Rc::clone(masks);
    let data: Vec<E> = {
        let src = logits.data();
        let mut out = src.clone();
        for bi in 0..b {
            if let Some(mi) = masks_fwd.per_window[bi % n_windows] {
                let table = &masks_fwd.tables[mi];
                for hi in 0..heads {
                    let base = (bi * heads + hi) * tt;
                    for i in 0..tt {
                        out[base + i] += table[i];
                    }
                }
            }
        }
        out
    };
    Ok(Tensor::from_op(
        s,
        data,
        vec![logits.clone()],
        Box::new(|ctx| {
            if let Some(mut g) = ctx.parent_grad(0) {
                for (gp, &go) in g.iter_mut().zip(ctx.grad) {
                    *gp += go;
                }
            }
        }),
    ))
}

/// Multi-head scaled dot-product attention within windows, with a learned
/// relative-position bias table indexed by 3D token offsets. Queries come
/// from one token stream and keys/values from another (pass the same stream
/// for self-attention).
pub struct WindowAttention<E: Element> {
    pub dim: usize,
    pub heads: usize,
    pub max_window: [usize; 3],
    pub wq: LinearLayer<E>,
    pub wk: LinearLayer<E>,
    pub wv: LinearLayer<E>,
    pub out_proj: LinearLayer<E>,
    /// `[(2wd-1)(2wh-1)(2ww-1), heads]`, zero-initialized.
    pub rel_pos_bias: Tensor<E>,
}

impl<E: Element> WindowAttention<E> {
    pub fn new(dim: usize, heads: usize, window: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let table_len = (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1);
        WindowAttention {
            dim,
            heads,
            max_window: window,
            wq: LinearLayer::new(dim, dim, rng),
            wk: LinearLayer::new(dim, dim, rng),
            wv: LinearLayer::new(dim, dim, rng),
            out_proj: LinearLayer::new(dim, dim, rng),
            rel_pos_bias: zeros_param(&[table_len, heads]),
        }
    }

    /// Bias-table row for every ordered token pair of the effective window.
    fn rel_pos_indices(&self, window: [usize; 3]) -> Vec<usize> {
        let [wd, wh, ww] = window;
        let [md, mh, mw] = self.max_window;
        let coords: Vec<(isize, isize, isize)> = (0..wd)
            .flat_map(|z| {
                (0..wh).flat_map(move |y| (0..ww).map(move |x| (z as isize, y as isize, x as isize)))
            })
            .collect();
        let mut idx = Vec::with_capacity(coords.len() * coords.len());
        for &(zi, yi, xi) in &coords {
            for &(zj, yj, xj) in &coords {
                let dz = (zi - zj + md as isize - 1) as usize;
                let dy = (yi - yj + mh as isize - 1) as usize;
                let dx = (xi - xj + mw as isize - 1) as usize;
                idx.push((dz * (2 * mh - 1) + dy) * (2 * mw - 1) + dx);
            }
        }
        idx
    }

    /// `tokens_* : [B, T, C]` in the window layout of `plan`.
    pub fn forward(
        &self,
        tokens_q: &Tensor<E>,
        tokens_kv: &Tensor<E>,
        plan: &WindowPlan<E>,
    ) -> Result<Tensor<E>, BlockError> {
        let (b, t, c) = match *tokens_q.shape() {
            [b, t, c] => (b, t, c),
            _ => {
                return Err(BlockError::InvalidConfig(format!(
                    "expected token layout [B,T,C], got {:?}",
                    tokens_q.shape()
                )))
            }
        };
        debug_assert_eq!(c, self.dim);
        let hd = c / self.heads;
        let scale = E::of_f64(1.0 / (hd as f64).sqrt());

        let flat_q = tokens_q.reshape(&[b * t, c])?;
        let flat_kv = tokens_kv.reshape(&[b * t, c])?;
        let to_heads = |x: &Tensor<E>| -> Result<Tensor<E>, BlockError> {
            // [B*T, C] -> [B, T, h, hd] -> [B*h, T, hd]
            Ok(x
                .reshape(&[b, t, self.heads, hd])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * self.heads, t, hd])?)
        };
        let q = to_heads(&self.wq.forward(&flat_q)?)?;
        let k = to_heads(&self.wk.forward(&flat_kv)?)?;
        let v = to_heads(&self.wv.forward(&flat_kv)?)?;

        let kt = k.permute(&[0, 2, 1])?;
        let mut logits = matmul(&q, &kt)?.mul_scalar(scale).reshape(&[
            b,
            self.heads,
            t,
            t,
        ])?;

        let bias = self
            .rel_pos_bias
            .index_select_rows(&self.rel_pos_indices(plan.window))?
            .reshape(&[t, t, self.heads])?
            .permute(&[2, 0, 1])?;
        logits = logits.add_broadcast(&bias)?;
        if let Some(masks) = &plan.masks {
            logits = apply_masks(&logits, masks)?;
        }
        let attn = logits.softmax(3)?.reshape(&[b * self.heads, t, t])?;

        let ctx = matmul(&attn, &v)?
            .reshape(&[b, self.heads, t, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * t, c])?;
        Ok(self.out_proj.forward(&ctx)?.reshape(&[b, t, c])?)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        self.wq.append_params(&format!("{}.wq", prefix), out);
        self.wk.append_params(&format!("{}.wk", prefix), out);
        self.wv.append_params(&format!("{}.wv", prefix), out);
        self.out_proj.append_params(&format!("{}.out", prefix), out);
        push_param(out, prefix, "rel_pos_bias", &self.rel_pos_bias);
    }
}

const MLP_RATIO: usize = 2;

/// One pre-norm transformer sub-block: windowed attention plus a two-layer
/// MLP, each behind a residual connection. Built either as self-attention or
/// as cross-attention (queries from the block's own stream, keys/values from
/// the partner modality).
pub struct TransformerBlock<E: Element> {
    pub norm_attn: LayerNormUnit<E>,
    /// Present only on cross-attention blocks.
    pub norm_kv: Option<LayerNormUnit<E>>,
    pub attn: WindowAttention<E>,
    pub norm_mlp: LayerNormUnit<E>,
    pub mlp_in: LinearLayer<E>,
    pub mlp_out: LinearLayer<E>,
    pub shifted: bool,
    pub window: [usize; 3],
}

impl<E: Element> TransformerBlock<E> {
    pub fn new_self(cfg: &BlockConfig, shifted: bool, rng: &mut ChaCha8Rng) -> Result<Self, BlockError> {
        Self::build(cfg, shifted, false, rng)
    }

    pub fn new_cross(cfg: &BlockConfig, shifted: bool, rng: &mut ChaCha8Rng) -> Result<Self, BlockError> {
        Self::build(cfg, shifted, true, rng)
    }

    fn build(
        cfg: &BlockConfig,
        shifted: bool,
        cross: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, BlockError> {
        cfg.validate()?;
        let c = cfg.channels_out;
        Ok(TransformerBlock {
            norm_attn: LayerNormUnit::new(c),
            norm_kv: cross.then(|| LayerNormUnit::new(c)),
            attn: WindowAttention::new(c, cfg.num_heads, cfg.window, rng),
            norm_mlp: LayerNormUnit::new(c),
            mlp_in: LinearLayer::new(c, MLP_RATIO * c, rng),
            mlp_out: LinearLayer::new(MLP_RATIO * c, c, rng),
            shifted,
            window: cfg.window,
        })
    }

    /// Self-attention over one feature map.
    pub fn forward_self(&self, x: &Tensor<E>) -> Result<Tensor<E>, BlockError> {
        self.forward_inner(x, None)
    }

    /// Cross-attention: queries from `x`, keys/values from `other` (same
    /// shape; both are windowed identically so windows stay co-located).
    pub fn forward_cross(&self, x: &Tensor<E>, other: &Tensor<E>) -> Result<Tensor<E>, BlockError> {
        if x.shape() != other.shape() {
            return Err(BlockError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "windowed_cross_attention",
                lhs: x.shape().to_vec(),
                rhs: other.shape().to_vec(),
            }));
        }
        self.forward_inner(x, Some(other))
    }

    fn forward_inner(&self, x: &Tensor<E>, other: Option<&Tensor<E>>) -> Result<Tensor<E>, BlockError> {
        let s = x.shape().to_vec();
        let (n, c, dims) = (s[0], s[1], [s[2], s[3], s[4]]);
        let plan = WindowPlan::new(dims, self.window, self.shifted);

        let tok_x = plan.partition(x)?;
        let normed_q = self.norm_attn.forward(&tok_x)?;
        let attn_out = match other {
            Some(o) => {
                let tok_o = plan.partition(o)?;
                let normed_kv = self
                    .norm_kv
                    .as_ref()
                    .expect("cross block has kv norm")
                    .forward(&tok_o)?;
                self.attn.forward(&normed_q, &normed_kv, &plan)?
            }
            None => self.attn.forward(&normed_q, &normed_q, &plan)?,
        };
        let after_attn = tok_x.add(&attn_out)?;

        let normed = self.norm_mlp.forward(&after_attn)?;
        let b_t = normed.shape()[0] * normed.shape()[1];
        let hidden = self
            .mlp_in
            .forward(&normed.reshape(&[b_t, c])?)?
            .gelu();
        let mlp_out = self
            .mlp_out
            .forward(&hidden)?
            .reshape(after_attn.shape())?;
        let out_tokens = after_attn.add(&mlp_out)?;

        plan.unpartition(&out_tokens, n, c)
    }

    pub fn append_params(&self, prefix: &str, out: &mut Vec<ParamEntry<E>>) {
        self.norm_attn.append_params(&format!("{}.norm_attn", prefix), out);
        if let Some(nk) = &self.norm_kv {
            nk.append_params(&format!("{}.norm_kv", prefix), out);
        }
        self.attn.append_params(&format!("{}.attn", prefix), out);
        self.norm_mlp.append_params(&format!("{}.norm_mlp", prefix), out);
        self.mlp_in.append_params(&format!("{}.mlp_in", prefix), out);
        self.mlp_out.append_params(&format!("{}.mlp_out", prefix), out);
    }
}
