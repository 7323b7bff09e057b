//! 3D convolution, padding, cyclic shift, and trilinear upsampling.
//!
//! Convolution is the standard cross-correlation over zero-padded input.
//! Kernels parallelize over independent output slices, so results are
//! bit-identical for any worker-thread count.

use rayon::prelude::*;

use super::{Element, Result, Tensor, TensorError};

fn conv_out(dim: usize, pad: usize, k: usize, stride: usize) -> usize {
    (dim + 2 * pad - k) / stride + 1
}

fn pad_input<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    pad: usize,
) -> Vec<E> {
    if pad == 0 {
        return x.to_vec();
    }
    let (dp, hp, wp) = (d + 2 * pad, h + 2 * pad, w + 2 * pad);
    let mut out = vec![E::zero(); n * c * dp * hp * wp];
    for nc in 0..n * c {
        let src = nc * d * h * w;
        let dst = nc * dp * hp * wp;
        for z in 0..d {
            for y in 0..h {
                let s = src + (z * h + y) * w;
                let t = dst + ((z + pad) * hp + y + pad) * wp + pad;
                out[t..t + w].copy_from_slice(&x[s..s + w]);
            }
        }
    }
    out
}

/// `input [N,Cin,D,H,W] * weight [Cout,Cin,k,k,k] (+ bias [Cout])`.
pub fn conv3d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let ishape = input.shape().to_vec();
    let wshape = weight.shape().to_vec();
    if ishape.len() != 5 {
        return Err(TensorError::Invalid {
            op: "conv3d",
            msg: format!("input must be rank 5, got {:?}", ishape),
        });
    }
    if wshape.len() != 5 || wshape[2] != wshape[3] || wshape[3] != wshape[4] {
        return Err(TensorError::Invalid {
            op: "conv3d",
            msg: format!("weight must be [Cout,Cin,k,k,k], got {:?}", wshape),
        });
    }
    let (n, cin, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3], ishape[4]);
    let (cout, k) = (wshape[0], wshape[2]);
    if wshape[1] != cin {
        return Err(TensorError::AxisMismatch {
            op: "conv3d",
            axis: 1,
            expected: wshape[1],
            got: cin,
        });
    }
    if k % 2 == 0 || stride == 0 {
        return Err(TensorError::Invalid {
            op: "conv3d",
            msg: format!("kernel must be odd and stride >= 1 (k={}, stride={})", k, stride),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::AxisMismatch {
                op: "conv3d",
                axis: 0,
                expected: cout,
                got: b.shape().first().copied().unwrap_or(0),
            });
        }
    }
    if d + 2 * padding < k || h + 2 * padding < k || w + 2 * padding < k {
        return Err(TensorError::Invalid {
            op: "conv3d",
            msg: format!(
                "kernel {} larger than padded input ({},{},{})",
                k,
                d + 2 * padding,
                h + 2 * padding,
                w + 2 * padding
            ),
        });
    }
    let (od, oh, ow) = (
        conv_out(d, padding, k, stride),
        conv_out(h, padding, k, stride),
        conv_out(w, padding, k, stride),
    );
    let (dp, hp, wp) = (d + 2 * padding, h + 2 * padding, w + 2 * padding);

    let xpad = {
        let xv = input.data();
        pad_input(&xv, n, cin, d, h, w, padding)
    };
    let wv = weight.data().clone();
    let bv: Option<Vec<E>> = bias.map(|b| b.data().clone());

    let mut out = vec![E::zero(); n * cout * od * oh * ow];
    out.par_chunks_mut(od * oh * ow)
        .enumerate()
        .for_each(|(slice_idx, out_slice)| {
            let ni = slice_idx / cout;
            let co = slice_idx % cout;
            let b0 = bv.as_ref().map(|b| b[co]).unwrap_or_else(E::zero);
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = b0;
                        for ci in 0..cin {
                            let xbase = (ni * cin + ci) * dp * hp * wp;
                            let wbase = (co * cin + ci) * k * k * k;
                            for kd in 0..k {
                                for kh in 0..k {
                                    let xrow = xbase
                                        + ((z * stride + kd) * hp + y * stride + kh) * wp
                                        + x * stride;
                                    let wrow = wbase + (kd * k + kh) * k;
                                    for kw in 0..k {
                                        acc += xpad[xrow + kw] * wv[wrow + kw];
                                    }
                                }
                            }
                        }
                        out_slice[(z * oh + y) * ow + x] = acc;
                    }
                }
            }
        });

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        vec![n, cout, od, oh, ow],
        out,
        parents,
        Box::new(move |ctx| {
            let xv = ctx.parents[0].data();
            let xpad = pad_input(&xv, n, cin, d, h, w, padding);
            drop(xv);
            let wv_guard = ctx.parents[1].data();
            let wv: &[E] = &wv_guard;
            let g = ctx.grad;

            if let Some(mut gx) = ctx.parent_grad(0) {
                // One padded-gradient slice per (n, ci); crop afterwards.
                let mut gpad = vec![E::zero(); n * cin * dp * hp * wp];
                gpad.par_chunks_mut(dp * hp * wp)
                    .enumerate()
                    .for_each(|(slice_idx, gp)| {
                        let ni = slice_idx / cin;
                        let ci = slice_idx % cin;
                        for co in 0..cout {
                            let gbase = (ni * cout + co) * od * oh * ow;
                            let wbase = (co * cin + ci) * k * k * k;
                            for z in 0..od {
                                for y in 0..oh {
                                    for x in 0..ow {
                                        let gv = g[gbase + (z * oh + y) * ow + x];
                                        if gv == E::zero() {
                                            continue;
                                        }
                                        for kd in 0..k {
                                            for kh in 0..k {
                                                let prow = ((z * stride + kd) * hp
                                                    + y * stride
                                                    + kh)
                                                    * wp
                                                    + x * stride;
                                                let wrow = wbase + (kd * k + kh) * k;
                                                for kw in 0..k {
                                                    gp[prow + kw] += gv * wv[wrow + kw];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                for nc in 0..n * cin {
                    let src = nc * dp * hp * wp;
                    let dst = nc * d * h * w;
                    for z in 0..d {
                        for y in 0..h {
                            let s = src + ((z + padding) * hp + y + padding) * wp + padding;
                            let t = dst + (z * h + y) * w;
                            for i in 0..w {
                                gx[t + i] += gpad[s + i];
                            }
                        }
                    }
                }
            }

            if let Some(mut gw) = ctx.parent_grad(1) {
                gw.par_chunks_mut(cin * k * k * k)
                    .enumerate()
                    .for_each(|(co, gw_slice)| {
                        for ni in 0..n {
                            let gbase = (ni * cout + co) * od * oh * ow;
                            for ci in 0..cin {
                                let xbase = (ni * cin + ci) * dp * hp * wp;
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let mut acc = E::zero();
                                            for z in 0..od {
                                                for y in 0..oh {
                                                    let grow = gbase + (z * oh + y) * ow;
                                                    let xrow = xbase
                                                        + ((z * stride + kd) * hp
                                                            + y * stride
                                                            + kh)
                                                            * wp
                                                        + kw;
                                                    for x in 0..ow {
                                                        acc += g[grow + x]
                                                            * xpad[xrow + x * stride];
                                                    }
                                                }
                                            }
                                            gw_slice[ci * k * k * k + (kd * k + kh) * k + kw] +=
                                                acc;
                                        }
                                    }
                                }
                            }
                        }
                    });
            }

            if has_bias {
                if let Some(mut gb) = ctx.parent_grad(2) {
                    for ni in 0..n {
                        for co in 0..cout {
                            let gbase = (ni * cout + co) * od * oh * ow;
                            let mut acc = E::zero();
                            for i in 0..od * oh * ow {
                                acc += g[gbase + i];
                            }
                            gb[co] += acc;
                        }
                    }
                }
            }
        }),
    ))
}

impl<E: Element> Tensor<E> {
    /// Zero-pad the three trailing spatial axes at their far ends.
    pub fn pad3d_end(&self, target: [usize; 3]) -> Result<Tensor<E>> {
        let s = self.shape().to_vec();
        if s.len() != 5 {
            return Err(TensorError::Invalid {
                op: "pad3d_end",
                msg: format!("expected rank 5, got {:?}", s),
            });
        }
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let [td, th, tw] = target;
        if td < d || th < h || tw < w {
            return Err(TensorError::Invalid {
                op: "pad3d_end",
                msg: format!("target {:?} smaller than input {:?}", target, &s[2..]),
            });
        }
        if (td, th, tw) == (d, h, w) {
            return self.reshape(&s);
        }
        let src = self.data();
        let mut out = vec![E::zero(); n * c * td * th * tw];
        for nc in 0..n * c {
            for z in 0..d {
                for y in 0..h {
                    let sidx = nc * d * h * w + (z * h + y) * w;
                    let tidx = nc * td * th * tw + (z * th + y) * tw;
                    out[tidx..tidx + w].copy_from_slice(&src[sidx..sidx + w]);
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![n, c, td, th, tw],
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for nc in 0..n * c {
                        for z in 0..d {
                            for y in 0..h {
                                let gidx = nc * d * h * w + (z * h + y) * w;
                                let oidx = nc * td * th * tw + (z * th + y) * tw;
                                for x in 0..w {
                                    g[gidx + x] += ctx.grad[oidx + x];
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Crop the three trailing spatial axes to `target`, keeping the origin.
    pub fn crop3d(&self, target: [usize; 3]) -> Result<Tensor<E>> {
        let s = self.shape().to_vec();
        if s.len() != 5 {
            return Err(TensorError::Invalid {
                op: "crop3d",
                msg: format!("expected rank 5, got {:?}", s),
            });
        }
        self.narrow(2, 0, target[0])?
            .narrow(3, 0, target[1])?
            .narrow(4, 0, target[2])
    }

    /// Cyclic shift of the spatial axes (positive shifts move content toward
    /// higher indices, wrapping around).
    pub fn roll3d(&self, shift: [isize; 3]) -> Result<Tensor<E>> {
        let s = self.shape().to_vec();
        if s.len() != 5 {
            return Err(TensorError::Invalid {
                op: "roll3d",
                msg: format!("expected rank 5, got {:?}", s),
            });
        }
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let md = |v: isize, m: usize| -> usize {
            let m = m as isize;
            (((v % m) + m) % m) as usize
        };
        let (sd, sh, sw) = (md(shift[0], d), md(shift[1], h), md(shift[2], w));
        if (sd, sh, sw) == (0, 0, 0) {
            return self.reshape(&s);
        }
        let src = self.data();
        let mut out = vec![E::zero(); src.len()];
        for nc in 0..n * c {
            let base = nc * d * h * w;
            for z in 0..d {
                let zs = (z + d - sd) % d;
                for y in 0..h {
                    let ys = (y + h - sh) % h;
                    for x in 0..w {
                        let xs = (x + w - sw) % w;
                        out[base + (z * h + y) * w + x] = src[base + (zs * h + ys) * w + xs];
                    }
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            s,
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for nc in 0..n * c {
                        let base = nc * d * h * w;
                        for z in 0..d {
                            let zs = (z + d - sd) % d;
                            for y in 0..h {
                                let ys = (y + h - sh) % h;
                                for x in 0..w {
                                    let xs = (x + w - sw) % w;
                                    g[base + (zs * h + ys) * w + xs] +=
                                        ctx.grad[base + (z * h + y) * w + x];
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Trilinear 2x upsampling of `[N,C,D,H,W]` (half-voxel-centred sampling,
    /// clamped at borders). A constant volume stays the same constant.
    pub fn upsample_trilinear_2x(&self) -> Result<Tensor<E>> {
        let s = self.shape().to_vec();
        if s.len() != 5 {
            return Err(TensorError::Invalid {
                op: "upsample_trilinear_2x",
                msg: format!("expected rank 5, got {:?}", s),
            });
        }
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        // Destination index i samples source at (i+0.5)/2 - 0.5.
        let axis_taps = |len: usize| -> Vec<(usize, usize, f64)> {
            (0..2 * len)
                .map(|i| {
                    let srcf = (i as f64 + 0.5) / 2.0 - 0.5;
                    let lo = srcf.floor();
                    let t = srcf - lo;
                    let i0 = (lo.max(0.0) as usize).min(len - 1);
                    let i1 = ((lo as isize + 1).max(0) as usize).min(len - 1);
                    (i0, i1, t)
                })
                .collect()
        };
        let taps_d = axis_taps(d);
        let taps_h = axis_taps(h);
        let taps_w = axis_taps(w);

        let src_guard = self.data();
        let src: &[E] = &src_guard;
        let mut out = vec![E::zero(); n * c * od * oh * ow];
        out.par_chunks_mut(od * oh * ow)
            .enumerate()
            .for_each(|(nc, slice)| {
                let base = nc * d * h * w;
                for z in 0..od {
                    let (z0, z1, tz) = taps_d[z];
                    for y in 0..oh {
                        let (y0, y1, ty) = taps_h[y];
                        for x in 0..ow {
                            let (x0, x1, tx) = taps_w[x];
                            let mut acc = 0.0f64;
                            for (zi, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                                for (yi, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                                    for (xi, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                                        acc += wz
                                            * wy
                                            * wx
                                            * src[base + (zi * h + yi) * w + xi].as_f64();
                                    }
                                }
                            }
                            slice[(z * oh + y) * ow + x] = E::of_f64(acc);
                        }
                    }
                }
            });
        drop(src_guard);

        Ok(Tensor::from_op(
            vec![n, c, od, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    let grad: &[E] = ctx.grad;
                    g.par_chunks_mut(d * h * w).enumerate().for_each(|(nc, gslice)| {
                        let base = nc * od * oh * ow;
                        for z in 0..od {
                            let (z0, z1, tz) = taps_d[z];
                            for y in 0..oh {
                                let (y0, y1, ty) = taps_h[y];
                                for x in 0..ow {
                                    let (x0, x1, tx) = taps_w[x];
                                    let gv = grad[base + (z * oh + y) * ow + x].as_f64();
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for (zi, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                                        for (yi, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                                            for (xi, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                                                gslice[(zi * h + yi) * w + xi] +=
                                                    E::of_f64(gv * wz * wy * wx);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }),
        ))
    }
}
