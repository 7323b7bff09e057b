//! Normalization, affine layers, dropout, and attention-support ops.

use std::rc::Rc;

use super::{matmul, Element, Result, Tensor, TensorError};

/// Affine layer: `x [B,Fin] @ weight [Fin,Fout] + bias [Fout]`.
pub fn linear<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let y = matmul(x, weight)?;
    match bias {
        Some(b) => y.add_broadcast(b),
        None => Ok(y),
    }
}

fn norm_backward<E: Element>(
    mut gx: Option<&mut [E]>,
    mut ggamma: Option<&mut [E]>,
    mut gbeta: Option<&mut [E]>,
    grad: &[E],
    x: &[E],
    gamma: &[E],
    stats: &[(E, E)],
    group: usize,
    feat_of: impl Fn(usize, usize) -> usize,
) {
    let m = E::of_usize(group);
    for (r, &(mean, inv_std)) in stats.iter().enumerate() {
        let base = r * group;
        let mut sum_dxhat = E::zero();
        let mut sum_dxhat_xhat = E::zero();
        for i in 0..group {
            let xhat = (x[base + i] - mean) * inv_std;
            let dxhat = grad[base + i] * gamma[feat_of(r, i)];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        if let Some(gx) = gx.as_deref_mut() {
            for i in 0..group {
                let xhat = (x[base + i] - mean) * inv_std;
                let dxhat = grad[base + i] * gamma[feat_of(r, i)];
                gx[base + i] += inv_std / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
        if let Some(gg) = ggamma.as_deref_mut() {
            for i in 0..group {
                let xhat = (x[base + i] - mean) * inv_std;
                gg[feat_of(r, i)] += grad[base + i] * xhat;
            }
        }
        if let Some(gb) = gbeta.as_deref_mut() {
            for i in 0..group {
                gb[feat_of(r, i)] += grad[base + i];
            }
        }
    }
}

/// Instance normalization over the spatial axes of `[N,C,D,H,W]` with learned
/// per-channel scale and shift.
pub fn instance_norm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> Result<Tensor<E>> {
    let s = x.shape().to_vec();
    if s.len() < 3 {
        return Err(TensorError::Invalid {
            op: "instance_norm",
            msg: format!("expected rank >= 3, got {:?}", s),
        });
    }
    let (n, c) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::AxisMismatch {
            op: "instance_norm",
            axis: 1,
            expected: c,
            got: gamma.shape().first().copied().unwrap_or(0),
        });
    }
    let m = E::of_usize(spatial);
    let src = x.data();
    let gv = gamma.data();
    let bv = beta.data();
    let mut out = vec![E::zero(); src.len()];
    let mut stats = Vec::with_capacity(n * c);
    for nc in 0..n * c {
        let base = nc * spatial;
        let mut mean = E::zero();
        for i in 0..spatial {
            mean += src[base + i];
        }
        mean = mean / m;
        let mut var = E::zero();
        for i in 0..spatial {
            let d = src[base + i] - mean;
            var += d * d;
        }
        var = var / m;
        let inv_std = E::one() / (var + eps).sqrt();
        stats.push((mean, inv_std));
        let ch = nc % c;
        for i in 0..spatial {
            out[base + i] = (src[base + i] - mean) * inv_std * gv[ch] + bv[ch];
        }
    }
    drop(src);
    drop(gv);
    drop(bv);
    Ok(Tensor::from_op(
        s,
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |ctx| {
            let x = ctx.parents[0].data();
            let gamma = ctx.parents[1].data();
            let mut gx = ctx.parent_grad(0);
            let mut gg = ctx.parent_grad(1);
            let mut gb = ctx.parent_grad(2);
            norm_backward(
                gx.as_deref_mut().map(|v| v.as_mut_slice()),
                gg.as_deref_mut().map(|v| v.as_mut_slice()),
                gb.as_deref_mut().map(|v| v.as_mut_slice()),
                ctx.grad,
                &x,
                &gamma,
                &stats,
                spatial,
                |r, _| r % c,
            );
        }),
    ))
}

/// Layer normalization over the trailing axis with learned scale and shift.
pub fn layer_norm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> Result<Tensor<E>> {
    let s = x.shape().to_vec();
    let f = *s.last().ok_or(TensorError::Invalid {
        op: "layer_norm",
        msg: "rank 0 input".into(),
    })?;
    if gamma.shape() != [f] || beta.shape() != [f] {
        return Err(TensorError::AxisMismatch {
            op: "layer_norm",
            axis: s.len() - 1,
            expected: f,
            got: gamma.shape().first().copied().unwrap_or(0),
        });
    }
    let rows = x.numel() / f;
    let m = E::of_usize(f);
    let src = x.data();
    let gv = gamma.data();
    let bv = beta.data();
    let mut out = vec![E::zero(); src.len()];
    let mut stats = Vec::with_capacity(rows);
    for r in 0..rows {
        let base = r * f;
        let mut mean = E::zero();
        for i in 0..f {
            mean += src[base + i];
        }
        mean = mean / m;
        let mut var = E::zero();
        for i in 0..f {
            let d = src[base + i] - mean;
            var += d * d;
        }
        var = var / m;
        let inv_std = E::one() / (var + eps).sqrt();
        stats.push((mean, inv_std));
        for i in 0..f {
            out[base + i] = (src[base + i] - mean) * inv_std * gv[i] + bv[i];
        }
    }
    drop(src);
    drop(gv);
    drop(bv);
    Ok(Tensor::from_op(
        s,
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |ctx| {
            let x = ctx.parents[0].data();
            let gamma = ctx.parents[1].data();
            let mut gx = ctx.parent_grad(0);
            let mut gg = ctx.parent_grad(1);
            let mut gb = ctx.parent_grad(2);
            norm_backward(
                gx.as_deref_mut().map(|v| v.as_mut_slice()),
                gg.as_deref_mut().map(|v| v.as_mut_slice()),
                gb.as_deref_mut().map(|v| v.as_mut_slice()),
                ctx.grad,
                &x,
                &gamma,
                &stats,
                f,
                |_, i| i,
            );
        }),
    ))
}

/// Inverted dropout: in train mode, kept elements scale by `1/(1-p)` so the
/// expected output equals the input; in eval mode this is the identity.
pub fn dropout<E: Element>(
    x: &Tensor<E>,
    p: f64,
    train: bool,
    rng: &mut impl rand::Rng,
) -> Tensor<E> {
    if !train || p <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 - p;
    let scale = E::of_f64(1.0 / keep);
    let mask: Vec<E> = (0..x.numel())
        .map(|_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                E::zero()
            }
        })
        .collect();
    dropout_with_mask(x, mask)
}

/// Dropout with a caller-provided mask of per-element multipliers.
pub fn dropout_with_mask<E: Element>(x: &Tensor<E>, mask: Vec<E>) -> Tensor<E> {
    assert_eq!(mask.len(), x.numel());
    let data: Vec<E> = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(&a, &m)| a * m)
        .collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |ctx| {
            if let Some(mut g) = ctx.parent_grad(0) {
                for i in 0..g.len() {
                    g[i] += ctx.grad[i] * mask[i];
                }
            }
        }),
    )
}

/// Additive attention mask shared across heads: `x [B,h,T,T]` plus
/// `mask [nW,T,T]` where the window index is `batch % nW`. Disallowed
/// positions hold a large negative value so softmax sends them to zero.
pub fn add_window_mask<E: Element>(x: &Tensor<E>, mask: Rc<Vec<E>>, n_windows: usize) -> Result<Tensor<E>> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(TensorError::Invalid {
            op: "add_window_mask",
            msg: format!("expected [B,heads,T,T], got {:?}", s),
        });
    }
    let (b, heads, tq, tk) = (s[0], s[1], s[2], s[3]);
    if mask.len() != n_windows * tq * tk || b % n_windows != 0 {
        return Err(TensorError::Invalid {
            op: "add_window_mask",
            msg: format!(
                "mask of {} values incompatible with {} windows over batch {}",
                mask.len(),
                n_windows,
                b
            ),
        });
    }
    let tt = tq * tk;
    let data: Vec<E> = {
        let src = x.data();
        let mut out = vec![E::zero(); src.len()];
        for bi in 0..b {
            let wbase = (bi % n_windows) * tt;
            for hi in 0..heads {
                let base = (bi * heads + hi) * tt;
                for i in 0..tt {
                    out[base + i] = src[base + i] + mask[wbase + i];
                }
            }
        }
        out
    };
    Ok(Tensor::from_op(
        s,
        data,
        vec![x.clone()],
        Box::new(|ctx| {
            if let Some(mut g) = ctx.parent_grad(0) {
                for (gp, &go) in g.iter_mut().zip(ctx.grad) {
                    *gp += go;
                }
            }
        }),
    ))
}
