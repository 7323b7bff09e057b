//! Pooling over the three trailing spatial axes.

use super::{Element, Result, Tensor, TensorError};

fn check_pool<E: Element>(
    op: &'static str,
    x: &Tensor<E>,
    kernel: usize,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("expected rank 5, got {:?}", s),
        });
    }
    if kernel == 0 || stride == 0 {
        return Err(TensorError::Invalid {
            op,
            msg: "kernel and stride must be >= 1".into(),
        });
    }
    if s[2] < kernel || s[3] < kernel || s[4] < kernel {
        return Err(TensorError::Invalid {
            op,
            msg: format!("kernel {} larger than spatial dims {:?}", kernel, &s[2..]),
        });
    }
    Ok((s[0], s[1], s[2], s[3], s[4]))
}

fn pool_out(dim: usize, kernel: usize, stride: usize) -> usize {
    (dim - kernel) / stride + 1
}

impl<E: Element> Tensor<E> {
    /// Max pooling (no padding). Ties route the gradient to the first maximum.
    pub fn max_pool3d(&self, kernel: usize, stride: usize) -> Result<Tensor<E>> {
        let (n, c, d, h, w) = check_pool("max_pool3d", self, kernel, stride)?;
        let (od, oh, ow) = (
            pool_out(d, kernel, stride),
            pool_out(h, kernel, stride),
            pool_out(w, kernel, stride),
        );
        let src = self.data();
        let mut out = vec![E::zero(); n * c * od * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for nc in 0..n * c {
            let base = nc * d * h * w;
            let obase = nc * od * oh * ow;
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best = E::neg_infinity();
                        let mut best_idx = 0;
                        for kd in 0..kernel {
                            for kh in 0..kernel {
                                for kw in 0..kernel {
                                    let idx = base
                                        + ((z * stride + kd) * h + y * stride + kh) * w
                                        + x * stride
                                        + kw;
                                    if src[idx] > best {
                                        best = src[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out[obase + (z * oh + y) * ow + x] = best;
                        argmax[obase + (z * oh + y) * ow + x] = best_idx;
                    }
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![n, c, od, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for (i, &src_idx) in argmax.iter().enumerate() {
                        g[src_idx] += ctx.grad[i];
                    }
                }
            }),
        ))
    }

    /// Average pooling (no padding).
    pub fn avg_pool3d(&self, kernel: usize, stride: usize) -> Result<Tensor<E>> {
        let (n, c, d, h, w) = check_pool("avg_pool3d", self, kernel, stride)?;
        let (od, oh, ow) = (
            pool_out(d, kernel, stride),
            pool_out(h, kernel, stride),
            pool_out(w, kernel, stride),
        );
        let kvol = E::of_usize(kernel * kernel * kernel);
        let src = self.data();
        let mut out = vec![E::zero(); n * c * od * oh * ow];
        for nc in 0..n * c {
            let base = nc * d * h * w;
            let obase = nc * od * oh * ow;
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = E::zero();
                        for kd in 0..kernel {
                            for kh in 0..kernel {
                                for kw in 0..kernel {
                                    acc += src[base
                                        + ((z * stride + kd) * h + y * stride + kh) * w
                                        + x * stride
                                        + kw];
                                }
                            }
                        }
                        out[obase + (z * oh + y) * ow + x] = acc / kvol;
                    }
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![n, c, od, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for nc in 0..n * c {
                        let base = nc * d * h * w;
                        let obase = nc * od * oh * ow;
                        for z in 0..od {
                            for y in 0..oh {
                                for x in 0..ow {
                                    let gv = ctx.grad[obase + (z * oh + y) * ow + x] / kvol;
                                    for kd in 0..kernel {
                                        for kh in 0..kernel {
                                            for kw in 0..kernel {
                                                g[base
                                                    + ((z * stride + kd) * h + y * stride + kh)
                                                        * w
                                                    + x * stride
                                                    + kw] += gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Mean over the three spatial axes: `[N,C,D,H,W] -> [N,C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<E>> {
        let s = self.shape().to_vec();
        if s.len() != 5 {
            return Err(TensorError::Invalid {
                op: "global_avg_pool",
                msg: format!("expected rank 5, got {:?}", s),
            });
        }
        let (n, c) = (s[0], s[1]);
        let spatial = s[2] * s[3] * s[4];
        let sp = E::of_usize(spatial);
        let src = self.data();
        let mut out = vec![E::zero(); n * c];
        for nc in 0..n * c {
            let mut acc = E::zero();
            for i in 0..spatial {
                acc += src[nc * spatial + i];
            }
            out[nc] = acc / sp;
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![n, c],
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                if let Some(mut g) = ctx.parent_grad(0) {
                    for nc in 0..n * c {
                        let gv = ctx.grad[nc] / sp;
                        for i in 0..spatial {
                            g[nc * spatial + i] += gv;
                        }
                    }
                }
            }),
        ))
    }
}
