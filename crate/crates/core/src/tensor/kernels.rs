//! NCHW convolution, transposed convolution, batch norm and pooling.
//!
//! Forward kernels parallelize over output planes and backward kernels over
//! the planes of the gradient being written, so every output element is
//! produced by exactly one task and results do not depend on scheduling.

use super::{Graph, Op, Tensor, Var};
use crate::error::{invalid, shape_err, Result};
use crate::par;

pub const BN_DEFAULT_EPS: f64 = 1e-5;

/// Stride, zero padding and dilation of a square 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom { stride: 1, padding: 0, dilation: 1 }
    }
}

impl ConvGeom {
    /// 3×3-style "same" geometry: padding equal to dilation.
    pub fn same_dilated(dilation: usize) -> Self {
        ConvGeom { stride: 1, padding: dilation, dilation }
    }

    /// `floor((len + 2p − d(k−1) − 1)/s) + 1`, or `None` when the kernel
    /// does not fit.
    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Output indices `o` with `0 <= o*stride + offset < in_len`, as a half-open range.
#[inline]
fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let room = in_len as isize - offset;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let hi = (hi as usize).min(out_len);
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(shape_err!("{what} must be 4-D, got {shape:?}")),
    }
}

impl Graph {
    /// Cross-correlation of `x: [N,C,H,W]` with `w: [O,C,KH,KW]` plus optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(invalid!("stride and dilation must be >= 1"));
        }
        let [n, c, h, wd] = dims4(self.shape(x), "conv2d input")?;
        let [oc, ic, kh, kw] = dims4(self.shape(w), "conv2d weight")?;
        if ic != c {
            return Err(shape_err!("conv2d: input has {c} channels, weight expects {ic}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [oc] {
                return Err(shape_err!("conv2d bias must be [{oc}], got {:?}", self.shape(b)));
            }
        }
        let (oh, ow) = match (geom.out_len(h, kh), geom.out_len(wd, kw)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape_err!("conv2d: kernel {kh}x{kw} does not fit {h}x{wd} input")),
        };

        let (xd, wdat) = (self.data(x), self.data(w));
        let bias = b.map(|b| self.data(b));
        let plane = oh * ow;
        let mut out = vec![0.0; n * oc * plane];
        let exec = par::for_work(self.exec, n * oc * plane * c * kh * kw);
        let (s, p, d) = (geom.stride, geom.padding as isize, geom.dilation);
        par::for_each_chunk_mut(exec, &mut out, plane, |idx, dst| {
            let (ni, oi) = (idx / oc, idx % oc);
            if let Some(bias) = bias {
                dst.fill(bias[oi]);
            }
            for ci in 0..c {
                let xp = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                for ky in 0..kh {
                    let off_y = (ky * d) as isize - p;
                    let (y0, y1) = valid_range(oh, h, off_y, s);
                    for kx in 0..kw {
                        let wv = wdat[((oi * c + ci) * kh + ky) * kw + kx];
                        let off_x = (kx * d) as isize - p;
                        let (x0, x1) = valid_range(ow, wd, off_x, s);
                        for oy in y0..y1 {
                            let iy = ((oy * s) as isize + off_y) as usize;
                            let row = &xp[iy * wd..(iy + 1) * wd];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                drow[ox] += wv * row[((ox * s) as isize + off_x) as usize];
                            }
                        }
                    }
                }
            }
        });
        let t = Tensor::new(&[n, oc, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed convolution of `x: [N,Ci,H,W]` with `w: [Ci,Co,K,K]`, no
    /// padding; output is `[(H−1)·stride + K, (W−1)·stride + K]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(invalid!("stride must be >= 1"));
        }
        let [n, c, h, wd] = dims4(self.shape(x), "conv_transpose2d input")?;
        let [ic, oc, kh, kw] = dims4(self.shape(w), "conv_transpose2d weight")?;
        if ic != c {
            return Err(shape_err!("conv_transpose2d: input has {c} channels, weight expects {ic}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [oc] {
                return Err(shape_err!("conv_transpose2d bias must be [{oc}]"));
            }
        }
        let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        let (xd, wdat) = (self.data(x), self.data(w));
        let bias = b.map(|b| self.data(b));
        let plane = oh * ow;
        let mut out = vec![0.0; n * oc * plane];
        let exec = par::for_work(self.exec, n * oc * h * wd * c * kh * kw);
        par::for_each_chunk_mut(exec, &mut out, plane, |idx, dst| {
            let (ni, oi) = (idx / oc, idx % oc);
            if let Some(bias) = bias {
                dst.fill(bias[oi]);
            }
            for ci in 0..c {
                let xp = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[((ci * oc + oi) * kh + ky) * kw + kx];
                        for iy in 0..h {
                            let orow = (iy * stride + ky) * ow + kx;
                            for ix in 0..wd {
                                dst[orow + ix * stride] += wv * xp[iy * wd + ix];
                            }
                        }
                    }
                }
            }
        });
        let t = Tensor::new(&[n, oc, oh, ow], out)?;
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, stride }))
    }

    /// Training-mode batch norm over every axis but 1.
    ///
    /// Returns the normalized output together with the batch mean and the
    /// biased batch variance per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, inner) = self.bn_dims(x, gamma, beta)?;
        let m = n * inner;
        if m < 2 {
            return Err(invalid!("batch norm in train mode needs at least 2 values per channel, got {m}"));
        }
        let xd = self.data(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                mean[ci] += xd[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                var[ci] += xd[base..base + inner].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let out = self.bn_apply(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, mean, var))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("batch norm statistics must have {c} entries"));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(invalid!("running variance must be non-negative"));
        }
        self.bn_apply(x, gamma, beta, mean, var, eps, false)
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(shape_err!("batch norm input needs a channel axis, got {s:?}"));
        }
        let (n, c) = (s[0], s[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!("batch norm affine params must be [{c}]"));
        }
        Ok((n, c, s[2..].iter().product()))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        train: bool,
    ) -> Result<Var> {
        let (n, c, inner) = self.bn_dims(x, gamma, beta)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for k in base..base + inner {
                    xhat[k] = (xd[k] - mean[ci]) * inv_std[ci];
                    out[k] = g[ci] * xhat[k] + b[ci];
                }
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x), "avg_pool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("avg_pool2 needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, xx) = (2 * oy, 2 * ox);
                    out[(p * oh + oy) * ow + ox] =
                        0.25 * (src[y * w + xx] + src[y * w + xx + 1] + src[(y + 1) * w + xx] + src[(y + 1) * w + xx + 1]);
                }
            }
        }
        let t = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(t, Op::AvgPool2 { x }))
    }
}

pub(super) fn conv2d_grad_input(exec: par::Execution, gout: &[f64], w: &[f64], xs: &[usize], ws: &[usize], geom: &ConvGeom, gx: &mut [f64]) {
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = geom.out_len(h, kh).unwrap();
    let ow = geom.out_len(wd, kw).unwrap();
    let (s, p, d) = (geom.stride, geom.padding as isize, geom.dilation);
    let exec = par::for_work(exec, n * oc * oh * ow * c * kh * kw);
    par::for_each_chunk_mut(exec, &mut gx[..n * c * h * wd], h * wd, |idx, gxp| {
        let (ni, ci) = (idx / c, idx % c);
        for oi in 0..oc {
            let gp = &gout[(ni * oc + oi) * oh * ow..(ni * oc + oi + 1) * oh * ow];
            for ky in 0..kh {
                let off_y = (ky * d) as isize - p;
                let (y0, y1) = valid_range(oh, h, off_y, s);
                for kx in 0..kw {
                    let wv = w[((oi * c + ci) * kh + ky) * kw + kx];
                    let off_x = (kx * d) as isize - p;
                    let (x0, x1) = valid_range(ow, wd, off_x, s);
                    for oy in y0..y1 {
                        let iy = ((oy * s) as isize + off_y) as usize;
                        for ox in x0..x1 {
                            let ix = ((ox * s) as isize + off_x) as usize;
                            gxp[iy * wd + ix] += wv * gp[oy * ow + ox];
                        }
                    }
                }
            }
        }
    });
}

pub(super) fn conv2d_grad_weight(exec: par::Execution, gout: &[f64], x: &[f64], xs: &[usize], ws: &[usize], geom: &ConvGeom, gw: &mut [f64]) {
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = geom.out_len(h, kh).unwrap();
    let ow = geom.out_len(wd, kw).unwrap();
    let (s, p, d) = (geom.stride, geom.padding as isize, geom.dilation);
    let exec = par::for_work(exec, n * oc * oh * ow * c * kh * kw);
    par::for_each_chunk_mut(exec, &mut gw[..oc * c * kh * kw], c * kh * kw, |oi, gwo| {
        for ni in 0..n {
            let gp = &gout[(ni * oc + oi) * oh * ow..(ni * oc + oi + 1) * oh * ow];
            for ci in 0..c {
                let xp = &x[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                for ky in 0..kh {
                    let off_y = (ky * d) as isize - p;
                    let (y0, y1) = valid_range(oh, h, off_y, s);
                    for kx in 0..kw {
                        let off_x = (kx * d) as isize - p;
                        let (x0, x1) = valid_range(ow, wd, off_x, s);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = ((oy * s) as isize + off_y) as usize;
                            let row = &xp[iy * wd..(iy + 1) * wd];
                            let grow = &gp[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                acc += grow[ox] * row[((ox * s) as isize + off_x) as usize];
                            }
                        }
                        gwo[(ci * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });
}

/// Sums `gout` over every axis but 1.
pub(super) fn bias_grad(gout: &[f64], out_shape: &[usize], gb: &mut [f64]) {
    let (n, c) = (out_shape[0], out_shape[1]);
    let inner: usize = out_shape[2..].iter().product();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            gb[ci] += gout[base..base + inner].iter().sum::<f64>();
        }
    }
}

pub(super) fn conv_t_grad_input(exec: par::Execution, gout: &[f64], w: &[f64], xs: &[usize], ws: &[usize], stride: usize, gx: &mut [f64]) {
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, kh, kw) = (ws[1], ws[2], ws[3]);
    let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
    let exec = par::for_work(exec, n * oc * h * wd * c * kh * kw);
    par::for_each_chunk_mut(exec, &mut gx[..n * c * h * wd], h * wd, |idx, gxp| {
        let (ni, ci) = (idx / c, idx % c);
        for oi in 0..oc {
            let gp = &gout[(ni * oc + oi) * oh * ow..(ni * oc + oi + 1) * oh * ow];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w[((ci * oc + oi) * kh + ky) * kw + kx];
                    for iy in 0..h {
                        let orow = (iy * stride + ky) * ow + kx;
                        for ix in 0..wd {
                            gxp[iy * wd + ix] += wv * gp[orow + ix * stride];
                        }
                    }
                }
            }
        }
    });
}

pub(super) fn conv_t_grad_weight(exec: par::Execution, gout: &[f64], x: &[f64], xs: &[usize], ws: &[usize], stride: usize, gw: &mut [f64]) {
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, kh, kw) = (ws[1], ws[2], ws[3]);
    let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
    let exec = par::for_work(exec, n * oc * h * wd * c * kh * kw);
    par::for_each_chunk_mut(exec, &mut gw[..c * oc * kh * kw], oc * kh * kw, |ci, gwc| {
        for ni in 0..n {
            let xp = &x[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
            for oi in 0..oc {
                let gp = &gout[(ni * oc + oi) * oh * ow..(ni * oc + oi + 1) * oh * ow];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for iy in 0..h {
                            let orow = (iy * stride + ky) * ow + kx;
                            for ix in 0..wd {
                                acc += xp[iy * wd + ix] * gp[orow + ix * stride];
                            }
                        }
                        gwc[(oi * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });
}

pub(super) fn bn_grad_input(
    gout: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    shape: &[usize],
    train: bool,
    gx: &mut [f64],
) {
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let m = (n * inner) as f64;
    for ci in 0..c {
        let scale = gamma[ci] * inv_std[ci];
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        if train {
            for ni in 0..n {
                let base = (ni * c + ci) * inner;
                for k in base..base + inner {
                    sum_dy += gout[k];
                    sum_dy_xhat += gout[k] * xhat[k];
                }
            }
        }
        for ni in 0..n {
            let base = (ni * c + ci) * inner;
            for k in base..base + inner {
                gx[k] += if train {
                    scale / m * (m * gout[k] - sum_dy - xhat[k] * sum_dy_xhat)
                } else {
                    scale * gout[k]
                };
            }
        }
    }
}

pub(super) fn bn_grad_gamma(gout: &[f64], xhat: &[f64], shape: &[usize], gg: &mut [f64]) {
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            gg[ci] += (base..base + inner).map(|k| gout[k] * xhat[k]).sum::<f64>();
        }
    }
}

pub(super) fn avg_pool2_grad(gout: &[f64], xs: &[usize], gx: &mut [f64]) {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                gx[(p * h + y) * w + x] += 0.25 * gout[(p * oh + y / 2) * ow + x / 2];
            }
        }
    }
}
