//! Forward and adjoint kernels on flat row-major buffers.
//!
//! Every routine here is a pure function of its inputs. The tape in
//! [`super::tape`] composes them into differentiable operations.

use super::tensor::{gemm, MatMut, MatRef, Real};

/// Activation applied after a convolution or dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Swish,
    None,
}

impl std::str::FromStr for Activation {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "swish" => Ok(Activation::Swish),
            "none" => Ok(Activation::None),
            other => Err(crate::Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

pub fn activation_forward<T: Real>(kind: Activation, x: &[T]) -> Vec<T> {
    match kind {
        Activation::None => x.to_vec(),
        Activation::Swish => x.iter().map(|&v| v * sigmoid(v)).collect(),
        Activation::Gelu => {
            let half = T::from_f64(0.5);
            let c = T::from_f64(INV_SQRT_2);
            x.iter()
                .map(|&v| v * half * (T::ONE + (v * c).erf()))
                .collect()
        }
    }
}

/// Derivative of the activation evaluated at the pre-activation `x`.
pub fn activation_backward<T: Real>(kind: Activation, x: &[T], g: &[T]) -> Vec<T> {
    match kind {
        Activation::None => g.to_vec(),
        Activation::Swish => x
            .iter()
            .zip(g)
            .map(|(&v, &gv)| {
                let s = sigmoid(v);
                gv * (s + v * s * (T::ONE - s))
            })
            .collect(),
        Activation::Gelu => {
            let half = T::from_f64(0.5);
            let c = T::from_f64(INV_SQRT_2);
            let pdf = T::from_f64(INV_SQRT_2PI);
            x.iter()
                .zip(g)
                .map(|(&v, &gv)| {
                    let cdf = half * (T::ONE + (v * c).erf());
                    let dens = pdf * (-(v * v) * half).exp();
                    gv * (cdf + v * dens)
                })
                .collect()
        }
    }
}

/// Row-wise numerically stable softmax over rows of length `k`.
pub fn softmax_rows<T: Real>(x: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for (src, dst) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        softmax_row_into(src, dst);
    }
    out
}

#[inline]
fn softmax_row_into<T: Real>(src: &[T], dst: &mut [T]) {
    let m = src.iter().copied().fold(src[0], T::max);
    let mut total = T::ZERO;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - m).exp();
        total += *d;
    }
    let inv = T::ONE / total;
    for d in dst.iter_mut() {
        *d *= inv;
    }
}

/// Adjoint of softmax given its output `y` and upstream gradient `g`.
pub fn softmax_rows_backward<T: Real>(y: &[T], g: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; y.len()];
    for ((yr, gr), dr) in y.chunks_exact(k).zip(g.chunks_exact(k)).zip(out.chunks_exact_mut(k)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    out
}

/// Spatial geometry of a stride-1 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad_h + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad_w + 1 - self.kw
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// A 1x1 kernel without padding reads the input directly.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

/// Unfolds `x[C,H,W]` into `cols[C*kh*kw, Ho*Wo]` with zero padding.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut cols = vec![T::ZERO; g.patch_len() * ho * wo];
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    let shift = kx as isize - g.pad_w as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((g.width as isize - shift).min(wo as isize)).max(0) as usize;
                    if lo < hi {
                        let s0 = (lo as isize + shift) as usize;
                        dst_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut x = vec![T::ZERO; g.channels * g.height * g.width];
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src_row = &src[oy * wo..(oy + 1) * wo];
                    let shift = kx as isize - g.pad_w as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((g.width as isize - shift).min(wo as isize)).max(0) as usize;
                    for ox in lo..hi {
                        dst_row[(ox as isize + shift) as usize] += src_row[ox];
                    }
                }
                row += 1;
            }
        }
    }
    x
}

/// `y[Cout, Ho*Wo] = k[Cout, C*kh*kw] * cols + b`.
pub fn conv2d_forward<T: Real>(
    cols: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    cout: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let spatial = g.out_h() * g.out_w();
    let mut y = vec![T::ZERO; cout * spatial];
    if let Some(b) = bias {
        for (o, row) in y.chunks_exact_mut(spatial).enumerate() {
            row.fill(b[o]);
        }
    }
    gemm(
        MatRef::new(kernel, cout, g.patch_len()),
        MatRef::new(cols, g.patch_len(), spatial),
        MatMut::new(&mut y, cout, spatial),
        bias.is_some(),
    );
    y
}

/// Per-axis bilinear sampling table: `(i0, i1, w1)` per output index.
pub fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward<T: Real>(
    x: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_axis(h, oh);
    let tx = bilinear_axis(w, ow);
    let mut out = vec![T::ZERO; channels * oh * ow];
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = T::from_f64(wy);
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = T::from_f64(wx);
                let top = r0[x0] + (r0[x1] - r0[x0]) * wx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * wx;
                dst[oy * ow + ox] = top + (bot - top) * wy;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Real>(
    g: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_axis(h, oh);
    let tx = bilinear_axis(w, ow);
    let mut dx = vec![T::ZERO; channels * h * w];
    for c in 0..channels {
        let src = &g[c * oh * ow..(c + 1) * oh * ow];
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy1 = T::from_f64(wy);
            let wy0 = T::ONE - wy1;
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx1 = T::from_f64(wx);
                let wx0 = T::ONE - wx1;
                let gv = src[oy * ow + ox];
                plane[y0 * w + x0] += gv * wy0 * wx0;
                plane[y0 * w + x1] += gv * wy0 * wx1;
                plane[y1 * w + x0] += gv * wy1 * wx0;
                plane[y1 * w + x1] += gv * wy1 * wx1;
            }
        }
    }
    dx
}

/// Replication padding amounts on the trailing two axes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Pads {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pads {
    /// Bottom/right padding up to the next multiple of `multiple`.
    pub fn to_multiple(h: usize, w: usize, multiple: usize) -> Self {
        Pads {
            top: 0,
            bottom: (multiple - h % multiple) % multiple,
            left: 0,
            right: (multiple - w % multiple) % multiple,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Pads::default()
    }
}

pub fn replication_pad_forward<T: Real>(x: &[T], channels: usize, h: usize, w: usize, p: Pads) -> Vec<T> {
    let (oh, ow) = (h + p.top + p.bottom, w + p.left + p.right);
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            let iy = oy.saturating_sub(p.top).min(h - 1);
            let row = &plane[iy * w..(iy + 1) * w];
            out.extend(std::iter::repeat_n(row[0], p.left));
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(row[w - 1], p.right));
        }
    }
    out
}

pub fn replication_pad_backward<T: Real>(g: &[T], channels: usize, h: usize, w: usize, p: Pads) -> Vec<T> {
    let (oh, ow) = (h + p.top + p.bottom, w + p.left + p.right);
    let mut dx = vec![T::ZERO; channels * h * w];
    for c in 0..channels {
        let src = &g[c * oh * ow..(c + 1) * oh * ow];
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            let iy = oy.saturating_sub(p.top).min(h - 1);
            for ox in 0..ow {
                let ix = ox.saturating_sub(p.left).min(w - 1);
                plane[iy * w + ix] += src[oy * ow + ox];
            }
        }
    }
    dx
}

/// Memory layout of the channel axis for group normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelLayout {
    /// `[C, spatial...]`, as for feature maps.
    First,
    /// `[tokens, C]`, as for transformer sequences.
    Last,
}

/// Saved statistics for the group-norm adjoint.
#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

#[inline]
fn gn_index(layout: ChannelLayout, c: usize, s: usize, channels: usize, spatial: usize) -> usize {
    match layout {
        ChannelLayout::First => c * spatial + s,
        ChannelLayout::Last => s * channels + c,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<T: Real>(
    x: &[T],
    channels: usize,
    spatial: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
    layout: ChannelLayout,
) -> (Vec<T>, GroupNormCache<T>) {
    let per = channels / groups;
    let count = (per * spatial) as f64;
    let mut xhat = vec![T::ZERO; x.len()];
    let mut y = vec![T::ZERO; x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for grp in 0..groups {
        let chans = grp * per..(grp + 1) * per;
        // Shift by the group's first element so constant groups normalize to exactly zero.
        let pivot = x[gn_index(layout, chans.start, 0, channels, spatial)].to_f64();
        let mut shifted = 0.0;
        for c in chans.clone() {
            for s in 0..spatial {
                shifted += x[gn_index(layout, c, s, channels, spatial)].to_f64() - pivot;
            }
        }
        let mean = pivot + shifted / count;
        let mut var = 0.0;
        for c in chans.clone() {
            for s in 0..spatial {
                let d = x[gn_index(layout, c, s, channels, spatial)].to_f64() - mean;
                var += d * d;
            }
        }
        var /= count;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(T::from_f64(inv));
        let (mean_t, inv_t) = (T::from_f64(mean), T::from_f64(inv));
        for c in chans {
            for s in 0..spatial {
                let i = gn_index(layout, c, s, channels, spatial);
                let xh = (x[i] - mean_t) * inv_t;
                xhat[i] = xh;
                y[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    (y, GroupNormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    g: &[T],
    cache: &GroupNormCache<T>,
    channels: usize,
    spatial: usize,
    groups: usize,
    gamma: &[T],
    layout: ChannelLayout,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let per = channels / groups;
    let count = T::from_f64((per * spatial) as f64);
    let mut dx = vec![T::ZERO; g.len()];
    let mut dgamma = vec![T::ZERO; channels];
    let mut dbeta = vec![T::ZERO; channels];
    for grp in 0..groups {
        let chans = grp * per..(grp + 1) * per;
        let mut sum_d = T::ZERO;
        let mut sum_dx = T::ZERO;
        for c in chans.clone() {
            for s in 0..spatial {
                let i = gn_index(layout, c, s, channels, spatial);
                let d = g[i] * gamma[c];
                sum_d += d;
                sum_dx += d * cache.xhat[i];
                dgamma[c] += g[i] * cache.xhat[i];
                dbeta[c] += g[i];
            }
        }
        let inv = cache.inv_std[grp];
        for c in chans {
            for s in 0..spatial {
                let i = gn_index(layout, c, s, channels, spatial);
                let d = g[i] * gamma[c];
                dx[i] = inv / count * (count * d - sum_d - cache.xhat[i] * sum_dx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn avg_pool2_forward<T: Real>(x: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::ZERO; channels * oh * ow];
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * w + 2 * ox;
                out[c * oh * ow + oy * ow + ox] =
                    (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(g: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::ZERO; channels * h * w];
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[c * oh * ow + oy * ow + ox] * quarter;
                let i = c * h * w + 2 * oy * w + 2 * ox;
                dx[i] = gv;
                dx[i + 1] = gv;
                dx[i + w] = gv;
                dx[i + w + 1] = gv;
            }
        }
    }
    dx
}

/// Source offset in `x[C,H,W]` for each element of the patch matrix
/// `[T, C*P*P]`; flattening is channel-major, then row, then column.
pub fn patch_gather_index(channels: usize, h: usize, w: usize, patch: usize) -> Vec<usize> {
    let (gh, gw) = (h / patch, w / patch);
    let feat = channels * patch * patch;
    let mut idx = Vec::with_capacity(gh * gw * feat);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..channels {
                for r in 0..patch {
                    let base = c * h * w + (py * patch + r) * w + px * patch;
                    idx.extend(base..base + patch);
                }
            }
        }
    }
    idx
}

pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Geometry of multi-head attention over `[T, heads*head_dim]` projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnGeom {
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnGeom {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

}

/// Scaled dot-product attention forward. Returns the output `[T, heads*hd]`
/// and the per-head probability matrices `[heads, T, T]` (before dropout).
///
/// `mask`, when present, holds one multiplicative dropout factor per
/// probability entry.
pub fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    geom: AttnGeom,
    mask: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let (t, dh, width) = (geom.tokens, geom.head_dim, geom.width());
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::ZERO; geom.heads * t * t];
    let mut out = vec![T::ZERO; t * width];
    let mut scores = vec![T::ZERO; t * t];
    let mut dropped = vec![T::ZERO; t * t];
    for h in 0..geom.heads {
        let off = h * dh;
        let qh = MatRef::new(q, t, width).cols_slice(off, dh);
        let kh = MatRef::new(k, t, width).cols_slice(off, dh);
        let vh = MatRef::new(v, t, width).cols_slice(off, dh);
        gemm(qh, kh.t(), MatMut::new(&mut scores, t, t), false);
        for s in scores.iter_mut() {
            *s *= scale;
        }
        let p = &mut probs[h * t * t..(h + 1) * t * t];
        for (src, dst) in scores.chunks_exact(t).zip(p.chunks_exact_mut(t)) {
            softmax_row_into(src, dst);
        }
        let used: &[T] = match mask {
            Some(m) => {
                let m = &m[h * t * t..(h + 1) * t * t];
                for ((d, &pv), &mv) in dropped.iter_mut().zip(p.iter()).zip(m) {
                    *d = pv * mv;
                }
                &dropped
            }
            None => p,
        };
        gemm(
            MatRef::new(used, t, t),
            vh,
            MatMut::new(&mut out, t, width).cols_slice(off, dh),
            false,
        );
    }
    (out, probs)
}

/// Attention adjoint. Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    mask: Option<&[T]>,
    g: &[T],
    geom: AttnGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (t, dh, width) = (geom.tokens, geom.head_dim, geom.width());
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::ZERO; q.len()];
    let mut dk = vec![T::ZERO; k.len()];
    let mut dv = vec![T::ZERO; v.len()];
    let mut dropped = vec![T::ZERO; t * t];
    let mut dp = vec![T::ZERO; t * t];
    for h in 0..geom.heads {
        let off = h * dh;
        let p = &probs[h * t * t..(h + 1) * t * t];
        let used: &[T] = match mask {
            Some(m) => {
                let m = &m[h * t * t..(h + 1) * t * t];
                for ((d, &pv), &mv) in dropped.iter_mut().zip(p).zip(m) {
                    *d = pv * mv;
                }
                &dropped
            }
            None => p,
        };
        let gh = MatRef::new(g, t, width).cols_slice(off, dh);
        let vh = MatRef::new(v, t, width).cols_slice(off, dh);
        let qh = MatRef::new(q, t, width).cols_slice(off, dh);
        let kh = MatRef::new(k, t, width).cols_slice(off, dh);
        // dV = P'^T dO
        gemm(
            MatRef::new(used, t, t).t(),
            gh,
            MatMut::new(&mut dv, t, width).cols_slice(off, dh),
            false,
        );
        // dP' = dO V^T, then through the dropout mask
        gemm(gh, vh.t(), MatMut::new(&mut dp, t, t), false);
        if let Some(m) = mask {
            for (d, &mv) in dp.iter_mut().zip(&m[h * t * t..(h + 1) * t * t]) {
                *d *= mv;
            }
        }
        let mut ds = softmax_rows_backward(p, &dp, t);
        for s in ds.iter_mut() {
            *s *= scale;
        }
        gemm(
            MatRef::new(&ds, t, t),
            kh,
            MatMut::new(&mut dq, t, width).cols_slice(off, dh),
            false,
        );
        gemm(
            MatRef::new(&ds, t, t).t(),
            qh,
            MatMut::new(&mut dk, t, width).cols_slice(off, dh),
            false,
        );
    }
    (dq, dk, dv)
}
