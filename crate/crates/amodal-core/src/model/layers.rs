//! Building blocks for the segmenter: stride-1 convolutions via im2col,
//! 2x2 max pooling, nearest-neighbor upsampling, and channel concatenation,
//! each with a hand-written backward pass. Everything here is deterministic:
//! fixed iteration orders, no threading, ties in pooling broken toward the
//! first candidate in row-major order.

use ndarray::{Array1, Array2, Array3, Axis};

/// Convolution with square kernel, stride 1, symmetric zero padding.
/// Weights are stored flattened as (c_out, c_in * k * k) so the forward pass
/// is a single matrix product against the im2col buffer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize, pad: usize) -> Self {
        Self {
            weight: Array2::zeros((c_out, c_in * kernel * kernel)),
            bias: Array1::zeros(c_out),
            c_in,
            c_out,
            kernel,
            pad,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in);
        let cols = im2col(x, self.kernel, self.pad);
        let mut out = self.weight.dot(&cols);
        for (mut row, &b) in out.outer_iter_mut().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        out.into_shape_with_order((self.c_out, h, w)).unwrap()
    }

    /// Returns (d_input, d_weight, d_bias). `x` must be the forward input.
    pub fn backward(
        &self,
        x: &Array3<f32>,
        d_out: &Array3<f32>,
    ) -> (Array3<f32>, Array2<f32>, Array1<f32>) {
        let (_, h, w) = x.dim();
        let cols = im2col(x, self.kernel, self.pad);
        let dy = d_out
            .view()
            .into_shape_with_order((self.c_out, h * w))
            .unwrap();
        let d_weight = dy.dot(&cols.t());
        let d_bias = dy.sum_axis(Axis(1));
        let d_cols = self.weight.t().dot(&dy);
        let d_x = col2im(&d_cols, self.c_in, h, w, self.kernel, self.pad);
        (d_x, d_weight, d_bias)
    }
}

/// Unfold (c, h, w) into (c * k * k, h * w) patches for stride-1 convolution
/// with the given zero padding. Out-of-bounds taps stay zero.
pub fn im2col(x: &Array3<f32>, k: usize, pad: usize) -> Array2<f32> {
    let (c_in, h, w) = x.dim();
    let hw = h * w;
    let mut cols = Array2::<f32>::zeros((c_in * k * k, hw));
    let xs = x.as_slice().expect("input must be standard layout");
    let cs = cols.as_slice_mut().unwrap();
    for c in 0..c_in {
        for ky in 0..k {
            let dy = ky as isize - pad as isize;
            for kx in 0..k {
                let dx = kx as isize - pad as isize;
                let row_base = ((c * k + ky) * k + kx) * hw;
                let ox_start = if dx < 0 { (-dx) as usize } else { 0 };
                let ox_end = if dx > 0 { w - (dx as usize).min(w) } else { w };
                if ox_start >= ox_end {
                    continue;
                }
                // First input column touched; ox_start + dx >= 0 by
                // construction.
                let col0 = (ox_start as isize + dx) as usize;
                let len = ox_end - ox_start;
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = c * hw + iy as usize * w + col0;
                    let dst = row_base + oy * w + ox_start;
                    cs[dst..dst + len].copy_from_slice(&xs[src..src + len]);
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add patch gradients back onto the input
/// grid.
pub fn col2im(
    d_cols: &Array2<f32>,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> Array3<f32> {
    let hw = h * w;
    let mut d_x = Array3::<f32>::zeros((c_in, h, w));
    let ds = d_x.as_slice_mut().unwrap();
    let cs = d_cols.as_slice().expect("gradient must be standard layout");
    for c in 0..c_in {
        for ky in 0..k {
            let dy = ky as isize - pad as isize;
            for kx in 0..k {
                let dx = kx as isize - pad as isize;
                let row_base = ((c * k + ky) * k + kx) * hw;
                let ox_start = if dx < 0 { (-dx) as usize } else { 0 };
                let ox_end = if dx > 0 { w - (dx as usize).min(w) } else { w };
                if ox_start >= ox_end {
                    continue;
                }
                let col0 = (ox_start as isize + dx) as usize;
                let len = ox_end - ox_start;
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = c * hw + iy as usize * w + col0;
                    let src = row_base + oy * w + ox_start;
                    for i in 0..len {
                        ds[dst + i] += cs[src + i];
                    }
                }
            }
        }
    }
    d_x
}

/// Negative-side slope of the activation. Nonzero so units keep a gradient
/// path even after a large update pushes them negative everywhere.
pub const LEAKY_SLOPE: f32 = 0.1;

pub fn leaky_relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v });
}

/// Backward through the activation given the post-activation output, which
/// has the same sign as the pre-activation input.
pub fn leaky_relu_backward_inplace(d: &mut Array3<f32>, activated: &Array3<f32>) {
    for (g, &a) in d.iter_mut().zip(activated.iter()) {
        if a <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled grid and, per output
/// cell, the flat input index of the winning element (first maximum in
/// row-major window order, so ties are deterministic).
pub fn maxpool2(x: &Array3<f32>) -> (Array3<f32>, Vec<u32>) {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.as_slice().unwrap();
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    let os = out.as_slice_mut().unwrap();
    let mut idx = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = base + (2 * oy) * w + 2 * ox;
                let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = candidates[0];
                let mut best_v = xs[best];
                for &cand in &candidates[1..] {
                    if xs[cand] > best_v {
                        best_v = xs[cand];
                        best = cand;
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                os[o] = best_v;
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(
    d_out: &Array3<f32>,
    idx: &[u32],
    input_dim: (usize, usize, usize),
) -> Array3<f32> {
    let mut d_x = Array3::<f32>::zeros(input_dim);
    let ds = d_x.as_slice_mut().unwrap();
    for (&i, &g) in idx.iter().zip(d_out.as_slice().unwrap()) {
        ds[i as usize] += g;
    }
    d_x
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f32>::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let v = x[[ch, r, col]];
                out[[ch, 2 * r, 2 * col]] = v;
                out[[ch, 2 * r, 2 * col + 1]] = v;
                out[[ch, 2 * r + 1, 2 * col]] = v;
                out[[ch, 2 * r + 1, 2 * col + 1]] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward(d_out: &Array3<f32>) -> Array3<f32> {
    let (c, h2, w2) = d_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut d_x = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                d_x[[ch, r, col]] = d_out[[ch, 2 * r, 2 * col]]
                    + d_out[[ch, 2 * r, 2 * col + 1]]
                    + d_out[[ch, 2 * r + 1, 2 * col]]
                    + d_out[[ch, 2 * r + 1, 2 * col + 1]];
            }
        }
    }
    d_x
}

pub fn concat_channels(a: &Array3<f32>, b: &Array3<f32>) -> Array3<f32> {
    let (ca, h, w) = a.dim();
    let (cb, hb, wb) = b.dim();
    assert_eq!((h, w), (hb, wb));
    let mut out = Array3::<f32>::zeros((ca + cb, h, w));
    out.slice_mut(ndarray::s![..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![ca.., .., ..]).assign(b);
    out
}

pub fn split_channels(d: &Array3<f32>, ca: usize) -> (Array3<f32>, Array3<f32>) {
    let a = d.slice(ndarray::s![..ca, .., ..]).to_owned();
    let b = d.slice(ndarray::s![ca.., .., ..]).to_owned();
    (a, b)
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f32) -> f32 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}
