//! Slice-level numeric kernels shared by the autodiff graph and the
//! value-level APIs.

use crate::tensor::Float;

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        (batch, in_ch, in_h, in_w): (usize, usize, usize, usize),
        (k_h, k_w): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || in_h + 2 * pad < k_h || in_w + 2 * pad < k_w {
            return None;
        }
        Some(Self {
            batch,
            in_ch,
            in_h,
            in_w,
            k_h,
            k_w,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k_h) / stride + 1,
            out_w: (in_w + 2 * pad - k_w) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    pub fn columns(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds `x` into a `[patch_len, batch * out_h * out_w]` matrix.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.columns();
    let plane_out = g.out_h * g.out_w;
    let mut cols = vec![T::zero(); g.patch_len() * ncols];
    for c in 0..g.in_ch {
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let dst = &mut dst_row[b * plane_out..(b + 1) * plane_out];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                        let dst_seg = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                        for (ow, d) in dst_seg.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.in_w as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.columns();
    let plane_out = g.out_h * g.out_w;
    let mut x = vec![T::zero(); g.batch * g.in_ch * g.in_h * g.in_w];
    for c in 0..g.in_ch {
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let row = (c * g.k_h + ki) * g.k_w + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let src = &src_row[b * plane_out..(b + 1) * plane_out];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                        let src_seg = &src[oh * g.out_w..(oh + 1) * g.out_w];
                        for (ow, &s) in src_seg.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.in_w as isize {
                                dst_row[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Per-plane mean over contiguous planes of length `plane`.
pub(crate) fn plane_means<T: Float>(x: &[T], plane: usize) -> Vec<T> {
    let n = T::cst(plane as f64);
    x.chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() / n)
        .collect()
}

/// Per-plane population standard deviation with `eps` added to the variance.
pub(crate) fn plane_stds<T: Float>(x: &[T], means: &[T], plane: usize, eps: T) -> Vec<T> {
    let n = T::cst(plane as f64);
    x.chunks_exact(plane)
        .zip(means)
        .map(|(p, &m)| {
            let var = p.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
            (var + eps).sqrt()
        })
        .collect()
}

/// Backward of a normalization `xhat = (x - mean) / sqrt(var + eps)` over
/// groups of size `n`, given the upstream gradient on `xhat`:
/// `dx = inv_std / n * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))`.
pub(crate) fn normalize_backward<T: Float>(
    dxhat_sum: T,
    dxhat_xhat_sum: T,
    inv_std: T,
    n: usize,
    dxhat: T,
    xhat: T,
) -> T {
    let nf = T::cst(n as f64);
    inv_std / nf * (nf * dxhat - dxhat_sum - xhat * dxhat_xhat_sum)
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
