//! Raw numeric kernels behind the tape operations. Everything here works on
//! plain slices; shape validation happens in the tape layer.

use crate::error::{Error, Result};

/// Output extent of a convolution along one axis: `floor((input + 2·padding − kernel) / stride) + 1`.
/// Trailing input rows that cannot host a full window are ignored.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return Err(Error::Config(format!(
            "convolution of extent {input} with kernel {kernel}, stride {stride}, padding {padding} \
             has no valid output position"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// `c[m,n] = op(a)[m,k] · op(b)[k,n]`, where `op` optionally transposes the
/// row-major storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: pointer extents match the checked slice lengths for the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.batch * self.oh * self.ow
    }
}

/// Lays input patches out as `[in_ch·k·k, batch·oh·ow]`.
fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let ncols = g.cols();
    let plane = g.oh * g.ow;
    let mut cols = vec![0.0f32; g.patch() * ncols];
    for c in 0..g.in_ch {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.in_ch + c) * g.h * g.w..(b * g.in_ch + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds patch columns back onto the input grid (adjoint of `im2col`).
fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let ncols = g.cols();
    let plane = g.oh * g.ow;
    let mut x = vec![0.0f32; g.batch * g.in_ch * g.h * g.w];
    for c in 0..g.in_ch {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.in_ch + c) * g.h * g.w..(b * g.in_ch + c + 1) * g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[batch, out_ch, oh·ow]` <-> `[out_ch, batch·oh·ow]`.
fn batch_to_channel_major(y: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0f32; y.len()];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let src = &y[(b * g.out_ch + o) * plane..(b * g.out_ch + o + 1) * plane];
            out[o * g.batch * plane + b * plane..o * g.batch * plane + (b + 1) * plane]
                .copy_from_slice(src);
        }
    }
    out
}

fn channel_to_batch_major(y: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0f32; y.len()];
    for o in 0..g.out_ch {
        for b in 0..g.batch {
            let src = &y[o * g.batch * plane + b * plane..o * g.batch * plane + (b + 1) * plane];
            out[(b * g.out_ch + o) * plane..(b * g.out_ch + o + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// Cross-correlation with zero padding: `[B,Cin,H,W] ⋆ [Cout,Cin,K,K]`.
pub(crate) fn conv2d(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = im2col(x, g);
    let mut y = vec![0.0f32; g.out_ch * g.cols()];
    gemm(g.out_ch, g.patch(), g.cols(), w, false, &cols, false, &mut y);
    channel_to_batch_major(&y, g)
}

/// Gradient of `conv2d` with respect to its input, given the output gradient.
pub(crate) fn conv2d_input_grad(gy: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let gmat = batch_to_channel_major(gy, g);
    let mut dcols = vec![0.0f32; g.patch() * g.cols()];
    gemm(g.patch(), g.out_ch, g.cols(), w, true, &gmat, false, &mut dcols);
    col2im(&dcols, g)
}

/// Gradient of `conv2d` with respect to its kernel, given input and output gradient.
pub(crate) fn conv2d_weight_grad(x: &[f32], gy: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = im2col(x, g);
    let gmat = batch_to_channel_major(gy, g);
    let mut dw = vec![0.0f32; g.out_ch * g.patch()];
    gemm(g.out_ch, g.cols(), g.patch(), &gmat, false, &cols, true, &mut dw);
    dw
}

/// Nearest-neighbour 2× upsampling of `[planes, h, w]`.
pub(crate) fn upsample2x(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let base = 2 * y * ow + 2 * xx;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + ow] = v;
                dst[base + ow + 1] = v;
            }
        }
    }
    out
}

/// 2×2 sum pooling of `[planes, h, w]` (adjoint of `upsample2x`).
pub(crate) fn sumpool2x(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = src[base] + src[base + 1] + src[base + w] + src[base + w + 1];
            }
        }
    }
    out
}
