//! Forward and backward kernels shared by the tape and the tape-free
//! evaluation path.

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` logically `m×k`
/// and `b` logically `k×n`. Transposed operands are read in place.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are exactly m*k, k*n and m*n long and the strides
    // above address them in bounds.
    unsafe {
        matrixmultiply::dgemm(
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `x` (B×C×H×W) into a `(C·k·k) × (B·OH·OW)` column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let ncols = g.batch * p;
    let mut cols = vec![0.0; g.patch_len() * ncols];
    let k = g.kernel;
    for c in 0..g.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[ih as usize * g.width..][..g.width];
                        let base = b * p + oh * g.out_w;
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.width as isize {
                                dst[base + ow] = src_row[iw as usize];
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
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.positions();
    let ncols = g.batch * p;
    let k = g.kernel;
    for c in 0..g.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane_off = (b * g.in_ch + c) * g.height * g.width;
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let row_off = plane_off + ih as usize * g.width;
                        let base = b * p + oh * g.out_w;
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.width as isize {
                                dx[row_off + iw as usize] += src[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. Returns the output in B×F×OH×OW layout together with
/// the unfolded input needed by the backward pass.
pub(crate) fn conv_forward(
    x: &[f64],
    kernels: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let p = g.positions();
    let ncols = g.batch * p;
    // F × (B·P)
    let mut fbp = vec![0.0; g.filters * ncols];
    gemm(g.filters, g.patch_len(), ncols, kernels, false, &cols, false, &mut fbp, false);
    let mut out = vec![0.0; g.batch * g.filters * p];
    for f in 0..g.filters {
        let shift = bias.map_or(0.0, |b| b[f]);
        for b in 0..g.batch {
            let src = &fbp[f * ncols + b * p..][..p];
            let dst = &mut out[(b * g.filters + f) * p..][..p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + shift;
            }
        }
    }
    (out, cols)
}

/// Rearranges a B×F×P upstream gradient into F×(B·P).
pub(crate) fn to_filter_major(dout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let ncols = g.batch * p;
    let mut fbp = vec![0.0; g.filters * ncols];
    for b in 0..g.batch {
        for f in 0..g.filters {
            fbp[f * ncols + b * p..][..p].copy_from_slice(&dout[(b * g.filters + f) * p..][..p]);
        }
    }
    fbp
}

pub(crate) fn affine_forward(x: &[f64], w: &[f64], b: &[f64], rows: usize, d: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * h);
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    gemm(rows, d, h, x, false, w, false, &mut out, true);
    out
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Stable log-softmax of one row via log-sum-exp.
pub(crate) fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}
