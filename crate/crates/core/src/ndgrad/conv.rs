//! im2col convolution and pooling kernels.

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out_shape: [usize; 4],
}

impl ConvGeometry {
    pub(crate) fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let &[batch, cin, h, w] = input else {
            return Err(Error::Dimension(format!("conv2d input must be rank 4, got {input:?}")));
        };
        let &[cout, kcin, kh, kw] = kernel else {
            return Err(Error::Dimension(format!("conv2d kernel must be rank 4, got {kernel:?}")));
        };
        if kcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d: input {input:?} has {cin} channels, kernel {kernel:?} expects {kcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            out_shape: [batch, cout, oh, ow],
        })
    }

    pub(crate) fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    /// Source pixel for (kernel tap, output position), or None in the padding.
    #[inline]
    fn source(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Columns laid out as `[cin·kh·kw] × [batch·oh·ow]`.
fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let npos = g.positions();
    let plane = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.patch_len() * npos];
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for b in 0..g.batch {
                    let src = &input[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            if let Some((y, x)) = g.source(ky, kx, oy, ox) {
                                dst[b * plane + oy * g.ow + ox] = src[y * g.w + x];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T]) -> Vec<T> {
    let npos = g.positions();
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.batch * g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                for b in 0..g.batch {
                    let base = (b * g.cin + c) * g.h * g.w;
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            if let Some((y, x)) = g.source(ky, kx, oy, ox) {
                                let i = base + y * g.w + x;
                                out[i] = out[i] + src[b * plane + oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the `[batch×cout×oh×ow]` output and the column buffer kept for backward.
pub(crate) fn forward<T: Scalar>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> (Vec<T>, Vec<T>) {
    let cols = im2col(g, input);
    let (p, npos, plane) = (g.patch_len(), g.positions(), g.oh * g.ow);
    let mut mat = vec![T::zero(); g.cout * npos];
    T::gemm_raw(g.cout, p, npos, kernel, (p as isize, 1), &cols, (npos as isize, 1), T::zero(), &mut mat);
    // [cout × batch·plane] → [batch × cout × plane]
    let mut out = vec![T::zero(); mat.len()];
    for co in 0..g.cout {
        for b in 0..g.batch {
            out[(b * g.cout + co) * plane..(b * g.cout + co + 1) * plane]
                .copy_from_slice(&mat[co * npos + b * plane..co * npos + (b + 1) * plane]);
        }
    }
    (out, cols)
}

pub(crate) fn backward<T: Scalar>(
    g: &ConvGeometry,
    grad_out: &[T],
    cols: &[T],
    kernel: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (p, npos, plane) = (g.patch_len(), g.positions(), g.oh * g.ow);
    let mut gmat = vec![T::zero(); g.cout * npos];
    for co in 0..g.cout {
        for b in 0..g.batch {
            gmat[co * npos + b * plane..co * npos + (b + 1) * plane]
                .copy_from_slice(&grad_out[(b * g.cout + co) * plane..(b * g.cout + co + 1) * plane]);
        }
    }
    let dk = need_kernel.then(|| {
        let mut dk = vec![T::zero(); g.cout * p];
        T::gemm_raw(g.cout, npos, p, &gmat, (npos as isize, 1), cols, (1, npos as isize), T::zero(), &mut dk);
        dk
    });
    let dx = need_input.then(|| {
        let mut dcols = vec![T::zero(); p * npos];
        T::gemm_raw(p, g.cout, npos, kernel, (1, p as isize), &gmat, (npos as isize, 1), T::zero(), &mut dcols);
        col2im(g, &dcols)
    });
    (dx, dk)
}

/// 2×2/2 max pooling. Returns output, flat argmax into the input, and shape.
pub(crate) fn max_pool2<T: Scalar>(shape: &[usize], input: &[T]) -> Result<(Vec<T>, Vec<usize>, Vec<usize>)> {
    let &[b, c, h, w] = shape else {
        return Err(Error::Dimension(format!("max_pool2 expects rank 4, got {shape:?}")));
    };
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!("max_pool2 needs at least 2×2 maps, got {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    Ok((out, argmax, vec![b, c, oh, ow]))
}
