//! 2-D cross-correlation over NHWC inputs via im2col + GEMM.

use crate::error::{invalid, shape_err, Result};
use crate::par::{self, Exec};
use crate::real::matmul;
use crate::Real;

/// Border handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(n / stride)`, zeros outside the input.
    SameZero,
    /// Output extent `ceil(n / stride)`, border pixels repeated outside the input.
    SameReplicate,
    /// No padding; output extent `(n - k) / stride + 1`.
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub padding: Padding,
}

fn same_extent(n: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = n.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(n);
    (out, total / 2)
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return shape_err(
                "conv2d",
                format!("expected input [B,H,W,Cin] and kernel [k,k,Cin,Cout], got {input:?} and {kernel:?}"),
            );
        }
        let (b, h, w, cin) = (input[0], input[1], input[2], input[3]);
        let (k, k2, kin, cout) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if k != k2 || k % 2 == 0 {
            return invalid("conv2d", format!("kernel must be square with odd extent, got {kernel:?}"));
        }
        if kin != cin {
            return shape_err(
                "conv2d",
                format!("input {input:?} has {cin} channels but kernel {kernel:?} expects {kin}"),
            );
        }
        if stride == 0 {
            return invalid("conv2d", "stride must be at least 1");
        }
        if h == 0 || w == 0 {
            return shape_err("conv2d", format!("empty spatial extent in {input:?}"));
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::SameZero | Padding::SameReplicate => {
                let (oh, pt) = same_extent(h, k, stride);
                let (ow, pl) = same_extent(w, k, stride);
                (oh, ow, pt, pl)
            }
            Padding::Valid => {
                if h < k || w < k {
                    return shape_err(
                        "conv2d",
                        format!("valid padding needs input {input:?} at least as large as kernel {kernel:?}"),
                    );
                }
                ((h - k) / stride + 1, (w - k) / stride + 1, 0, 0)
            }
        };
        Ok(Self {
            b,
            h,
            w,
            cin,
            k,
            cout,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
            padding,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.b, self.oh, self.ow, self.cout]
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn rows_per_image(&self) -> usize {
        self.oh * self.ow
    }

    #[inline]
    fn source(&self, i: isize, n: usize) -> Option<usize> {
        if i >= 0 && (i as usize) < n {
            Some(i as usize)
        } else if self.padding == Padding::SameReplicate {
            Some(i.clamp(0, n as isize - 1) as usize)
        } else {
            None
        }
    }

    fn im2col<T: Real>(&self, input: &[T], exec: Exec) -> Vec<T> {
        let plen = self.patch_len();
        let img_len = self.h * self.w * self.cin;
        let mut cols = vec![T::zero(); self.b * self.rows_per_image() * plen];
        par::for_each_chunk_mut(exec, &mut cols, self.rows_per_image() * plen, |bi, chunk| {
            let img = &input[bi * img_len..(bi + 1) * img_len];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = &mut chunk[(oy * self.ow + ox) * plen..][..plen];
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        let Some(sy) = self.source(iy, self.h) else { continue };
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            let Some(sx) = self.source(ix, self.w) else { continue };
                            let src = &img[(sy * self.w + sx) * self.cin..][..self.cin];
                            row[(ky * self.k + kx) * self.cin..][..self.cin].copy_from_slice(src);
                        }
                    }
                }
            }
        });
        cols
    }

    pub fn forward<T: Real>(&self, input: &[T], kernel: &[T], exec: Exec) -> Vec<T> {
        let rows = self.b * self.rows_per_image();
        let mut out = vec![T::zero(); rows * self.cout];
        if self.k == 1 && self.stride == 1 {
            matmul(input, false, kernel, false, &mut out, rows, self.cin, self.cout, false);
        } else {
            let cols = self.im2col(input, exec);
            matmul(&cols, false, kernel, false, &mut out, rows, self.patch_len(), self.cout, false);
        }
        out
    }

    /// `grad_kernel += colsᵀ · grad_out`
    pub fn backward_kernel<T: Real>(&self, input: &[T], grad_out: &[T], grad_kernel: &mut [T], exec: Exec) {
        let rows = self.b * self.rows_per_image();
        if self.k == 1 && self.stride == 1 {
            matmul(input, true, grad_out, false, grad_kernel, self.cin, rows, self.cout, true);
        } else {
            let cols = self.im2col(input, exec);
            matmul(&cols, true, grad_out, false, grad_kernel, self.patch_len(), rows, self.cout, true);
        }
    }

    /// `grad_input += col2im(grad_out · kernelᵀ)`
    pub fn backward_input<T: Real>(&self, kernel: &[T], grad_out: &[T], grad_input: &mut [T], exec: Exec) {
        let rows = self.b * self.rows_per_image();
        if self.k == 1 && self.stride == 1 {
            matmul(grad_out, false, kernel, true, grad_input, rows, self.cout, self.cin, true);
            return;
        }
        let plen = self.patch_len();
        let mut dcols = vec![T::zero(); rows * plen];
        matmul(grad_out, false, kernel, true, &mut dcols, rows, self.cout, plen, false);
        let img_len = self.h * self.w * self.cin;
        let per_image = self.rows_per_image() * plen;
        par::for_each_chunk_mut(exec, grad_input, img_len, |bi, img| {
            let chunk = &dcols[bi * per_image..(bi + 1) * per_image];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = &chunk[(oy * self.ow + ox) * plen..][..plen];
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        let Some(sy) = self.source(iy, self.h) else { continue };
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            let Some(sx) = self.source(ix, self.w) else { continue };
                            let dst = &mut img[(sy * self.w + sx) * self.cin..][..self.cin];
                            let src = &row[(ky * self.k + kx) * self.cin..][..self.cin];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        });
    }
}
