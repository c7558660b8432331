//! Per-sample depthwise filtering with replicate padding, on planar copies
//! of each frame so the inner loops run over contiguous rows.

use crate::par::{self, Exec};
use crate::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct DepthwiseGeom {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub m: usize,
    pub k: usize,
}

impl DepthwiseGeom {
    fn pad(&self) -> usize {
        self.k / 2
    }

    fn padded_w(&self) -> usize {
        self.w + 2 * self.pad()
    }

    fn padded_h(&self) -> usize {
        self.h + 2 * self.pad()
    }

    fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    fn out_len(&self) -> usize {
        self.h * self.w * self.m * self.c
    }

    fn kernel_len(&self) -> usize {
        self.m * self.k * self.k
    }

    /// Replicate-padded planes `[C, H+2p, W+2p]` of one NHWC frame.
    fn padded<T: Real>(&self, frame: &[T]) -> Vec<T> {
        let (p, hp, wp) = (self.pad(), self.padded_h(), self.padded_w());
        let mut out = vec![T::zero(); self.c * hp * wp];
        for ci in 0..self.c {
            for py in 0..hp {
                let sy = py.saturating_sub(p).min(self.h - 1);
                for px in 0..wp {
                    let sx = px.saturating_sub(p).min(self.w - 1);
                    out[(ci * hp + py) * wp + px] = frame[(sy * self.w + sx) * self.c + ci];
                }
            }
        }
        out
    }

    /// Gradient plane `[H, W]` of mask `mi`, channel `ci` from an NHWMC buffer.
    fn gather<T: Real>(&self, g: &[T], mi: usize, ci: usize, plane: &mut [T]) {
        let stride = self.m * self.c;
        for (i, v) in plane.iter_mut().enumerate() {
            *v = g[i * stride + mi * self.c + ci];
        }
    }

    pub fn forward<T: Real>(&self, frame: &[T], kernels: &[T], exec: Exec) -> Vec<T> {
        let mut out = vec![T::zero(); self.b * self.out_len()];
        let (k, w, wp, hp) = (self.k, self.w, self.padded_w(), self.padded_h());
        par::for_each_chunk_mut(exec, &mut out, self.out_len(), |bi, out| {
            let padded = self.padded(&frame[bi * self.frame_len()..][..self.frame_len()]);
            let kv = &kernels[bi * self.kernel_len()..][..self.kernel_len()];
            let mut plane = vec![T::zero(); self.h * w];
            for mi in 0..self.m {
                for ci in 0..self.c {
                    plane.fill(T::zero());
                    let src = &padded[ci * hp * wp..][..hp * wp];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wgt = kv[(mi * k + ky) * k + kx];
                            if wgt == T::zero() {
                                continue;
                            }
                            for y in 0..self.h {
                                let row = &src[(y + ky) * wp + kx..][..w];
                                for (d, &s) in plane[y * w..][..w].iter_mut().zip(row) {
                                    *d += wgt * s;
                                }
                            }
                        }
                    }
                    let stride = self.m * self.c;
                    for (i, &v) in plane.iter().enumerate() {
                        out[i * stride + mi * self.c + ci] = v;
                    }
                }
            }
        });
        out
    }

    /// Accumulates the kernel gradient into `buf` (`[B, M, k, k]`).
    pub fn backward_kernels<T: Real>(&self, frame: &[T], g: &[T], buf: &mut [T], exec: Exec) {
        let (k, w, wp, hp) = (self.k, self.w, self.padded_w(), self.padded_h());
        par::for_each_chunk_mut(exec, buf, self.kernel_len(), |bi, buf| {
            let padded = self.padded(&frame[bi * self.frame_len()..][..self.frame_len()]);
            let gb = &g[bi * self.out_len()..][..self.out_len()];
            let mut plane = vec![T::zero(); self.h * w];
            for mi in 0..self.m {
                for ci in 0..self.c {
                    self.gather(gb, mi, ci, &mut plane);
                    let src = &padded[ci * hp * wp..][..hp * wp];
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = T::zero();
                            for y in 0..self.h {
                                let row = &src[(y + ky) * wp + kx..][..w];
                                for (&s, &q) in row.iter().zip(&plane[y * w..][..w]) {
                                    acc += s * q;
                                }
                            }
                            buf[(mi * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        });
    }

    /// Accumulates the frame gradient into `buf` (`[B, H, W, C]`).
    pub fn backward_frame<T: Real>(&self, kernels: &[T], g: &[T], buf: &mut [T], exec: Exec) {
        let (k, p, w, wp, hp) = (self.k, self.pad(), self.w, self.padded_w(), self.padded_h());
        par::for_each_chunk_mut(exec, buf, self.frame_len(), |bi, buf| {
            let gb = &g[bi * self.out_len()..][..self.out_len()];
            let kv = &kernels[bi * self.kernel_len()..][..self.kernel_len()];
            let mut grad = vec![T::zero(); self.c * hp * wp];
            let mut plane = vec![T::zero(); self.h * w];
            for mi in 0..self.m {
                for ci in 0..self.c {
                    self.gather(gb, mi, ci, &mut plane);
                    let dst = &mut grad[ci * hp * wp..][..hp * wp];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wgt = kv[(mi * k + ky) * k + kx];
                            if wgt == T::zero() {
                                continue;
                            }
                            for y in 0..self.h {
                                let row = &mut dst[(y + ky) * wp + kx..][..w];
                                for (d, &q) in row.iter_mut().zip(&plane[y * w..][..w]) {
                                    *d += wgt * q;
                                }
                            }
                        }
                    }
                }
            }
            for ci in 0..self.c {
                for py in 0..hp {
                    let sy = py.saturating_sub(p).min(self.h - 1);
                    for px in 0..wp {
                        let sx = px.saturating_sub(p).min(self.w - 1);
                        buf[(sy * self.w + sx) * self.c + ci] += grad[(ci * hp + py) * wp + px];
                    }
                }
            }
        });
    }
}
