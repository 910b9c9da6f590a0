//! Raw buffer kernels shared by forward and backward rules. All images are
//! `[H, W, C]` row-major.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }
}

/// Unfolds `x` into `[out_h * out_w, k * k * cin]` patches, zero padded.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    let mut cols = vec![T::zero(); oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: ConvGeom, dx: &mut [T]) {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for (d, &s) in dx[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn avgpool2x2<T: Scalar>(x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * c..][..c];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = &x[((2 * oy + dy) * w + 2 * ox + dx) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= quarter;
            }
        }
    }
    out
}

pub(crate) fn avgpool2x2_backward<T: Scalar>(dy: &[T], h: usize, w: usize, c: usize, dx: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    for oy in 0..oh {
        for ox in 0..ow {
            let src = &dy[(oy * ow + ox) * c..][..c];
            for (ddy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let dst = &mut dx[((2 * oy + ddy) * w + 2 * ox + ddx) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * quarter;
                }
            }
        }
    }
}

pub(crate) fn upsample_nearest<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![T::zero(); oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let src = ((oy / f) * w + ox / f) * c;
            out[(oy * ow + ox) * c..][..c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Scalar>(
    dy: &[T],
    h: usize,
    w: usize,
    c: usize,
    f: usize,
    dx: &mut [T],
) {
    let (oh, ow) = (h * f, w * f);
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = ((oy / f) * w + ox / f) * c;
            for (d, &s) in dx[dst..dst + c].iter_mut().zip(&dy[(oy * ow + ox) * c..][..c]) {
                *d += s;
            }
        }
    }
}

/// Maps each flat index of the `[h*f, w*f, c]` output of a depth-to-space
/// rearrangement to its index in the `[h, w, f*f*c]` input.
pub(crate) fn depth_to_space_index(h: usize, w: usize, c: usize, f: usize) -> Vec<usize> {
    let (oh, ow) = (h * f, w * f);
    let cin = f * f * c;
    let mut idx = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let (y, sy, x, sx) = (oy / f, oy % f, ox / f, ox % f);
            for ch in 0..c {
                idx.push((y * w + x) * cin + (sy * f + sx) * c + ch);
            }
        }
    }
    idx
}
