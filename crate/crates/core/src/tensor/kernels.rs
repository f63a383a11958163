//! Low-level loops shared by the tape's forward and backward passes.

use super::Real;

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

pub(crate) fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &(&[T], isize, isize),
    b: &(&[T], isize, isize),
    c: &(&mut [T], isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(max_offset(m, k, a.1, a.2) < a.0.len(), "gemm: lhs out of bounds");
        assert!(max_offset(k, n, b.1, b.2) < b.0.len(), "gemm: rhs out of bounds");
    }
    assert!(max_offset(m, n, c.1, c.2) < c.0.len(), "gemm: output out of bounds");
}

/// Output extent of a valid (unpadded) sliding window, if integral.
pub(crate) fn valid_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || input < kernel || !(input - kernel).is_multiple_of(stride) {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

/// Geometry of one valid convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold `x` (C×H×W) into a `(C·k·k) × (H'·W')` column matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.kernel;
    let positions = g.positions();
    let mut cols = vec![T::zero(); g.patch_len() * positions];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let src = &plane[(oy * g.stride + ki) * g.width..];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        dst_row.copy_from_slice(&src[kj..kj + g.out_w]);
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            *d = src[ox * g.stride + kj];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto a C×H×W buffer.
pub(crate) fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let k = g.kernel;
    let positions = g.positions();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let base = (oy * g.stride + ki) * g.width + kj;
                    for ox in 0..g.out_w {
                        plane[base + ox * g.stride] =
                            plane[base + ox * g.stride] + src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling over C×H×W; returns values and the flat
/// argmax of each window (first maximal element in row-major order).
pub(crate) fn maxpool<T: Real>(
    x: &[T],
    channels: usize,
    height: usize,
    width: usize,
    window: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (height / window, width / window);
    let mut values = Vec::with_capacity(channels * oh * ow);
    let mut argmax = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * width + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * width + ox * window + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                values.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (values, argmax)
}
