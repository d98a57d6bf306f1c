//! Low-level loops shared by the tape operators.

use super::array::strides;
use crate::error::{shape_err, Result};

/// `c = alpha * a·b + beta * c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a stride-1 "same" convolution over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Valid output column range `[lo, hi)` for kernel column `kj`.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = self.pw.saturating_sub(kj).min(self.w);
        let hi = (self.w + self.pw).saturating_sub(kj).min(self.w);
        (lo, hi.max(lo))
    }
}

/// Unfold one sample `[cin, h, w]` into `[cin*kh*kw, h*w]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw = g.pixels();
    for ci in 0..g.cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * hw;
                let dst = &mut cols[row..row + hw];
                let (lo, hi) = g.col_range(kj);
                for oy in 0..g.h {
                    let out = &mut dst[oy * g.w..(oy + 1) * g.w];
                    let iy = oy as isize + ki as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let shift = kj as isize - g.pw as isize;
                    for ox in lo..hi {
                        out[ox] = src[(ox as isize + shift) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[cin, h, w]`.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let hw = g.pixels();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * hw;
                let src_row = &cols[row..row + hw];
                let (lo, hi) = g.col_range(kj);
                let shift = kj as isize - g.pw as isize;
                for oy in 0..g.h {
                    let iy = oy as isize + ki as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[ci * hw + iy as usize * g.w..ci * hw + (iy as usize + 1) * g.w];
                    let src = &src_row[oy * g.w..(oy + 1) * g.w];
                    for ox in lo..hi {
                        dst[(ox as isize + shift) as usize] += src[ox];
                    }
                }
            }
        }
    }
}

/// Strides of `small` when viewed with the shape of `big`; broadcast dims get 0.
pub(crate) fn broadcast_strides(big: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if big.len() != small.len() {
        return Err(shape_err!("cannot broadcast {:?} to {:?}", small, big));
    }
    let base = strides(small);
    big.iter()
        .zip(small)
        .zip(base)
        .map(|((&b, &s), st)| match (b, s) {
            _ if b == s => Ok(st),
            (_, 1) => Ok(0),
            _ => Err(shape_err!("cannot broadcast {:?} to {:?}", small, big)),
        })
        .collect()
}

/// Calls `f(flat_index_in_big, flat_index_in_small)` over every element of `big`.
pub(crate) fn for_each_broadcast(big: &[usize], small_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = big.iter().product();
    if total == 0 {
        return;
    }
    if big.is_empty() {
        f(0, 0);
        return;
    }
    let nd = big.len();
    let inner = big[nd - 1];
    let inner_stride = small_strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    let mut flat = 0usize;
    loop {
        for j in 0..inner {
            f(flat + j, base + j * inner_stride);
        }
        flat += inner;
        // advance the odometer over the outer dims
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base += small_strides[d];
            if idx[d] < big[d] {
                break;
            }
            base -= small_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Reduction helper: `(outer, axis_len, inner)` for a reduction over `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
