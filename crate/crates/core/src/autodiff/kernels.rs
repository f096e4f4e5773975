//! Dense numeric kernels shared by forward and backward passes.

use crate::error::{shape_mismatch, Result};
use crate::real::Real;

/// `c[m,n] += a[m,k] · b[k,n]`, row-major.
///
/// Loop order is i-k-j: every output element accumulates its products in
/// ascending `k`, exactly like a naive triple loop, while the inner loop
/// runs over contiguous memory.
pub fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Row-major transpose of an `r × c` matrix.
pub fn transpose<T: Real>(r: usize, c: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_mismatch("shapes do not broadcast", a, b)),
        };
    }
    Ok(out)
}

/// Strides of `src` laid over `out`, zero along broadcast dimensions.
pub fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Visits every element of `out_shape` in row-major order, passing the
/// output flat index together with the matching offsets in two broadcast
/// operands.
pub fn for_each_broadcast2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        let (mut a, mut b) = (oa, ob);
        for _ in 0..inner {
            f(o, a, b);
            o += 1;
            a += ia_step;
            b += ib_step;
        }
        // advance the outer counters
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        let (ho, wo) = self.out_hw();
        ho * wo
    }
}

/// Unfolds one sample `[C,H,W]` into a `[C·k·k, Ho·Wo]` column matrix.
pub fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let n = ho * wo;
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oh in 0..ho {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    let dst_row = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= g.h as isize {
                        dst_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto `[C,H,W]`.
pub fn col2im_acc<T: Real>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let n = ho * wo;
    for c in 0..g.in_ch {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let src = &cols[row * n..(row + 1) * n];
                for oh in 0..ho {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            plane[ih as usize * g.w + iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}
