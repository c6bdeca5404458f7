//! Raw slice kernels behind the graph operations.
//!
//! All kernels are single-threaded and accumulate in a fixed order, so the
//! results are bitwise reproducible.

/// `out[m,p] += a[m,k] * b[k,p]`
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        let arow = &a[i * k..(i + 1) * k];
        let mut kk = 0;
        // Four rows of `b` per pass keeps `row` in registers longer.
        while kk + 4 <= k {
            let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let b0 = &b[kk * p..(kk + 1) * p];
            let b1 = &b[(kk + 1) * p..(kk + 2) * p];
            let b2 = &b[(kk + 2) * p..(kk + 3) * p];
            let b3 = &b[(kk + 3) * p..(kk + 4) * p];
            for j in 0..p {
                row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            kk += 4;
        }
        while kk < k {
            let av = arow[kk];
            let brow = &b[kk * p..(kk + 1) * p];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += av * bv;
            }
            kk += 1;
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    matmul_acc(a, b, m, k, p, &mut out);
    out
}

/// `out[k,p] += a[m,k]^T * b[m,p]`
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * p);
    debug_assert_eq!(out.len(), k * p);
    for i in 0..m {
        let brow = &b[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            let row = &mut out[kk * p..(kk + 1) * p];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,p] * b[k,p]^T`
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], m: usize, p: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..k {
            out[i * k + j] += dot(arow, &b[j * p..(j + 1) * p]);
        }
    }
}

/// Dot product with four independent accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = 0.0;
    for o in chunks * 4..a.len() {
        tail += a[o] * b[o];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a same-padded square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds `x[C,H,W]` into `cols[C*k*k, Ho*Wo]`.
pub fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let pad = g.pad() as isize;
    let mut cols = vec![0.0; g.patch_len() * ho * wo];
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds `cols` back, accumulating into `dx[C,H,W]`.
pub fn col2im_acc(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let pad = g.pad() as isize;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// One output coordinate of an align-corners-false linear resampling:
/// the two source taps and the weight of the upper tap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LerpTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn lerp_taps(in_len: usize, out_len: usize) -> Vec<LerpTap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            LerpTap { lo, hi, frac }
        })
        .collect()
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid against `out`, with zero stride on broadcast axes.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut stride = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 && out[o] != 1 { 0 } else { stride };
        stride *= shape[i];
    }
    strides
}

/// Walks every index of `shape` in row-major order, yielding the offsets
/// into up to two strided operands.
pub fn for_each_strided(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down to `shape` along broadcast axes.
pub fn reduce_to(grad: &[f64], out: &[usize], shape: &[usize]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    if out == shape {
        return grad.to_vec();
    }
    let strides = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    let mut acc = vec![0.0; n];
    for_each_strided(out, &strides, &zeros, |flat, o, _| acc[o] += grad[flat]);
    acc
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; rank];
    let mut out = vec![0.0; x.len()];
    for_each_strided(&out_shape, &src_strides, &zeros, |flat, o, _| out[flat] = x[o]);
    out
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
