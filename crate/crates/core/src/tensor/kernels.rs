//! Raw slice kernels shared by the forward and backward passes.

use super::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, (a, k as isize, 1), (b, n as isize, 1), c);
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, (a, k as isize, 1), (b, 1, k as isize), c);
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, (a, 1, m as isize), (b, n as isize, 1), c);
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather `src` into the permuted layout `out_shape = src_shape[axes[i]]`.
pub(crate) fn permute<T: Scalar>(src: &[T], src_shape: &[usize], axes: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
    let src_strides = strides(src_shape);
    let moved: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += moved[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= moved[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    out
}

/// Row-wise indices of the `k` largest entries, descending by value, ties to
/// the lower index.
pub(crate) fn topk_rows<T: Scalar>(data: &[T], width: usize, k: usize) -> Vec<usize> {
    let rows = data.len() / width;
    let mut out = Vec::with_capacity(rows * k);
    let mut order: Vec<usize> = Vec::with_capacity(width);
    for r in 0..rows {
        let row = &data[r * width..(r + 1) * width];
        order.clear();
        order.extend(0..width);
        let cmp = |&a: &usize, &b: &usize| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        };
        if k < width {
            order.select_nth_unstable_by(k, cmp);
        }
        order[..k].sort_unstable_by(cmp);
        out.extend_from_slice(&order[..k]);
    }
    out
}

/// Geometry shared by the strided convolution and its transpose.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    /// Fine (pixel) grid.
    pub h: usize,
    pub w: usize,
    /// Coarse grid.
    pub ho: usize,
    pub wo: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Visit every (coarse pixel, kernel tap, fine pixel) triple that
    /// contributes.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        for oy in 0..self.ho {
            for ky in 0..self.kh {
                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                for ox in 0..self.wo {
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let coarse = oy * self.wo + ox;
                        let tap = ky * self.kw + kx;
                        let fine = iy as usize * self.w + ix as usize;
                        f(coarse, tap, fine);
                    }
                }
            }
        }
    }
}

/// `y[n] += x[m] · k[m,n]`
#[inline]
pub(crate) fn vecmat_acc<T: Scalar>(x: &[T], k: &[T], y: &mut [T]) {
    let n = y.len();
    for (i, &xv) in x.iter().enumerate() {
        if xv == T::zero() {
            continue;
        }
        let krow = &k[i * n..(i + 1) * n];
        for (yv, &kv) in y.iter_mut().zip(krow) {
            *yv = *yv + xv * kv;
        }
    }
}

/// `x[m] += k[m,n] · y[n]`
#[inline]
pub(crate) fn matvec_acc<T: Scalar>(k: &[T], y: &[T], x: &mut [T]) {
    let n = y.len();
    for (i, xv) in x.iter_mut().enumerate() {
        let krow = &k[i * n..(i + 1) * n];
        let mut acc = T::zero();
        for (&kv, &yv) in krow.iter().zip(y) {
            acc = acc + kv * yv;
        }
        *xv = *xv + acc;
    }
}

/// `k[m,n] += x[m] ⊗ y[n]`
#[inline]
pub(crate) fn outer_acc<T: Scalar>(x: &[T], y: &[T], k: &mut [T]) {
    let n = y.len();
    for (i, &xv) in x.iter().enumerate() {
        if xv == T::zero() {
            continue;
        }
        let krow = &mut k[i * n..(i + 1) * n];
        for (kv, &yv) in krow.iter_mut().zip(y) {
            *kv = *kv + xv * yv;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
