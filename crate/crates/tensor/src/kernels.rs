//! Raw numeric kernels shared by forward and backward rules.

use crate::real::Real;

/// Strided matrix operand: `(row_stride, col_stride)` over a slice.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// A row-major `rows x cols` buffer read as its transpose.
    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }

    fn extent(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, with `c` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= la.extent(m, k), "gemm: lhs buffer too small");
    assert!(b.len() >= lb.extent(k, n), "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v = if beta == T::zero() {
                T::zero()
            } else {
                *v * beta
            };
        }
        return;
    }
    // SAFETY: extents checked above for every operand.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output shape and element order for an axis permutation.
pub(crate) fn permute<T: Real>(
    data: &[T],
    shape: &[usize],
    perm: &[usize],
) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out_shape, out);
    }
    // Copy contiguous runs when the last axis is kept in place.
    let (outer_rank, run) = if rank > 0 && perm[rank - 1] == rank - 1 {
        (rank - 1, shape[rank - 1])
    } else {
        (rank, 1)
    };
    let mut counter = vec![0usize; outer_rank];
    let mut offset = 0usize;
    loop {
        if run == 1 {
            out.push(data[offset]);
        } else {
            out.extend_from_slice(&data[offset..offset + run]);
        }
        let mut axis = outer_rank;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            counter[axis] += 1;
            offset += src_strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * out_shape[axis];
            counter[axis] = 0;
        }
    }
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Unfolds one `(channels, length)` signal into `(out_len, channels * kernel)` windows.
pub(crate) fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    length: usize,
    kernel: usize,
    stride: usize,
    out_len: usize,
    cols: &mut [T],
) {
    let width = channels * kernel;
    for t in 0..out_len {
        let row = &mut cols[t * width..(t + 1) * width];
        for c in 0..channels {
            let src = &x[c * length + t * stride..c * length + t * stride + kernel];
            row[c * kernel..(c + 1) * kernel].copy_from_slice(src);
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds window gradients back onto the signal.
pub(crate) fn col2im_add<T: Real>(
    cols: &[T],
    channels: usize,
    length: usize,
    kernel: usize,
    stride: usize,
    out_len: usize,
    dx: &mut [T],
) {
    let width = channels * kernel;
    for t in 0..out_len {
        let row = &cols[t * width..(t + 1) * width];
        for c in 0..channels {
            let dst = &mut dx[c * length + t * stride..c * length + t * stride + kernel];
            for (d, &s) in dst.iter_mut().zip(&row[c * kernel..(c + 1) * kernel]) {
                *d += s;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
