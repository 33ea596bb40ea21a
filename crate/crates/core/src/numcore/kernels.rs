//! Raw numeric kernels on contiguous slices.
//!
//! The autodiff graph dispatches into these; they are also the spec surface
//! for the low-level operations and are tested directly against brute-force
//! oracles.

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;

/// `out[m x n] = a[m x k] · b[k x n]`. Inner loop runs over contiguous rows of `b`.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for v in out.iter_mut() {
        *v = T::zero();
    }
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let s = a[i * k + l];
            if s == T::zero() {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + s * bv;
            }
        }
    }
}

/// `out[m x n] = aᵀ · b` with `a[k x m]`, `b[k x n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for v in out.iter_mut() {
        *v = T::zero();
    }
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let s = a_row[i];
            if s == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + s * bv;
            }
        }
    }
}

/// `out[m x n] = a · bᵀ` with `a[m x k]`, `b[n x k]`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            out[i * n + j] = acc;
        }
    }
}

/// Max-subtracted softmax over each contiguous row of length `n`.
pub fn softmax_rows_inplace<T: Scalar>(data: &mut [T], n: usize) {
    debug_assert_eq!(data.len() % n, 0);
    for row in data.chunks_mut(n) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Softmax along an arbitrary axis; numerically stabilized by max-subtraction.
///
/// Errors on non-finite input or an out-of-range axis.
pub fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("softmax on non-finite input".into()));
    }
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut mx = data[base];
            for a in 1..axis_len {
                let v = data[base + a * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for a in 0..axis_len {
                let idx = base + a * inner;
                let e = (data[idx] - mx).exp();
                data[idx] = e;
                sum = sum + e;
            }
            for a in 0..axis_len {
                data[base + a * inner] = data[base + a * inner] / sum;
            }
        }
    }
    Ok(out)
}

/// Tanh-form GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_real((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_real(0.044715);
    let half = T::from_real(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

/// Derivative of the tanh-form GELU.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_real((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_real(0.044715);
    let half = T::from_real(0.5);
    let three = T::from_real(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let dinner = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * sech2 * dinner
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Epsilon used inside layer normalization denominators.
pub const LAYER_NORM_EPS: f64 = 1e-5;
