//! Dense row-major tensors.
//!
//! A [`Tensor`] owns its contiguous buffer; there are no views that alias
//! writable data, which keeps gradient accumulation auditable. Allocations
//! and releases are reported to the byte tracker in [`super::mem`].

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::mem;
use crate::scalar::Scalar;

pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    fn register(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        mem::tracked_alloc(data.len() * std::mem::size_of::<T>());
        Tensor { shape, data }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::register(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::register(shape.to_vec(), vec![T::zero(); numel])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Self::register(shape.to_vec(), vec![v; numel])
    }

    pub fn scalar(v: T) -> Self {
        Self::register(vec![1], vec![v])
    }

    /// Uniform samples in `[lo, hi)` from a deterministic stream.
    pub fn rand_uniform(shape: &[usize], lo: T, hi: T, rng: &mut ChaCha8Rng) -> Self {
        let numel = shape.iter().product();
        let span = hi - lo;
        let data = (0..numel)
            .map(|_| lo + span * T::from_real(rng.random::<f64>()))
            .collect();
        Self::register(shape.to_vec(), data)
    }

    /// Standard-normal samples (Box-Muller) from a deterministic stream.
    pub fn rand_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::from_real(normal_sample(rng))).collect();
        Self::register(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent pair for 2-D tensors.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("expected 2-D tensor, got {s:?}"))),
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Element (i, j) of a 2-D tensor; debug-checked.
    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    /// Elementwise cast between scalar precisions.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|v| U::from_real(v.to_real())).collect();
        Tensor::<U>::register(self.shape.clone(), data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_real() - b.to_real()).abs())
            .fold(0.0, f64::max)
    }
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self::register(self.shape.clone(), self.data.clone())
    }
}

impl<T: Scalar> Drop for Tensor<T> {
    fn drop(&mut self) {
        mem::tracked_free(self.data.len() * std::mem::size_of::<T>());
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn allocation_is_tracked() {
        let before = mem::current_bytes();
        let t = Tensor::<f32>::zeros(&[10, 10]);
        assert_eq!(mem::current_bytes(), before + 400);
        drop(t);
        assert_eq!(mem::current_bytes(), before);
    }

    #[test]
    fn clone_registers_its_own_bytes() {
        let t = Tensor::<f64>::zeros(&[8]);
        let before = mem::current_bytes();
        let c = t.clone();
        assert_eq!(mem::current_bytes(), before + 64);
        drop(c);
        assert_eq!(mem::current_bytes(), before);
    }
}
