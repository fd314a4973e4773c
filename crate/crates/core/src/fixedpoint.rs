//! Fixed-point codec between reals and the ring `Z_{2^64}`.
//!
//! A real `v` is represented by the ring element `round(v * 2^f)` in two's
//! complement. Addition of encodings is exact; the product of two encodings is
//! at precision `2f` and must be truncated back to `f`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Ring width in bits. Fixed.
pub const MODULUS_BITS: u32 = 64;

/// Default number of fractional bits.
pub const DEFAULT_FRAC_BITS: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FixedPointError {
    #[error("value {value} is outside the representable range [-2^{bits}, 2^{bits})")]
    RangeOverflow { value: f64, bits: u32 },
    #[error("fractional bits must be in 1..=32, got {0}")]
    InvalidFracBits(u32),
    #[error("comparison bit length must be in 2..=64, got {0}")]
    InvalidCompareBits(u32),
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
}

/// Parameters of the fixed-point ring.
///
/// `compare_bits` is the number of low bits scanned by secure comparison. It is
/// 64 (the full ring) unless reduced on purpose, e.g. for round-cost studies;
/// with a reduced length comparison is only correct for `|x| < 2^(compare_bits-1)`
/// in the raw ring representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingParams {
    frac_bits: u32,
    compare_bits: u32,
}

impl Default for RingParams {
    fn default() -> Self {
        Self {
            frac_bits: DEFAULT_FRAC_BITS,
            compare_bits: MODULUS_BITS,
        }
    }
}

impl RingParams {
    pub fn new(frac_bits: u32) -> Result<Self, FixedPointError> {
        Self::with_compare_bits(frac_bits, MODULUS_BITS)
    }

    pub fn with_compare_bits(frac_bits: u32, compare_bits: u32) -> Result<Self, FixedPointError> {
        if !(1..=32).contains(&frac_bits) {
            return Err(FixedPointError::InvalidFracBits(frac_bits));
        }
        if !(2..=MODULUS_BITS).contains(&compare_bits) {
            return Err(FixedPointError::InvalidCompareBits(compare_bits));
        }
        Ok(Self {
            frac_bits,
            compare_bits,
        })
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn compare_bits(&self) -> u32 {
        self.compare_bits
    }

    pub fn modulus_bits(&self) -> u32 {
        MODULUS_BITS
    }

    /// `2^f` as a real.
    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// Exclusive upper bound `2^(63-f)` of the representable reals; the lower
    /// bound is its negation (inclusive).
    pub fn max_magnitude(&self) -> f64 {
        2f64.powi((63 - self.frac_bits) as i32)
    }

    /// Encodes a single real.
    pub fn encode_scalar(&self, value: f64) -> Result<u64, FixedPointError> {
        let bound = self.max_magnitude();
        if !(value >= -bound && value < bound) {
            return Err(FixedPointError::RangeOverflow {
                value,
                bits: 63 - self.frac_bits,
            });
        }
        // f64::round rounds half away from zero.
        Ok((value * self.scale()).round() as i64 as u64)
    }

    /// Decodes a single ring element.
    pub fn decode_scalar(&self, element: u64) -> f64 {
        element as i64 as f64 / self.scale()
    }

    /// The ring element representing `1.0`.
    pub fn one(&self) -> u64 {
        1u64 << self.frac_bits
    }
}

/// Row-major tensor of ring elements. All arithmetic wraps modulo `2^64`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RingTensor {
    shape: Vec<usize>,
    data: Vec<u64>,
}

impl RingTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u64>) -> Result<Self, FixedPointError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(FixedPointError::ShapeMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: u64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: u64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, FixedPointError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(FixedPointError::ShapeMismatch {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(u64, u64) -> u64) -> Self {
        assert_eq!(self.shape, other.shape, "ring tensor shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn map(&self, f: impl Fn(u64) -> u64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    /// Element-wise sum. Panics on shape mismatch.
    pub fn wrapping_add(&self, other: &Self) -> Self {
        self.zip_with(other, u64::wrapping_add)
    }

    pub fn wrapping_sub(&self, other: &Self) -> Self {
        self.zip_with(other, u64::wrapping_sub)
    }

    /// Element-wise (Hadamard) product in the ring.
    pub fn wrapping_mul(&self, other: &Self) -> Self {
        self.zip_with(other, u64::wrapping_mul)
    }

    pub fn wrapping_neg(&self) -> Self {
        self.map(u64::wrapping_neg)
    }

    /// Multiplies every element by a ring constant.
    pub fn mul_scalar(&self, c: u64) -> Self {
        self.map(|a| a.wrapping_mul(c))
    }

    pub fn add_scalar(&self, c: u64) -> Self {
        self.map(|a| a.wrapping_add(c))
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "ring tensor shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = a.wrapping_add(*b);
        }
    }

    pub fn sub_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "ring tensor shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = a.wrapping_sub(*b);
        }
    }

    /// Matrix product of `[m x n]` by `[n x p]`, modulo `2^64`.
    pub fn matmul(&self, other: &Self) -> Self {
        let (m, n) = self.dims2().expect("matmul lhs must be rank 2");
        let (n2, p) = other.dims2().expect("matmul rhs must be rank 2");
        assert_eq!(n, n2, "matmul inner dimension mismatch");
        let mut out = vec![0u64; m * p];
        let lhs = &self.data;
        let rhs = &other.data;
        out.par_chunks_mut(p.max(1))
            .enumerate()
            .for_each(|(i, row)| {
                let a_row = &lhs[i * n..(i + 1) * n];
                for (k, &a) in a_row.iter().enumerate() {
                    if a == 0 {
                        continue;
                    }
                    let b_row = &rhs[k * p..(k + 1) * p];
                    for (o, &b) in row.iter_mut().zip(b_row) {
                        *o = o.wrapping_add(a.wrapping_mul(b));
                    }
                }
            });
        Self {
            shape: vec![m, p],
            data: out,
        }
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2().expect("transpose needs rank 2");
        let mut data = vec![0u64; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }

    /// Adds a length-`cols` row vector to every row of a rank-2 tensor.
    pub fn add_row_broadcast(&self, row: &Self) -> Self {
        let (_, c) = self.dims2().expect("broadcast needs rank 2");
        assert_eq!(row.len(), c, "broadcast row length mismatch");
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(c) {
            for (a, b) in chunk.iter_mut().zip(&row.data) {
                *a = a.wrapping_add(*b);
            }
        }
        out
    }

    /// Sums each row of a rank-2 tensor into a `[rows x 1]` tensor.
    pub fn row_sums(&self) -> Self {
        let (r, c) = self.dims2().expect("row_sums needs rank 2");
        let data = self
            .data
            .chunks(c.max(1))
            .take(r)
            .map(|row| row.iter().fold(0u64, |acc, &v| acc.wrapping_add(v)))
            .collect();
        Self {
            shape: vec![r, 1],
            data,
        }
    }

    /// Arithmetic right shift of every element interpreted as signed.
    pub fn shift_right_signed(&self, bits: u32) -> Self {
        self.map(|a| ((a as i64) >> bits) as u64)
    }
}

/// Encodes a slice of reals with the given shape.
pub fn encode<T: Real>(
    values: &[T],
    shape: &[usize],
    params: &RingParams,
) -> Result<RingTensor, FixedPointError> {
    let data = values
        .iter()
        .map(|v| params.encode_scalar(v.as_f64()))
        .collect::<Result<Vec<_>, _>>()?;
    RingTensor::new(shape.to_vec(), data)
}

/// Decodes every element of a ring tensor back to a real.
pub fn decode<T: Real>(t: &RingTensor, params: &RingParams) -> Vec<T> {
    t.data
        .iter()
        .map(|&e| T::of(params.decode_scalar(e)))
        .collect()
}

/// Rescales a plaintext tensor at precision `2f` down to precision `f` by an
/// arithmetic shift (floor). Error is below `2^-f` per element.
pub fn truncate(t: &RingTensor, params: &RingParams) -> RingTensor {
    t.shift_right_signed(params.frac_bits)
}
