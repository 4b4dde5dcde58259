//! Dense tensors, precision casting and a reverse-mode autodiff tape.
//!
//! Values are held as `f64` regardless of [`DType`]; the dtype records which
//! rounding has been applied, so an `F16` tensor only ever contains values
//! that are exactly representable in IEEE-754 binary16. All arithmetic runs
//! in `f64`, which is the "accumulate in FP32 or wider" rule for
//! half-precision weights.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

use std::fmt;
use std::sync::Arc;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, grad_check_sampled};
pub use tape::{Gradients, Op, PrimitiveKind, Tape, Var};

/// Largest finite binary16 magnitude.
pub const F16_MAX: f64 = 65504.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F64,
    F32,
    F16,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::F32 => "f32",
            DType::F16 => "f16",
        }
    }

    pub fn byte_size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f64" => Some(DType::F64),
            "f32" => Some(DType::F32),
            "f16" => Some(DType::F16),
            _ => None,
        }
    }

    /// Rounds one value into this precision.
    ///
    /// Binary16 uses round-to-nearest-even and saturates to ±65504 instead of
    /// overflowing to infinity.
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F64 => v,
            DType::F32 => v as f32 as f64,
            DType::F16 => f16::from_f64(v.clamp(-F16_MAX, F16_MAX)).to_f64(),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Immutable row-major tensor. Cloning shares the buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({:?}, {}", self.shape, self.dtype)?;
        if self.data.len() <= 8 {
            write!(f, ", {:?}", self.data)?;
        }
        f.write_str(")")
    }
}

impl Tensor {
    /// Builds an `F64` tensor; fails if the buffer does not fill the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self {
            shape,
            dtype: DType::F64,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            dtype: DType::F64,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            dtype: self.dtype,
            data: Arc::clone(&self.data),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Element `[r, c]` of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn rows(&self, start: usize, end: usize) -> Self {
        let w = self.shape[1];
        Self::from_parts(vec![end - start, w], self.data[start * w..end * w].to_vec())
    }

    /// Casts to `target`, rounding every value with [`DType::round`].
    pub fn cast(&self, target: DType) -> Self {
        if target == self.dtype || target == DType::F64 {
            return Self {
                shape: self.shape.clone(),
                dtype: target,
                data: Arc::clone(&self.data),
            };
        }
        Self {
            shape: self.shape.clone(),
            dtype: target,
            data: Arc::new(self.data.iter().map(|&v| target.round(v)).collect()),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Free-function form of [`Tensor::cast`].
pub fn cast(t: &Tensor, target: DType) -> Tensor {
    t.cast(target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent binary16 rounding: enumerate every finite half value and
    /// pick the nearest, ties to the even significand.
    fn f16_oracle(v: f64) -> f64 {
        let mut best = f64::NAN;
        let mut best_bits = 0u16;
        let mut best_dist = f64::INFINITY;
        for bits in 0u16..=0xffff {
            let exp = (bits >> 10) & 0x1f;
            if exp == 0x1f {
                continue;
            }
            let mant = f64::from(bits & 0x3ff);
            let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
            let x = if exp == 0 {
                sign * mant * 2f64.powi(-24)
            } else {
                sign * (1.0 + mant / 1024.0) * 2f64.powi(i32::from(exp) - 15)
            };
            let d = (x - v).abs();
            if d < best_dist || (d == best_dist && (bits & 1) == 0 && (best_bits & 1) == 1) {
                best = x;
                best_bits = bits;
                best_dist = d;
            }
        }
        best
    }

    #[test]
    fn cast_examples() {
        let t = Tensor::new(vec![3], vec![1.0, 0.1f32 as f64, 1e6]).unwrap();
        let h = t.cast(DType::F16);
        assert_eq!(h.data()[0], 1.0);
        assert_eq!(h.data()[1], 0.0999755859375);
        assert_eq!(h.data()[2], 65504.0);
        assert_eq!(h.cast(DType::F32).data()[0], 1.0);
        assert_eq!(Tensor::scalar(-1e9).cast(DType::F16).item(), -65504.0);
    }

    #[test]
    fn cast_matches_enumeration_oracle() {
        let probes = [
            0.1, -0.3, 1.0 / 3.0, 1.00048828125, 1.000732421875, 2049.0, 2051.0, 6.0e-8,
            3.0e-5, 1234.567, -0.000123, 65519.0,
        ];
        for &p in &probes {
            assert_eq!(DType::F16.round(p), f16_oracle(p), "value {p}");
        }
    }

    #[test]
    fn reshape_rejects_bad_extent() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(t.reshape(&[4, 2]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn f16_cast_is_idempotent(v in -1.0e6f64..1.0e6) {
            let once = DType::F16.round(v);
            prop_assert_eq!(DType::F16.round(once).to_bits(), once.to_bits());
            prop_assert!(once.abs() <= F16_MAX);
            // binary16 values survive a trip through f32
            prop_assert_eq!(DType::F32.round(once), once);
        }
    }
}
