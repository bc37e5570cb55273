//! Dense row-major tensors and the pure operations the rest of the crate composes.
//!
//! Values are held as `f64`. In [`Precision::F32`] mode every produced value is
//! rounded to the nearest `f32`, so a tensor's contents are always exactly
//! representable in its declared precision.

use std::fmt;

use crate::kernels;

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self == Precision::F32 {
            for v in xs {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" | "32" => Some(Precision::F32),
            "f64" | "64" => Some(Precision::F64),
            _ => None,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: output extent is not positive (input {input}, window {window}, stride {stride}, pad {pad})")]
    NonPositiveExtent {
        op: &'static str,
        input: usize,
        window: usize,
        stride: usize,
        pad: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// N-dimensional real array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    /// Builds an `F64` tensor, validating the shape and finiteness of `data`.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Self::with_precision(shape, data, Precision::F64)
    }

    pub fn with_precision(
        shape: impl Into<Vec<usize>>,
        mut data: Vec<f64>,
        precision: Precision,
    ) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        precision.round_slice(&mut data);
        Tensor {
            shape,
            data,
            precision,
        }
        .checked("new")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>, precision: Precision) -> Self {
        Self::full(shape, 0.0, precision)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64, precision: Precision) -> Self {
        let shape = shape.into();
        assert!(!shape.contains(&0), "zero extent in {shape:?}");
        assert!(value.is_finite());
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![precision.round(value); n],
            precision,
        }
    }

    pub fn scalar(value: f64, precision: Precision) -> Self {
        Self::full(vec![1], value, precision)
    }

    /// Crate-internal constructor for kernel outputs; rounds and checks finiteness.
    pub(crate) fn from_parts(
        shape: Vec<usize>,
        mut data: Vec<f64>,
        precision: Precision,
        op: &'static str,
    ) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        precision.round_slice(&mut data);
        Tensor {
            shape,
            data,
            precision,
        }
        .checked(op)
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Re-rounds the contents into another precision mode.
    pub fn to_precision(&self, precision: Precision) -> Self {
        let mut data = self.data.clone();
        precision.round_slice(&mut data);
        Tensor {
            shape: self.shape.clone(),
            data,
            precision,
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: n,
                actual: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            precision: self.precision,
        })
    }

    /// In-place accumulation `self += other`. Single writer.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = self.precision.round(*a + *b);
        }
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op: "add_assign" })
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::from_parts(self.shape.clone(), data, self.precision, op)
    }

    fn zip(&self, op: &'static str, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(op, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_parts(self.shape.clone(), data, self.precision, op)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map("sigmoid", sigmoid)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.map("tanh", f64::tanh)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.map("relu", relu)
    }

    pub fn scale(&self, k: f64) -> Result<Tensor> {
        self.map("scale", |v| v * k)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("sub", other, |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("mul", other, |a, b| a * b)
    }

    /// Cross-correlation of a `[C_in,H,W]` map (or a `[B,C_in,H,W]` batch) with
    /// `[C_out,C_in,kh,kw]` weights.
    pub fn conv2d(
        &self,
        spec: &kernels::ConvSpec,
        weights: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (batch, geom) = kernels::conv_geometry(spec, &self.shape, weights.shape(), bias.map(|b| b.shape()))?;
        let mut out = vec![0.0; batch * geom.out_len()];
        kernels::conv2d_forward_batch(
            &self.data,
            &weights.data,
            bias.map(|b| b.data.as_slice()),
            &geom,
            batch,
            &mut out,
        );
        let shape = kernels::with_batch(self.rank() == 4, batch, &geom.out_shape());
        Tensor::from_parts(shape, out, self.precision, "conv2d")
    }

    /// Max pooling without padding. Returns the pooled map and the flat input
    /// index that won each window (first maximum in scan order).
    pub fn maxpool2d(&self, window: (usize, usize), stride: (usize, usize)) -> Result<(Tensor, Vec<usize>)> {
        let (batch, geom) = kernels::pool_geometry(&self.shape, window, stride)?;
        let mut out = vec![0.0; batch * geom.out_len()];
        let mut argmax = vec![0usize; out.len()];
        kernels::maxpool_forward_batch(&self.data, &geom, batch, &mut out, &mut argmax);
        let shape = kernels::with_batch(self.rank() == 4, batch, &geom.out_shape());
        Ok((Tensor::from_parts(shape, out, self.precision, "maxpool2d")?, argmax))
    }

    /// Per-channel mean over spatial positions: `[C,H,W] -> [C]`, `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (batch, c, s) = match self.shape.as_slice() {
            [c, h, w] => (1, *c, h * w),
            [b, c, h, w] => (*b, *c, h * w),
            _ => {
                return Err(TensorError::Invalid {
                    op: "global_avg_pool",
                    msg: format!("expected a rank-3 or rank-4 map, got {:?}", self.shape),
                })
            }
        };
        let mut out = vec![0.0; batch * c];
        kernels::gap_forward(&self.data, batch * c, s, &mut out);
        let shape = if self.rank() == 4 { vec![batch, c] } else { vec![c] };
        Tensor::from_parts(shape, out, self.precision, "global_avg_pool")
    }

    /// Affine map `x·W + b` with `W` of shape `[N, M]`; accepts `[N]` or `[B, N]` input.
    pub fn dense(&self, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (batch, n, m) = kernels::dense_geometry(&self.shape, weights.shape(), bias.map(|b| b.shape()))?;
        let mut out = vec![0.0; batch * m];
        kernels::dense_forward(&self.data, &weights.data, bias.map(|b| b.data.as_slice()), batch, n, m, &mut out);
        let shape = if self.rank() == 2 { vec![batch, m] } else { vec![m] };
        Tensor::from_parts(shape, out, self.precision, "dense")
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn construction_checks_length_and_extent() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(Tensor::new(vec![0, 2], vec![]), Err(TensorError::ZeroExtent(_))));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn elementwise_values() {
        let z = t(&[1], &[0.0]);
        assert_eq!(z.sigmoid().unwrap().data(), &[0.5]);
        assert_eq!(z.tanh().unwrap().data(), &[0.0]);
        let s = t(&[1], &[-2.0]).sigmoid().unwrap().data()[0];
        assert!((s - 0.11920292).abs() < 1e-8);
        assert_eq!(t(&[1], &[-1.0]).relu().unwrap().data(), &[0.0]);
    }

    #[test]
    fn binary_ops_reject_shape_mismatch() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
        assert!(a.mul(&b).is_err());
        assert_eq!(a.mul(&a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(a.sub(&a).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn overflow_is_surfaced() {
        let a = t(&[1], &[1e300]);
        assert!(matches!(a.mul(&a), Err(TensorError::NonFinite { op: "mul" })));
    }

    #[test]
    fn f32_mode_rounds_every_value() {
        let a = Tensor::with_precision(vec![1], vec![0.1], Precision::F32).unwrap();
        assert_eq!(a.data()[0], 0.1f32 as f64);
        let b = a.add(&a).unwrap();
        assert_eq!(b.data()[0], (0.1f32 as f64 + 0.1f32 as f64) as f32 as f64);
    }

    #[test]
    fn dense_hand_values() {
        let x = t(&[2], &[2.0, 3.0]);
        let w = t(&[2, 1], &[1.0, 1.0]);
        let b = t(&[1], &[1.0]);
        assert_eq!(x.dense(&w, Some(&b)).unwrap().data(), &[6.0]);

        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(x.dense(&eye, None).unwrap().data(), x.data());
        let zw = t(&[2, 1], &[0.0, 0.0]);
        assert_eq!(x.dense(&zw, Some(&b)).unwrap().data(), &[1.0]);
        assert!(x.dense(&t(&[3, 1], &[0.0; 3]), None).is_err());
    }

    #[test]
    fn global_avg_pool_values() {
        let m = t(&[1, 2, 2], &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(m.global_avg_pool().unwrap().data(), &[3.0]);
        let c = Tensor::full(vec![128, 6, 6], 0.25, Precision::F64);
        let g = c.global_avg_pool().unwrap();
        assert_eq!(g.shape(), &[128]);
        assert!(g.data().iter().all(|&v| v == 0.25));
    }
}
