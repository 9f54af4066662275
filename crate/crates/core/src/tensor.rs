//! Dense `N x C x H x W` storage.
//!
//! Everything in the crate (images, feature maps, attention maps, cost
//! volumes, disparity fields) is a rank-4 row-major array. Attention maps use
//! the layout `N x H x W x W`, cost volumes `N x P x H x W`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Scalar type used throughout. `f64` unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// `(batch, channels, height, width)`.
pub type Shape = [usize; 4];

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<Real>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::invalid(
                "Tensor::new",
                format!(
                    "data length {} does not match shape {:?}",
                    data.len(),
                    shape
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: Real) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> Real) -> Self {
        let mut data = Vec::with_capacity(numel(shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for y in 0..shape[2] {
                    for x in 0..shape[3] {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: Real, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z as Real * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: Shape, lo: Real, hi: Real, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| lo + (hi - lo) * rng.random::<f64>() as Real)
            .collect();
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[Real] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + y) * ws + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> Real {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: Real) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The single value of a `1x1x1x1` tensor.
    pub fn item(&self) -> Real {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        crate::error::ensure_shape("zip_map", self.shape, other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> Real {
        self.sum() / self.data.len() as Real
    }

    pub fn dot(&self, other: &Tensor) -> Real {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }

    pub fn max(&self) -> Real {
        self.data.iter().copied().fold(Real::NEG_INFINITY, Real::max)
    }

    pub fn min(&self) -> Real {
        self.data.iter().copied().fold(Real::INFINITY, Real::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies batch item `n` out as a `1 x C x H x W` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let per = numel([1, self.shape[1], self.shape[2], self.shape[3]]);
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            crate::error::ensure_shape(
                "stack",
                [1, first.shape[1], first.shape[2], first.shape[3]],
                [1, t.shape[1], t.shape[2], t.shape[3]],
            )?;
            data.extend_from_slice(&t.data);
            n += t.shape[0];
        }
        Ok(Tensor {
            shape: [n, first.shape[1], first.shape[2], first.shape[3]],
            data,
        })
    }

    /// Horizontal mirror.
    pub fn flip_x(&self) -> Tensor {
        let w = self.shape[3];
        Tensor::from_fn(self.shape, |n, c, y, x| self.at(n, c, y, w - 1 - x))
    }
}
