//! Dense NCHW activations.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batch of `n` feature maps with `c` channels of `h×w`, row-major NCHW.
/// Fully-connected activations use `h = w = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::Shape {
                expected: format!("{want} elements for {shape:?}"),
                got: data.len().to_string(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Stack equally sized single-channel planes into an `n×1×h×w` batch.
    pub fn from_planes<'a, I>(h: usize, w: usize, planes: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [T]>,
    {
        let mut data = Vec::new();
        let mut n = 0;
        for p in planes {
            if p.len() != h * w {
                return Err(Error::Shape {
                    expected: format!("{h}x{w} plane"),
                    got: format!("{} pixels", p.len()),
                });
            }
            data.extend_from_slice(p);
            n += 1;
        }
        Ok(Tensor {
            shape: [n, 1, h, w],
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self, i: usize) -> &[T] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn expect_shape(&self, what: &str, c: usize, h: usize, w: usize) -> Result<()> {
        if self.c() != c || self.h() != h || self.w() != w || self.n() == 0 {
            return Err(Error::Shape {
                expected: format!("{what} of Bx{c}x{h}x{w} (B >= 1)"),
                got: format!("{:?}", self.shape),
            });
        }
        Ok(())
    }

    /// Per-item, per-channel spatial mean: `n×c×h×w → n×c×1×1`.
    pub fn spatial_mean(&self) -> Self {
        let hw = self.h() * self.w();
        let inv = T::one() / T::of(hw as f64);
        let data = self
            .data
            .chunks(hw.max(1))
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        Tensor {
            shape: [self.n(), self.c(), 1, 1],
            data,
        }
    }
}
