//! A small CPU convolutional network engine with explicit backpropagation.
//!
//! Layers cache what their backward pass needs during `forward`, and
//! `backward` accumulates parameter gradients into [`Param::grad`]. In the
//! default deterministic mode, gradient accumulation across batch items runs
//! in item order, so results do not depend on the thread count.

mod layers;
pub mod loss;
pub mod optim;

use std::cell::Cell;

use rand::Rng;

pub use layers::{sigmoid, BatchNorm2d, Conv2d, Dropout, Layer, LeakyRelu, Linear, MaxPool2, Relu, Sigmoid, Upsample2};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

thread_local! {
    static DETERMINISTIC: Cell<bool> = const { Cell::new(true) };
}

/// Select, for the calling thread, between ordered gradient reduction
/// (bit-reproducible) and rayon's work-stealing reduction (association order
/// may vary between runs).
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.with(|d| d.set(on));
}

pub fn deterministic() -> bool {
    DETERMINISTIC.with(|d| d.get())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Learned by the optimizer when trainable.
    Weight,
    /// Running statistic; serialized but never optimized.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>, kind: ParamKind) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Param {
            name: name.into(),
            shape,
            value,
            grad: vec![T::zero(); n],
            trainable: kind == ParamKind::Weight,
            kind,
        }
    }

    /// `U(-bound, bound)` initialisation.
    pub fn uniform<R: Rng + ?Sized>(name: impl Into<String>, shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
        Param::new(name, shape, value, ParamKind::Weight)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn learnable(&self) -> bool {
        self.trainable && self.kind == ParamKind::Weight
    }
}

/// Layers applied in order.
#[derive(Clone, Debug)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    /// Backpropagate `grad` (w.r.t. the last forward output).
    ///
    /// Stops below the lowest layer holding a trainable parameter unless the
    /// input gradient is requested. With `param_grads == false` only the
    /// input gradient is computed and parameter gradients are left untouched.
    pub fn backward(&mut self, grad: Tensor<T>, need_input_grad: bool, param_grads: bool) -> Option<Tensor<T>> {
        let lowest = if need_input_grad {
            0
        } else if !param_grads {
            return None;
        } else {
            match self.layers.iter().position(|l| l.params().iter().any(|p| p.learnable())) {
                Some(i) => i,
                None => return None,
            }
        };
        let mut g = grad;
        for i in (lowest..self.layers.len()).rev() {
            let need_dx = i > lowest || need_input_grad;
            match self.layers[i].backward(g, need_dx, param_grads) {
                Some(next) => g = next,
                None => {
                    debug_assert!(!need_dx);
                    return None;
                }
            }
        }
        if need_input_grad {
            Some(g)
        } else {
            None
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Reset every dropout layer's mask stream.
    pub fn reseed_dropout(&mut self, seed: u64) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Layer::Dropout(d) = l {
                d.reseed(crate::corruption::derive_seed(seed, i as u64));
            }
        }
    }
}
