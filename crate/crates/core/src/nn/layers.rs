use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{deterministic, Mode, Param, ParamKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Linear(Linear<T>),
    Relu(Relu),
    LeakyRelu(LeakyRelu<T>),
    Sigmoid(Sigmoid<T>),
    MaxPool(MaxPool2),
    Upsample(Upsample2),
    Dropout(Dropout<T>),
    BatchNorm(BatchNorm2d<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::LeakyRelu(l) => Ok(l.forward(x)),
            Layer::Sigmoid(l) => Ok(l.forward(x)),
            Layer::MaxPool(l) => l.forward(x),
            Layer::Upsample(l) => Ok(l.forward(x)),
            Layer::Dropout(l) => Ok(l.forward(x, mode)),
            Layer::BatchNorm(l) => l.forward(x, mode),
        }
    }

    pub fn backward(&mut self, g: Tensor<T>, need_dx: bool, param_grads: bool) -> Option<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(g, need_dx, param_grads),
            Layer::Linear(l) => l.backward(g, need_dx, param_grads),
            Layer::BatchNorm(l) => l.backward(g, need_dx, param_grads),
            _ if !need_dx => None,
            Layer::Relu(l) => Some(l.backward(g)),
            Layer::LeakyRelu(l) => Some(l.backward(g)),
            Layer::Sigmoid(l) => Some(l.backward(g)),
            Layer::MaxPool(l) => Some(l.backward(g)),
            Layer::Upsample(l) => Some(l.backward(g)),
            Layer::Dropout(l) => Some(l.backward(g)),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta, &l.running_mean, &l.running_var],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![
                &mut l.gamma,
                &mut l.beta,
                &mut l.running_mean,
                &mut l.running_var,
            ],
            _ => vec![],
        }
    }
}

fn missing_cache() -> ! {
    panic!("backward called without a preceding forward")
}

// ---------------------------------------------------------------- conv

/// Square-kernel 2D convolution, zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            weight: Param::uniform(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                he_bound(fan_in),
                rng,
            ),
            bias: Param::uniform(format!("{name}.bias"), vec![out_channels], bound, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input: None,
        }
    }

    pub fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn k_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, col: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let ohw = oh * ow;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let ohw = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((c * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.c() != self.in_channels || x.h() + 2 * self.padding < self.kernel || x.w() + 2 * self.padding < self.kernel {
            return Err(Error::Shape {
                expected: format!("{} input channels for {}", self.in_channels, self.weight.name),
                got: format!("{:?}", x.shape()),
            });
        }
        let (h, w) = (x.h(), x.w());
        let (oh, ow) = (self.out_dim(h), self.out_dim(w));
        let (kl, ohw, cout) = (self.k_len(), oh * ow, self.out_channels);
        let mut out = Tensor::zeros([x.n(), cout, oh, ow]);
        let this = &*self;
        out.data_mut()
            .par_chunks_mut(cout * ohw)
            .enumerate()
            .for_each_init(
                || vec![T::zero(); kl * ohw],
                |col, (i, dst)| {
                    this.im2col(x.item(i), h, w, oh, ow, col);
                    T::gemm(cout, kl, ohw, T::one(), &this.weight.value, kl as isize, 1, col, ohw as isize, 1, T::zero(), dst, ohw as isize, 1);
                    for (co, row) in dst.chunks_mut(ohw).enumerate() {
                        let b = this.bias.value[co];
                        row.iter_mut().for_each(|v| *v += b);
                    }
                },
            );
        self.input = Some(x.clone());
        Ok(out)
    }

    /// Per-item contribution: optional (dW, db) and optional dx.
    fn item_backward(
        &self,
        x: &[T],
        g: &[T],
        dims: (usize, usize, usize, usize),
        want_dw: bool,
        need_dx: bool,
        col: &mut Vec<T>,
    ) -> (Option<(Vec<T>, Vec<T>)>, Option<Vec<T>>) {
        let (h, w, oh, ow) = dims;
        let (kl, ohw, cout) = (self.k_len(), oh * ow, self.out_channels);
        let dw = want_dw.then(|| {
            col.resize(kl * ohw, T::zero());
            self.im2col(x, h, w, oh, ow, col);
            let mut dw = vec![T::zero(); cout * kl];
            T::gemm(cout, ohw, kl, T::one(), g, ohw as isize, 1, col, 1, ohw as isize, T::zero(), &mut dw, kl as isize, 1);
            let db = g.chunks(ohw).map(|r| r.iter().copied().sum()).collect();
            (dw, db)
        });
        let dx = need_dx.then(|| {
            col.resize(kl * ohw, T::zero());
            T::gemm(kl, cout, ohw, T::one(), &self.weight.value, 1, kl as isize, g, ohw as isize, 1, T::zero(), col, ohw as isize, 1);
            let mut dx = vec![T::zero(); self.in_channels * h * w];
            self.col2im(col, h, w, oh, ow, &mut dx);
            dx
        });
        (dw, dx)
    }

    pub fn backward(&mut self, g: Tensor<T>, need_dx: bool, param_grads: bool) -> Option<Tensor<T>> {
        let x = self.input.as_ref().unwrap_or_else(|| missing_cache());
        let want_dw = param_grads && self.weight.learnable();
        if !want_dw && !need_dx {
            return None;
        }
        let dims = (x.h(), x.w(), g.h(), g.w());
        let n = x.n();
        let item = self.in_channels * x.h() * x.w();
        let mut dx_all = need_dx.then(|| Tensor::zeros(x.shape()));
        if deterministic() {
            let mut col = Vec::new();
            let mut acc_w = vec![T::zero(); self.weight.len()];
            let mut acc_b = vec![T::zero(); self.bias.len()];
            for i in 0..n {
                let (dw, dx) = self.item_backward(x.item(i), g.item(i), dims, want_dw, need_dx, &mut col);
                if let Some((dw, db)) = dw {
                    acc_w.iter_mut().zip(&dw).for_each(|(a, &v)| *a += v);
                    acc_b.iter_mut().zip(&db).for_each(|(a, &v)| *a += v);
                }
                if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                    all.data_mut()[i * item..(i + 1) * item].copy_from_slice(&dx);
                }
            }
            if want_dw {
                add_into(&mut self.weight.grad, &acc_w);
                add_into(&mut self.bias.grad, &acc_b);
            }
        } else {
            let this = &*self;
            let parts: Vec<_> = (0..n)
                .into_par_iter()
                .map_init(Vec::new, |col, i| this.item_backward(x.item(i), g.item(i), dims, want_dw, need_dx, col))
                .collect();
            let mut dws = Vec::with_capacity(n);
            for (i, (dw, dx)) in parts.into_iter().enumerate() {
                if let Some(dw) = dw {
                    dws.push(dw);
                }
                if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                    all.data_mut()[i * item..(i + 1) * item].copy_from_slice(&dx);
                }
            }
            if let Some((sw, sb)) = dws.into_par_iter().reduce_with(|mut a, b| {
                add_into(&mut a.0, &b.0);
                add_into(&mut a.1, &b.1);
                a
            }) {
                add_into(&mut self.weight.grad, &sw);
                add_into(&mut self.bias.grad, &sb);
            }
        }
        dx_all
    }
}

fn add_into<T: Scalar>(acc: &mut [T], v: &[T]) {
    acc.iter_mut().zip(v).for_each(|(a, &b)| *a += b);
}

// ---------------------------------------------------------------- linear

/// He-uniform weight bound, `sqrt(6 / fan_in)`; keeps activation variance
/// steady through rectifier stacks.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Fully connected layer over the flattened `c·h·w` item features.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Linear {
            weight: Param::uniform(
                format!("{name}.weight"),
                vec![out_features, in_features],
                he_bound(in_features),
                rng,
            ),
            bias: Param::uniform(format!("{name}.bias"), vec![out_features], bound, rng),
            in_features,
            out_features,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.item_len() != self.in_features {
            return Err(Error::Shape {
                expected: format!("{} features for {}", self.in_features, self.weight.name),
                got: format!("{:?}", x.shape()),
            });
        }
        let (n, fi, fo) = (x.n(), self.in_features, self.out_features);
        let mut out = Tensor::zeros([n, fo, 1, 1]);
        for (row, b) in out.data_mut().chunks_mut(fo).zip(std::iter::repeat(&self.bias.value)) {
            row.copy_from_slice(b);
        }
        // out (n×fo) += x (n×fi) · Wᵀ (fi×fo)
        T::gemm(n, fi, fo, T::one(), x.data(), fi as isize, 1, &self.weight.value, 1, fi as isize, T::one(), out.data_mut(), fo as isize, 1);
        self.input = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, g: Tensor<T>, need_dx: bool, param_grads: bool) -> Option<Tensor<T>> {
        let x = self.input.as_ref().unwrap_or_else(|| missing_cache());
        let (n, fi, fo) = (x.n(), self.in_features, self.out_features);
        if param_grads && self.weight.learnable() {
            // dW (fo×fi) += gᵀ (fo×n) · x (n×fi)
            T::gemm(fo, n, fi, T::one(), g.data(), 1, fo as isize, x.data(), fi as isize, 1, T::one(), &mut self.weight.grad, fi as isize, 1);
            for row in g.data().chunks(fo) {
                add_into(&mut self.bias.grad, row);
            }
        }
        need_dx.then(|| {
            let mut dx = Tensor::zeros(x.shape());
            T::gemm(n, fo, fi, T::one(), g.data(), fo as isize, 1, &self.weight.value, fi as isize, 1, T::zero(), dx.data_mut(), fi as isize, 1);
            dx
        })
    }
}

// ---------------------------------------------------------------- activations

#[derive(Clone, Debug, Default)]
pub struct Relu {
    active: Vec<bool>,
}

impl Relu {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.active = x.data().iter().map(|&v| v > T::zero()).collect();
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn backward<T: Scalar>(&mut self, mut g: Tensor<T>) -> Tensor<T> {
        for (v, &a) in g.data_mut().iter_mut().zip(&self.active) {
            if !a {
                *v = T::zero();
            }
        }
        g
    }
}

#[derive(Clone, Debug)]
pub struct LeakyRelu<T> {
    pub slope: T,
    active: Vec<bool>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu {
            slope: T::of(slope),
            active: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.active = x.data().iter().map(|&v| v > T::zero()).collect();
        let s = self.slope;
        x.map(|v| if v > T::zero() { v } else { v * s })
    }

    pub fn backward(&mut self, mut g: Tensor<T>) -> Tensor<T> {
        for (v, &a) in g.data_mut().iter_mut().zip(&self.active) {
            if !a {
                *v *= self.slope;
            }
        }
        g
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sigmoid<T> {
    out: Vec<T>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.map(sigmoid);
        self.out = y.data().to_vec();
        y
    }

    pub fn backward(&mut self, mut g: Tensor<T>) -> Tensor<T> {
        for (v, &y) in g.data_mut().iter_mut().zip(&self.out) {
            *v *= y * (T::one() - y);
        }
        g
    }
}

// ---------------------------------------------------------------- resampling

/// 2×2 max pooling, stride 2 (odd trailing rows/cols are dropped).
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    argmax: Vec<u32>,
    in_shape: [usize; 4],
}

impl MaxPool2 {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (x.h(), x.w());
        if h < 2 || w < 2 {
            return Err(Error::Shape {
                expected: "at least 2x2 maps for max pooling".into(),
                got: format!("{:?}", x.shape()),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let planes = x.n() * x.c();
        let mut out = Tensor::zeros([x.n(), x.c(), oh, ow]);
        let mut argmax = vec![0u32; planes * oh * ow];
        out.data_mut()
            .par_chunks_mut(oh * ow)
            .zip(argmax.par_chunks_mut(oh * ow))
            .enumerate()
            .for_each(|(pi, (dst, am))| {
                let src = &x.data()[pi * h * w..(pi + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = 2 * oy * w + 2 * ox;
                        let mut best = base;
                        for cand in [base + 1, base + w, base + w + 1] {
                            if src[cand] > src[best] {
                                best = cand;
                            }
                        }
                        dst[oy * ow + ox] = src[best];
                        am[oy * ow + ox] = best as u32;
                    }
                }
            });
        self.argmax = argmax;
        self.in_shape = x.shape();
        Ok(out)
    }

    pub fn backward<T: Scalar>(&mut self, g: Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = self.in_shape;
        let ohw = g.h() * g.w();
        let mut dx = Tensor::zeros([n, c, h, w]);
        for (pi, (gp, am)) in g.data().chunks(ohw).zip(self.argmax.chunks(ohw)).enumerate() {
            let dst = &mut dx.data_mut()[pi * h * w..(pi + 1) * h * w];
            for (&v, &idx) in gp.iter().zip(am) {
                dst[idx as usize] += v;
            }
        }
        dx
    }
}

/// Nearest-neighbour ×2 upsampling.
#[derive(Clone, Debug, Default)]
pub struct Upsample2;

impl Upsample2 {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (x.h(), x.w());
        let mut out = Tensor::zeros([x.n(), x.c(), 2 * h, 2 * w]);
        for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&mut self, g: Tensor<T>) -> Tensor<T> {
        let (h, w) = (g.h() / 2, g.w() / 2);
        let mut dx = Tensor::zeros([g.n(), g.c(), h, w]);
        for (src, dst) in g.data().chunks(4 * h * w).zip(dx.data_mut().chunks_mut(h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------- regularisers

/// Inverted element-wise dropout; identity in eval mode.
#[derive(Clone, Debug)]
pub struct Dropout<T> {
    pub p: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64, seed: u64) -> Self {
        Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Eval || self.p <= 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = T::of(1.0 / (1.0 - self.p));
        let p = self.p;
        let rng = &mut self.rng;
        let mask: Vec<T> = (0..x.data().len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut y = x.clone();
        y.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, mut g: Tensor<T>) -> Tensor<T> {
        if let Some(mask) = &self.mask {
            g.data_mut().iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
        }
        g
    }
}

/// Per-channel batch normalisation over `(n, h, w)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
    // cached: normalised activations and 1/sqrt(var + eps) per channel
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: [usize; 4],
    train_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.weight"), vec![channels], vec![T::one(); channels], ParamKind::Weight),
            beta: Param::new(format!("{name}.bias"), vec![channels], vec![T::zero(); channels], ParamKind::Weight),
            running_mean: Param::new(format!("{name}.running_mean"), vec![channels], vec![T::zero(); channels], ParamKind::Buffer),
            running_var: Param::new(format!("{name}.running_var"), vec![channels], vec![T::one(); channels], ParamKind::Buffer),
            eps: 1e-5,
            momentum: 0.1,
            xhat: Vec::new(),
            inv_std: Vec::new(),
            shape: [0; 4],
            train_stats: false,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if c != self.gamma.len() {
            return Err(Error::Shape {
                expected: format!("{} channels for {}", self.gamma.len(), self.gamma.name),
                got: format!("{:?}", x.shape()),
            });
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut inv_std = vec![T::zero(); c];
        let mut mean = vec![T::zero(); c];
        let train = mode == Mode::Train;
        for ch in 0..c {
            if train {
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in 0..n {
                    for &v in &x.data()[(i * c + ch) * hw..][..hw] {
                        let v = v.as_f64();
                        s += v;
                        s2 += v * v;
                    }
                }
                let mu = s / m;
                let var = (s2 / m - mu * mu).max(0.0);
                mean[ch] = T::of(mu);
                inv_std[ch] = T::of(1.0 / (var + self.eps).sqrt());
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                let mom = self.momentum;
                let rm = &mut self.running_mean.value[ch];
                *rm = T::of((1.0 - mom) * rm.as_f64() + mom * mu);
                let rv = &mut self.running_var.value[ch];
                *rv = T::of((1.0 - mom) * rv.as_f64() + mom * unbiased);
            } else {
                mean[ch] = self.running_mean.value[ch];
                inv_std[ch] = T::of(1.0 / (self.running_var.value[ch].as_f64() + self.eps).sqrt());
            }
        }
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], self.gamma.value[ch], self.beta.value[ch]);
                for j in off..off + hw {
                    let xh = (x.data()[j] - mu) * is;
                    xhat.data_mut()[j] = xh;
                    y.data_mut()[j] = g * xh + b;
                }
            }
        }
        self.xhat = xhat.into_vec();
        self.inv_std = inv_std;
        self.shape = x.shape();
        self.train_stats = train;
        Ok(y)
    }

    pub fn backward(&mut self, g: Tensor<T>, need_dx: bool, param_grads: bool) -> Option<Tensor<T>> {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let m = T::of((n * hw) as f64);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let dy = g.data()[j];
                    sum_dy[ch] += dy;
                    sum_dy_xhat[ch] += dy * self.xhat[j];
                }
            }
        }
        if param_grads && self.gamma.learnable() {
            add_into(&mut self.gamma.grad, &sum_dy_xhat);
            add_into(&mut self.beta.grad, &sum_dy);
        }
        if !need_dx {
            return None;
        }
        let mut dx = g;
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let (gm, is) = (self.gamma.value[ch], self.inv_std[ch]);
                for j in off..off + hw {
                    let dy = dx.data()[j];
                    dx.data_mut()[j] = if self.train_stats {
                        gm * is / m * (m * dy - sum_dy[ch] - self.xhat[j] * sum_dy_xhat[ch])
                    } else {
                        gm * is * dy
                    };
                }
            }
        }
        Some(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    /// Direct 6-loop convolution.
    fn conv_oracle(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (oh, ow) = (conv.out_dim(x.h()), conv.out_dim(x.w()));
        let mut out = Tensor::zeros([x.n(), conv.out_channels, oh, ow]);
        let k = conv.kernel;
        for n in 0..x.n() {
            for co in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.value[co];
                        for ci in 0..conv.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h() as isize || ix >= x.w() as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * x.c() + ci) * x.h() + iy as usize) * x.w() + ix as usize];
                                    let wv = conv.weight.value[((co * conv.in_channels + ci) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((n * conv.out_channels + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: [usize; 4], r: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut r = rng();
        for stride in [1, 2] {
            let mut conv = Conv2d::<f64>::new("c", 3, 4, 3, stride, 1, &mut r);
            let x = random_tensor([2, 3, 7, 6], &mut r);
            let got = conv.forward(&x).unwrap();
            let want = conv_oracle(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> linear in x (bias aside) → <dx, x> = <g, conv(x) - bias>
        let mut r = rng();
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, &mut r);
        conv.bias.value.iter_mut().for_each(|b| *b = 0.0);
        let x = random_tensor([2, 2, 6, 5], &mut r);
        let y = conv.forward(&x).unwrap();
        let g = random_tensor(y.shape(), &mut r);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let dx = conv.backward(g, true, true).unwrap();
        let rhs: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let dw_dot: f64 = conv.weight.grad.iter().zip(&conv.weight.value).map(|(a, b)| a * b).sum();
        assert!((lhs - dw_dot).abs() < 1e-10);
    }

    #[test]
    fn parallel_reduction_close_to_ordered() {
        let mut r = rng();
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 1, 1, &mut r);
        let x = random_tensor([5, 2, 6, 6], &mut r);
        let g = random_tensor([5, 3, 6, 6], &mut r);
        conv.forward(&x).unwrap();
        let dx_a = conv.backward(g.clone(), true, true).unwrap();
        let gw_a = conv.weight.grad.clone();
        conv.weight.zero_grad();
        crate::nn::set_deterministic(false);
        let dx_b = conv.backward(g, true, true).unwrap();
        crate::nn::set_deterministic(true);
        assert_eq!(dx_a, dx_b);
        for (a, b) in gw_a.iter().zip(&conv.weight.grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 0.0, 0.0, 2.0, 3.0, 0.0, 7.0]).unwrap();
        let mut pool = MaxPool2::default();
        let y = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let dx = pool.backward(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let mut up = Upsample2;
        let y = up.forward(&x);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let dx = up.backward(Tensor::filled([1, 1, 2, 4], 1.0));
        assert_eq!(dx.data(), &[4.0, 4.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut d = Dropout::<f64>::new(0.5, 1);
        let x = Tensor::filled([1, 1, 4, 4], 2.0);
        assert_eq!(d.forward(&x, Mode::Eval), x);
        let y = d.forward(&x, Mode::Train);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn batchnorm_normalises_per_channel() {
        let mut r = rng();
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        let x = random_tensor([3, 2, 2, 2], &mut r).map(|v| 3.0 * v + 1.0);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|i| y.data()[(i * 2 + ch) * 4..][..4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
