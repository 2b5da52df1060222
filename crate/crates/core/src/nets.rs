//! Encoder (analysis part), decoder (reconstruction part), discriminator and
//! the patient-level classifier head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corruption::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm2d, Conv2d, Dropout, Layer, LeakyRelu, Linear, MaxPool2, Mode, Param, Relu, Sequential, Sigmoid,
    Upsample2,
};
use crate::preprocess::GraySlice;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Input normalisation applied before every network.
pub const NORM_MEAN: f64 = 0.485;
pub const NORM_STD: f64 = 0.229;

/// `(x - 0.485) / 0.229` per pixel, stacked into an `n×1×h×w` batch.
pub fn normalized_batch<T: Scalar>(slices: &[&GraySlice<T>]) -> Result<Tensor<T>> {
    let first = slices.first().ok_or_else(|| crate::error::invalid("empty slice batch"))?;
    let (h, w) = (first.height, first.width);
    let (m, s) = (T::of(NORM_MEAN), T::of(NORM_STD));
    let planes: Vec<Vec<T>> = slices
        .iter()
        .map(|sl| sl.pixels.iter().map(|&p| (p - m) / s).collect())
        .collect();
    Tensor::from_planes(h, w, planes.iter().map(|p| p.as_slice()))
}

/// Unnormalised `n×1×h×w` batch.
pub fn raw_batch<T: Scalar>(slices: &[&GraySlice<T>]) -> Result<Tensor<T>> {
    let first = slices.first().ok_or_else(|| crate::error::invalid("empty slice batch"))?;
    Tensor::from_planes(first.height, first.width, slices.iter().map(|s| s.pixels.as_slice()))
}

fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            in_channels: 1,
            channels: vec![32, 64, 128],
            kernel: 3,
        }
    }
}

impl EncoderSpec {
    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("encoder has stages")
    }
    pub fn downsample(&self) -> usize {
        1 << self.channels.len()
    }
    pub fn param_count(&self) -> usize {
        let mut cin = self.in_channels;
        self.channels
            .iter()
            .map(|&c| {
                let n = conv_params(cin, c, self.kernel);
                cin = c;
                n
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec {
            in_channels: 128,
            channels: vec![64, 32, 16],
            out_channels: 1,
            kernel: 3,
        }
    }
}

impl DecoderSpec {
    pub fn param_count(&self) -> usize {
        let mut cin = self.in_channels;
        let mut n = 0;
        for &c in &self.channels {
            n += conv_params(cin, c, self.kernel);
            cin = c;
        }
        n + conv_params(cin, self.out_channels, self.kernel)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    /// Input `(height, width)`; fixes the width of the final dense layer.
    pub input_size: (usize, usize),
    pub dropout: f64,
    pub leaky_slope: f64,
    pub kernel: usize,
}

impl DiscriminatorSpec {
    pub fn for_input(height: usize, width: usize) -> Self {
        DiscriminatorSpec {
            in_channels: 1,
            channels: vec![16, 32, 64, 128],
            input_size: (height, width),
            dropout: 0.25,
            leaky_slope: 0.2,
            kernel: 3,
        }
    }

    /// Spatial dims after the strided stages.
    pub fn feature_dims(&self) -> (usize, usize) {
        let shrink = |mut d: usize| {
            for _ in &self.channels {
                d = (d - 1) / 2 + 1;
            }
            d
        };
        (shrink(self.input_size.0), shrink(self.input_size.1))
    }

    pub fn dense_in(&self) -> usize {
        let (h, w) = self.feature_dims();
        self.channels.last().copied().unwrap_or(self.in_channels) * h * w
    }

    pub fn param_count(&self) -> usize {
        let mut cin = self.in_channels;
        let mut n = 0;
        for (i, &c) in self.channels.iter().enumerate() {
            n += conv_params(cin, c, self.kernel);
            if i > 0 {
                n += 4 * c; // gamma, beta, running mean, running var
            }
            cin = c;
        }
        n + self.dense_in() + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierHeadSpec {
    pub in_features: usize,
    pub hidden: Vec<usize>,
    pub num_categories: usize,
}

impl ClassifierHeadSpec {
    pub fn new(num_categories: usize) -> Self {
        ClassifierHeadSpec {
            in_features: 128,
            hidden: vec![64, 32],
            num_categories,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut fi = self.in_features;
        let mut n = 0;
        for &h in &self.hidden {
            n += fi * h + h;
            fi = h;
        }
        n + fi * self.num_categories + self.num_categories
    }
}

/// Architecture descriptor stored with every checkpointed component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Encoder(EncoderSpec),
    Decoder(DecoderSpec),
    Discriminator(DiscriminatorSpec),
    ClassifierHead(ClassifierHeadSpec),
}

impl Architecture {
    pub fn param_count(&self) -> usize {
        match self {
            Architecture::Encoder(s) => s.param_count(),
            Architecture::Decoder(s) => s.param_count(),
            Architecture::Discriminator(s) => s.param_count(),
            Architecture::ClassifierHead(s) => s.param_count(),
        }
    }
}

/// Common surface of the four networks.
pub trait Network<T: Scalar> {
    fn architecture(&self) -> Architecture;
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// SHA-256 over parameter names and values, for change detection.
pub fn params_hash<T: Scalar>(params: &[&Param<T>]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        for v in &p.value {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn seeded(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, salt))
}

// ---------------------------------------------------------------- encoder

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub spec: EncoderSpec,
    pub net: Sequential<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(spec: EncoderSpec, seed: u64) -> Self {
        let mut rng = seeded(seed, 0xE1);
        let mut layers = Vec::new();
        let mut cin = spec.in_channels;
        for (i, &c) in spec.channels.iter().enumerate() {
            layers.push(Layer::Conv(Conv2d::new(
                &format!("encoder.conv{}", i + 1),
                cin,
                c,
                spec.kernel,
                1,
                spec.kernel / 2,
                &mut rng,
            )));
            layers.push(Layer::Relu(Relu::default()));
            layers.push(Layer::MaxPool(MaxPool2::default()));
            cin = c;
        }
        Encoder {
            spec,
            net: Sequential::new(layers),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let f = self.spec.downsample();
        if x.n() == 0 || x.c() != self.spec.in_channels || x.h() < f || x.w() < f || x.h() % f != 0 || x.w() % f != 0 {
            return Err(Error::Shape {
                expected: format!("Bx{}xHxW with H, W multiples of {f}", self.spec.in_channels),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// `B×1×H×W → B×128×H/8×W/8`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.net.forward(x, mode)
    }

    /// Spatial mean of the encoder features: `B×128`.
    pub fn extract_feature(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward(x, mode)?.spatial_mean())
    }

    pub fn backward(&mut self, g: Tensor<T>, need_input_grad: bool, param_grads: bool) -> Option<Tensor<T>> {
        self.net.backward(g, need_input_grad, param_grads)
    }

    /// Conv layers in order.
    pub fn convs(&self) -> Vec<&Conv2d<T>> {
        self.net
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c),
                _ => None,
            })
            .collect()
    }

    /// Freeze every conv layer except the last `trainable_last`.
    pub fn freeze_all_but_last(&mut self, trainable_last: usize) {
        let total = self.spec.channels.len();
        let mut idx = 0;
        for l in &mut self.net.layers {
            if let Layer::Conv(c) = l {
                let on = idx + trainable_last >= total;
                c.weight.trainable = on;
                c.bias.trainable = on;
                idx += 1;
            }
        }
    }

    /// Parameters of the frozen conv layers.
    pub fn frozen_params(&self) -> Vec<&Param<T>> {
        self.net.params().into_iter().filter(|p| !p.trainable).collect()
    }
}

impl<T: Scalar> Network<T> for Encoder<T> {
    fn architecture(&self) -> Architecture {
        Architecture::Encoder(self.spec.clone())
    }
    fn params(&self) -> Vec<&Param<T>> {
        self.net.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.net.params_mut()
    }
}

// ---------------------------------------------------------------- decoder

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub spec: DecoderSpec,
    pub net: Sequential<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(spec: DecoderSpec, seed: u64) -> Self {
        let mut rng = seeded(seed, 0xD1);
        let mut layers = Vec::new();
        let mut cin = spec.in_channels;
        let pad = spec.kernel / 2;
        for (i, &c) in spec.channels.iter().enumerate() {
            layers.push(Layer::Upsample(Upsample2));
            layers.push(Layer::Conv(Conv2d::new(
                &format!("decoder.conv{}", i + 1),
                cin,
                c,
                spec.kernel,
                1,
                pad,
                &mut rng,
            )));
            layers.push(Layer::Relu(Relu::default()));
            cin = c;
        }
        layers.push(Layer::Conv(Conv2d::new(
            "decoder.out",
            cin,
            spec.out_channels,
            spec.kernel,
            1,
            pad,
            &mut rng,
        )));
        layers.push(Layer::Sigmoid(Sigmoid::default()));
        Decoder {
            spec,
            net: Sequential::new(layers),
        }
    }

    /// `B×128×h×w → B×1×8h×8w`, values in `[0, 1]`.
    pub fn forward(&mut self, z: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if z.n() == 0 || z.c() != self.spec.in_channels {
            return Err(Error::Shape {
                expected: format!("Bx{}xhxw features", self.spec.in_channels),
                got: format!("{:?}", z.shape()),
            });
        }
        self.net.forward(z, mode)
    }

    pub fn backward(&mut self, g: Tensor<T>, need_input_grad: bool, param_grads: bool) -> Option<Tensor<T>> {
        self.net.backward(g, need_input_grad, param_grads)
    }
}

impl<T: Scalar> Network<T> for Decoder<T> {
    fn architecture(&self) -> Architecture {
        Architecture::Decoder(self.spec.clone())
    }
    fn params(&self) -> Vec<&Param<T>> {
        self.net.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.net.params_mut()
    }
}

// ---------------------------------------------------------------- discriminator

/// Strided conv stages (leaky rectifier, dropout, batch norm from stage 2),
/// then a dense layer to one logit and a sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub spec: DiscriminatorSpec,
    pub net: Sequential<T>,
    probs: Vec<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Self {
        let mut rng = seeded(seed, 0xD5);
        let mut layers = Vec::new();
        let mut cin = spec.in_channels;
        for (i, &c) in spec.channels.iter().enumerate() {
            layers.push(Layer::Conv(Conv2d::new(
                &format!("discriminator.conv{}", i + 1),
                cin,
                c,
                spec.kernel,
                2,
                spec.kernel / 2,
                &mut rng,
            )));
            layers.push(Layer::LeakyRelu(LeakyRelu::new(spec.leaky_slope)));
            layers.push(Layer::Dropout(Dropout::new(spec.dropout, derive_seed(seed, 0xD0 + i as u64))));
            if i > 0 {
                layers.push(Layer::BatchNorm(BatchNorm2d::new(&format!("discriminator.bn{}", i + 1), c)));
            }
            cin = c;
        }
        layers.push(Layer::Linear(Linear::new("discriminator.fc", spec.dense_in(), 1, &mut rng)));
        Discriminator {
            spec,
            net: Sequential::new(layers),
            probs: Vec::new(),
        }
    }

    /// Realness probability per image, each in `(0, 1)`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<T>> {
        let (h, w) = self.spec.input_size;
        x.expect_shape("discriminator input", self.spec.in_channels, h, w)?;
        let logits = self.net.forward(x, mode)?;
        // keep strictly inside (0, 1) even where the logistic saturates
        let tiny = T::epsilon();
        self.probs = logits
            .data()
            .iter()
            .map(|&l| crate::nn::sigmoid(l).max(tiny).min(T::one() - tiny))
            .collect();
        Ok(self.probs.clone())
    }

    /// Backpropagate a gradient w.r.t. the logits of the last forward.
    pub fn backward_logits(&mut self, dlogits: Vec<T>, need_input_grad: bool, param_grads: bool) -> Option<Tensor<T>> {
        let n = dlogits.len();
        let g = Tensor::from_vec([n, 1, 1, 1], dlogits).expect("one logit per image");
        self.net.backward(g, need_input_grad, param_grads)
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.net.reseed_dropout(seed);
    }
}

impl<T: Scalar> Network<T> for Discriminator<T> {
    fn architecture(&self) -> Architecture {
        Architecture::Discriminator(self.spec.clone())
    }
    fn params(&self) -> Vec<&Param<T>> {
        self.net.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.net.params_mut()
    }
}

// ---------------------------------------------------------------- classifier head

/// fc → relu → fc → relu per slice, mean over slices, then fc to logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead<T> {
    pub spec: ClassifierHeadSpec,
    pub local: Sequential<T>,
    pub out: Sequential<T>,
    slices: usize,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(spec: ClassifierHeadSpec, seed: u64) -> Self {
        let mut rng = seeded(seed, 0xC1);
        let mut layers = Vec::new();
        let mut fi = spec.in_features;
        for (i, &h) in spec.hidden.iter().enumerate() {
            layers.push(Layer::Linear(Linear::new(&format!("head.fc{}", i + 1), fi, h, &mut rng)));
            layers.push(Layer::Relu(Relu::default()));
            fi = h;
        }
        let out = Sequential::new(vec![Layer::Linear(Linear::new(
            &format!("head.fc{}", spec.hidden.len() + 1),
            fi,
            spec.num_categories,
            &mut rng,
        ))]);
        ClassifierHead {
            spec,
            local: Sequential::new(layers),
            out,
            slices: 0,
        }
    }

    /// `S×128` slice features → one logit vector for the patient.
    pub fn forward(&mut self, features: &Tensor<T>) -> Result<Vec<T>> {
        if features.n() == 0 {
            return Err(Error::EmptyPatient("<classifier input>".into()));
        }
        if features.item_len() != self.spec.in_features {
            return Err(Error::Shape {
                expected: format!("Sx{} slice features", self.spec.in_features),
                got: format!("{:?}", features.shape()),
            });
        }
        let local = self.local.forward(features, Mode::Train)?;
        let s = local.n();
        let width = local.item_len();
        let inv = T::one() / T::of(s as f64);
        let mut pooled = vec![T::zero(); width];
        for i in 0..s {
            for (p, &v) in pooled.iter_mut().zip(local.item(i)) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p *= inv);
        self.slices = s;
        let pooled = Tensor::from_vec([1, width, 1, 1], pooled)?;
        Ok(self.out.forward(&pooled, Mode::Train)?.into_vec())
    }

    /// Gradient w.r.t. the slice features of the last forward.
    pub fn backward(&mut self, dlogits: Vec<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let c = dlogits.len();
        let g = Tensor::from_vec([1, c, 1, 1], dlogits).expect("logit gradient");
        let dpooled = self.out.backward(g, true, true).expect("input grad requested");
        let s = self.slices;
        let inv = T::one() / T::of(s as f64);
        let width = dpooled.item_len();
        let mut dlocal = Tensor::zeros([s, width, 1, 1]);
        for chunk in dlocal.data_mut().chunks_mut(width) {
            for (d, &v) in chunk.iter_mut().zip(dpooled.data()) {
                *d = v * inv;
            }
        }
        self.local.backward(dlocal, need_input_grad, true)
    }
}

impl<T: Scalar> Network<T> for ClassifierHead<T> {
    fn architecture(&self) -> Architecture {
        Architecture::ClassifierHead(self.spec.clone())
    }
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.local.params();
        p.extend(self.out.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.local.params_mut();
        p.extend(self.out.params_mut());
        p
    }
}

/// Encoder + adaptive average pooling + classifier head.
#[derive(Clone, Debug)]
pub struct PatientClassifier<T> {
    pub encoder: Encoder<T>,
    pub head: ClassifierHead<T>,
    feature_hw: (usize, usize),
}

impl<T: Scalar> PatientClassifier<T> {
    pub fn new(encoder: Encoder<T>, head: ClassifierHead<T>) -> Self {
        PatientClassifier {
            encoder,
            head,
            feature_hw: (0, 0),
        }
    }

    /// Patient logits from a normalised `S×1×H×W` slice stack.
    pub fn forward(&mut self, slices: &Tensor<T>) -> Result<Vec<T>> {
        let fmap = self.encoder.forward(slices, Mode::Train)?;
        self.feature_hw = (fmap.h(), fmap.w());
        let feats = fmap.spatial_mean();
        self.head.forward(&feats)
    }

    /// Accumulate gradients of a loss whose logit gradient is `dlogits`.
    pub fn backward(&mut self, dlogits: Vec<T>) {
        let encoder_trains = self.encoder.params().iter().any(|p| p.learnable());
        let dfeat = self.head.backward(dlogits, encoder_trains);
        if let Some(dfeat) = dfeat {
            let (h, w) = self.feature_hw;
            let inv = T::one() / T::of((h * w) as f64);
            let mut dmap = Tensor::zeros([dfeat.n(), dfeat.c(), h, w]);
            for (plane, &g) in dmap.data_mut().chunks_mut(h * w).zip(dfeat.data()) {
                plane.iter_mut().for_each(|v| *v = g * inv);
            }
            self.encoder.backward(dmap, false, true);
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.encoder.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
