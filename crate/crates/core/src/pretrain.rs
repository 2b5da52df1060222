//! Context-restoration pretraining: encoder + decoder restore patch-swapped
//! slices under an RMSE loss plus an optional adversarial term from a
//! discriminator that separates originals from reconstructions.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelState;
use crate::corruption::{corrupt, derive_seed, CorruptionSpec};
use crate::error::{invalid, Error, Result};
use crate::nets::{
    raw_batch, Decoder, DecoderSpec, Discriminator, DiscriminatorSpec, Encoder, EncoderSpec, Network,
};
use crate::nn::loss::{bce, bce_logit_grad, rmse};
use crate::nn::optim::Adam;
use crate::nn::{Mode, Param};
use crate::preprocess::GraySlice;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the adversarial generator term.
    pub adv_weight: f64,
    pub adversarial: bool,
    pub corruption: CorruptionSpec,
    pub seed: u64,
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 700,
            batch_size: 30,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adv_weight: 0.01,
            adversarial: true,
            corruption: CorruptionSpec::default(),
            seed: 0,
            encoder: EncoderSpec::default(),
            decoder: DecoderSpec::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.adv_weight < 0.0 || !self.adv_weight.is_finite() {
            return Err(invalid(format!("adversarial weight {} must be >= 0", self.adv_weight)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        Ok(())
    }

    /// Weight actually applied to the adversarial term.
    pub fn effective_adv_weight(&self) -> f64 {
        if self.adversarial {
            self.adv_weight
        } else {
            0.0
        }
    }
}

/// Root mean squared reconstruction error over a whole batch.
pub fn rmse_loss<T: Scalar>(recon: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if recon.shape() != target.shape() {
        return Err(Error::Shape {
            expected: format!("{:?}", target.shape()),
            got: format!("{:?}", recon.shape()),
        });
    }
    Ok(rmse(recon.data(), target.data())?.0)
}

/// Non-saturating generator term and discriminator loss:
/// `gen = BCE(d_fake, 1)`, `disc = BCE(d_real, 1) + BCE(d_fake, 0)`.
pub fn adversarial_losses<T: Scalar>(d_real: &[T], d_fake: &[T]) -> Result<(T, T)> {
    let gen = bce(d_fake, T::one())?;
    let disc = bce(d_real, T::one())? + bce(d_fake, T::zero())?;
    Ok((gen, disc))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rmse: f64,
    pub gen_adv: f64,
    pub disc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl PretrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,rmse,gen_adv,disc\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{:.9e},{:.9e},{:.9e}\n", r.epoch, r.rmse, r.gen_adv, r.disc));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Losses of one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss<T> {
    pub rmse: T,
    /// Non-saturating BCE term; zero when the adversarial term is off.
    pub gen_adv: T,
    pub total: T,
}

/// Encoder, decoder and discriminator with their optimizers.
pub struct Pretrainer<T: Scalar> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub discriminator: Discriminator<T>,
    pub config: PretrainConfig,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
}

impl<T: Scalar> Pretrainer<T> {
    pub fn new(config: PretrainConfig, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone(), derive_seed(config.seed, 1));
        let decoder = Decoder::new(config.decoder.clone(), derive_seed(config.seed, 2));
        let discriminator = Discriminator::new(DiscriminatorSpec::for_input(height, width), derive_seed(config.seed, 3));
        let opt_g = Adam::new(config.lr, config.beta1, config.beta2, 0.0);
        let opt_d = Adam::new(config.lr, config.beta1, config.beta2, 0.0);
        Ok(Pretrainer {
            encoder,
            decoder,
            discriminator,
            config,
            opt_g,
            opt_d,
        })
    }

    pub fn generator_params(&self) -> Vec<&Param<T>> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    /// Reconstruct `corrupted` (raw `[0,1]` batch) in train mode.
    pub fn reconstruct(&mut self, corrupted: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (m, s) = (T::of(crate::nets::NORM_MEAN), T::of(crate::nets::NORM_STD));
        let input = corrupted.map(|v| (v - m) / s);
        let z = self.encoder.forward(&input, mode)?;
        self.decoder.forward(&z, mode)
    }

    /// Forward the generator loss against the uncorrupted `originals` and,
    /// when `with_grads`, accumulate its gradient into the encoder and
    /// decoder parameters (discriminator parameters are left untouched).
    /// Returns the loss and the reconstruction.
    pub fn generator_pass(
        &mut self,
        corrupted: &Tensor<T>,
        originals: &Tensor<T>,
        with_grads: bool,
    ) -> Result<(GeneratorLoss<T>, Tensor<T>)> {
        let recon = self.reconstruct(corrupted, Mode::Train)?;
        let (r, mut grad) = rmse(recon.data(), originals.data())?;
        let lambda = self.config.effective_adv_weight();
        let mut gen_adv = T::zero();
        if self.config.adversarial {
            let probs = self.discriminator.forward(&recon, Mode::Train)?;
            gen_adv = bce(&probs, T::one())?;
            if with_grads && lambda > 0.0 {
                let l = T::of(lambda);
                let dlogits = bce_logit_grad(&probs, T::one()).into_iter().map(|g| g * l).collect();
                let d_recon = self
                    .discriminator
                    .backward_logits(dlogits, true, false)
                    .expect("input gradient requested");
                grad.iter_mut().zip(d_recon.data()).for_each(|(g, &d)| *g += d);
            }
        }
        let total = r + T::of(lambda) * gen_adv;
        if with_grads {
            let g = Tensor::from_vec(recon.shape(), grad)?;
            let dz = self.decoder.backward(g, true, true).expect("input gradient requested");
            self.encoder.backward(dz, false, true);
        }
        Ok((GeneratorLoss { rmse: r, gen_adv, total }, recon))
    }

    /// Discriminator loss on originals (real) and detached reconstructions
    /// (fake); accumulates discriminator gradients when `with_grads`.
    pub fn discriminator_pass(&mut self, originals: &Tensor<T>, recon: &Tensor<T>, with_grads: bool) -> Result<T> {
        let p_real = self.discriminator.forward(originals, Mode::Train)?;
        if with_grads {
            self.discriminator
                .backward_logits(bce_logit_grad(&p_real, T::one()), false, true);
        }
        let p_fake = self.discriminator.forward(recon, Mode::Train)?;
        if with_grads {
            self.discriminator
                .backward_logits(bce_logit_grad(&p_fake, T::zero()), false, true);
        }
        let (_, disc) = adversarial_losses(&p_real, &p_fake)?;
        Ok(disc)
    }

    /// One alternating update: generator first, then discriminator.
    pub fn train_step(&mut self, corrupted: &Tensor<T>, originals: &Tensor<T>) -> Result<(GeneratorLoss<T>, T)> {
        self.encoder.zero_grad();
        self.decoder.zero_grad();
        let (loss, recon) = self.generator_pass(corrupted, originals, true)?;
        if !loss.total.is_finite() {
            return Err(Error::Training(format!("non-finite generator loss {}", loss.total)));
        }
        let mut params = self.encoder.params_mut();
        params.extend(self.decoder.params_mut());
        self.opt_g.step(params);

        let mut disc = T::zero();
        if self.config.adversarial {
            self.discriminator.zero_grad();
            disc = self.discriminator_pass(originals, &recon, true)?;
            if !disc.is_finite() {
                return Err(Error::Training(format!("non-finite discriminator loss {disc}")));
            }
            let params = self.discriminator.params_mut();
            self.opt_d.step(params);
        }
        Ok((loss, disc))
    }

    pub fn generator_state(&self, history: &PretrainHistory) -> ModelState {
        let mut st = ModelState::default();
        st.push("encoder", &self.encoder);
        st.push("decoder", &self.decoder);
        st.provenance.seed = self.config.seed;
        st.provenance.epoch = history.epochs.len();
        st.provenance.loss_curve = history.epochs.iter().map(|r| r.rmse).collect();
        st
    }

    pub fn discriminator_state(&self, history: &PretrainHistory) -> ModelState {
        let mut st = ModelState::default();
        st.push("discriminator", &self.discriminator);
        st.provenance.seed = self.config.seed;
        st.provenance.epoch = history.epochs.len();
        st.provenance.loss_curve = history.epochs.iter().map(|r| r.disc).collect();
        st
    }
}

/// Corrupt slice `index` for `epoch` with its own derived seed.
pub fn corrupt_for_epoch<T: Scalar>(
    slice: &GraySlice<T>,
    spec: &CorruptionSpec,
    base_seed: u64,
    epoch: usize,
    index: usize,
) -> Result<GraySlice<T>> {
    let seed = derive_seed(derive_seed(base_seed, epoch as u64), index as u64);
    let spec = CorruptionSpec { seed, ..*spec };
    Ok(corrupt(slice, &spec)?.0)
}

pub struct PretrainOutcome {
    pub generator: ModelState,
    pub discriminator: ModelState,
    pub history: PretrainHistory,
}

impl PretrainOutcome {
    /// All three components in one checkpoint.
    pub fn checkpoint(&self) -> ModelState {
        let mut st = self.generator.clone();
        st.components.extend(self.discriminator.components.iter().cloned());
        st
    }
}

/// Train on an unlabeled slice corpus.
pub fn pretrain<T: Scalar>(slices: &[GraySlice<T>], config: &PretrainConfig) -> Result<PretrainOutcome> {
    pretrain_with(slices, config, |_| {})
}

/// [`pretrain`] with a per-epoch callback.
pub fn pretrain_with<T: Scalar>(
    slices: &[GraySlice<T>],
    config: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<PretrainOutcome> {
    config.validate()?;
    let first = slices.first().ok_or_else(|| invalid("pretraining corpus is empty"))?;
    let (h, w) = (first.height, first.width);
    if slices.iter().any(|s| s.height != h || s.width != w) {
        return Err(invalid("pretraining slices must share one size"));
    }
    let mut trainer = Pretrainer::<T>::new(config.clone(), h, w)?;
    let mut order: Vec<usize> = (0..slices.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 4));
    let mut history = PretrainHistory::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut se, mut sg, mut sd, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let originals: Vec<&GraySlice<T>> = batch.iter().map(|&i| &slices[i]).collect();
            let corrupted = batch
                .iter()
                .map(|&i| corrupt_for_epoch(&slices[i], &config.corruption, config.seed, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let corrupted_refs: Vec<&GraySlice<T>> = corrupted.iter().collect();
            let x_in = raw_batch(&corrupted_refs)?;
            let target = raw_batch(&originals)?;
            trainer
                .discriminator
                .reseed_dropout(derive_seed(derive_seed(config.seed, 5), (epoch * slices.len() + seen) as u64));
            let (loss, disc) = trainer.train_step(&x_in, &target)?;
            let b = batch.len() as f64;
            se += loss.rmse.as_f64() * b;
            sg += loss.gen_adv.as_f64() * b;
            sd += disc.as_f64() * b;
            seen += batch.len();
        }
        let n = seen as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            rmse: se / n,
            gen_adv: sg / n,
            disc: sd / n,
        };
        log::info!(
            "pretrain epoch {}: rmse {:.5} gen_adv {:.5} disc {:.5}",
            rec.epoch,
            rec.rmse,
            rec.gen_adv,
            rec.disc
        );
        on_epoch(&rec);
        history.epochs.push(rec);
    }
    Ok(PretrainOutcome {
        generator: trainer.generator_state(&history),
        discriminator: trainer.discriminator_state(&history),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::params_hash;
    use crate::nn::ParamKind;

    #[test]
    fn adversarial_losses_at_half() {
        let (g, d) = adversarial_losses(&[0.5f64, 0.5], &[0.5, 0.5]).unwrap();
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);
        let (g, _) = adversarial_losses(&[0.5f64], &[1.0 - 1e-12]).unwrap();
        assert!(g < 1e-9);
        assert!(adversarial_losses(&[1.5f64], &[0.5]).is_err());
    }

    #[test]
    fn rmse_loss_shape_checked() {
        let a = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let b = Tensor::<f64>::zeros([1, 1, 2, 3]);
        assert!(rmse_loss(&a, &b).is_err());
        let c = Tensor::<f64>::filled([1, 1, 2, 2], 0.1);
        assert!((rmse_loss(&c, &a).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = PretrainConfig {
            adv_weight: -0.1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.adv_weight = 0.01;
        c.adversarial = false;
        assert_eq!(c.effective_adv_weight(), 0.0);
        assert!(pretrain::<f32>(&[], &c).is_err());
    }

    fn small_config() -> PretrainConfig {
        PretrainConfig {
            epochs: 1,
            batch_size: 2,
            corruption: CorruptionSpec {
                patch_size: 2,
                iterations: 2,
                seed: 0,
            },
            encoder: EncoderSpec {
                channels: vec![4, 4, 8],
                ..Default::default()
            },
            decoder: DecoderSpec {
                in_channels: 8,
                channels: vec![4, 4, 4],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn weights_hash(params: Vec<&Param<f64>>) -> String {
        let w: Vec<&Param<f64>> = params.into_iter().filter(|p| p.kind == ParamKind::Weight).collect();
        params_hash(&w)
    }

    #[test]
    fn updates_touch_only_their_own_network() {
        let mut t = Pretrainer::<f64>::new(small_config(), 8, 8).unwrap();
        let x = Tensor::from_vec([2, 1, 8, 8], (0..128).map(|v| (v % 7) as f64 / 7.0).collect()).unwrap();
        let c = x.map(|v| 1.0 - v);
        t.encoder.zero_grad();
        t.decoder.zero_grad();
        let d_before = weights_hash(t.discriminator.params());
        let (_, recon) = t.generator_pass(&c, &x, true).unwrap();
        assert!(t.discriminator.params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
        let mut params = t.encoder.params_mut();
        params.extend(t.decoder.params_mut());
        t.opt_g.step(params);
        assert_eq!(weights_hash(t.discriminator.params()), d_before);

        let g_before = weights_hash(t.generator_params());
        t.discriminator.zero_grad();
        t.discriminator_pass(&x, &recon, true).unwrap();
        let params = t.discriminator.params_mut();
        t.opt_d.step(params);
        assert_eq!(weights_hash(t.generator_params()), g_before);
        assert_ne!(weights_hash(t.discriminator.params()), d_before);
    }

    #[test]
    fn no_adv_skips_discriminator() {
        let cfg = PretrainConfig {
            adversarial: false,
            ..small_config()
        };
        let slices: Vec<GraySlice<f64>> = (0..3)
            .map(|k| GraySlice::new(8, 8, (0..64).map(|v| ((v + k) % 5) as f64 / 5.0).collect()).unwrap())
            .collect();
        let out = pretrain(&slices, &cfg).unwrap();
        assert_eq!(out.history.epochs.len(), 1);
        assert_eq!(out.history.epochs[0].disc, 0.0);
        assert_eq!(out.history.epochs[0].gen_adv, 0.0);
    }

    #[test]
    fn history_csv_layout() {
        let h = PretrainHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                rmse: 0.5,
                gen_adv: 0.25,
                disc: 1.0,
            }],
        };
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,rmse,gen_adv,disc\n1,"));
    }
}
