//! Acceptance suite. One line per criterion; exits non-zero on any failure.
//!
//! `ACCEPTANCE_ONLY=3,9` restricts the run to the listed criteria;
//! `ACCEPTANCE_VERBOSE=1` prints pretraining progress to stderr.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fibrossl::checkpoint::ModelState;
use fibrossl::corruption::{corrupt, CorruptionSpec};
use fibrossl::evaluation::{
    auc_binary, auc_multiclass, categories, cell_fingerprint, make_folds, run_ablation_grid, run_cv,
    AblationCell, ConstantLearner, FileCheckpoints, FinetuneLearner, FoldSettings,
    OracleLearner,
};
use fibrossl::finetune::{
    build_classifier, combine_score, finetune, FinetuneConfig, InitMode, PatientBag,
    ScoreRecord, Split, Task, TaskSpec,
};
use fibrossl::lbp::{lbp_encode, BorderPolicy, Comparison, LbpSpec};
use fibrossl::nets::{
    params_hash, ClassifierHead, ClassifierHeadSpec, Decoder, DecoderSpec, Encoder, EncoderSpec, Network,
};
use fibrossl::nn::{set_deterministic, Mode, Param};
use fibrossl::phantom::{gen_phantom_dataset, PhantomSpec};
use fibrossl::preprocess::{preprocess_volume, GraySlice, PreprocessSpec, WindowSpec};
use fibrossl::pretrain::{pretrain_with, EpochRecord, PretrainConfig, PretrainHistory, PretrainOutcome, Pretrainer};
use fibrossl::tensor::Tensor;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_slice(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GraySlice<f64> {
    let px = (0..h * w).map(|_| rng.gen_range(0..256) as f64 / 255.0).collect();
    GraySlice::new(h, w, px).unwrap()
}

// ------------------------------------------------------------------ 1, 2

/// Per-pixel bit loop over the raw 8-neighbourhood.
fn lbp_oracle(q: &[i64], h: usize, w: usize, strict: bool, zero_border: bool) -> Vec<u32> {
    let offs = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)];
    let mut out = vec![0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut code = 0u32;
            let mut outside = false;
            for (p, (dy, dx)) in offs.iter().enumerate() {
                let (mut ny, mut nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    outside = true;
                    ny = ny.clamp(0, h as i64 - 1);
                    nx = nx.clamp(0, w as i64 - 1);
                }
                let n = q[(ny * w as i64 + nx) as usize];
                let c = q[(y * w as i64 + x) as usize];
                let bit = if strict { n > c } else { n >= c };
                if bit {
                    code += 1 << p;
                }
            }
            out[(y * w as i64 + x) as usize] = if outside && zero_border { 0 } else { code };
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut slices: Vec<GraySlice<f64>> = (0..100).map(|_| random_slice(&mut rng, 16, 16)).collect();
    slices.extend((0..10).map(|_| random_slice(&mut rng, 224, 224)));
    let mut mismatches = 0usize;
    for s in &slices {
        let q: Vec<i64> = s.pixels.iter().map(|p| (p * 255.0).round() as i64).collect();
        for comparison in [Comparison::StrictGreater, Comparison::GreaterOrEqual] {
            for border in [BorderPolicy::Replicate, BorderPolicy::ZeroCode] {
                let spec = LbpSpec {
                    comparison,
                    border,
                    ..LbpSpec::default()
                };
                let got = lbp_encode(s, &spec).map_err(err)?.codes;
                let want = lbp_oracle(
                    &q,
                    s.height,
                    s.width,
                    comparison == Comparison::StrictGreater,
                    border == BorderPolicy::ZeroCode,
                );
                mismatches += got.iter().zip(&want).filter(|(a, b)| a != b).count();
            }
        }
    }
    ensure!(mismatches == 0, "{mismatches} mismatched codes");
    Ok(format!("{} slices x 4 variants, 0 mismatches", slices.len()))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = LbpSpec::default();
    for _ in 0..20 {
        let s = random_slice(&mut rng, 32, 32);
        let base = lbp_encode(&s, &spec).map_err(err)?.codes;
        for _ in 0..5 {
            // strictly increasing map on the 256 levels, rescaled into [0, 1]
            let mut table = vec![0u32; 256];
            let mut acc = 0u32;
            for t in table.iter_mut() {
                acc += rng.gen_range(1..4);
                *t = acc;
            }
            let lo = table[0] as f64;
            let span = (table[255] - table[0]).max(1) as f64;
            let mapped: Vec<f64> = s
                .pixels
                .iter()
                .map(|p| {
                    let l = (p * 255.0).round() as usize;
                    (table[l] as f64 - lo) / span
                })
                .collect();
            let m = GraySlice::new(32, 32, mapped).map_err(err)?;
            // codes are compared at a level count that preserves the map's order
            let fine = LbpSpec {
                levels: 1 << 16,
                ..spec
            };
            let got = lbp_encode(&m, &fine).map_err(err)?.codes;
            ensure!(got == base, "codes changed under a monotone map");
        }
    }
    Ok("20 images x 5 maps identical".into())
}

// ------------------------------------------------------------------ 3, 4

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut max_diff = 0;
    for i in 0..50 {
        let s = random_slice(&mut rng, 224, 224);
        let spec = CorruptionSpec {
            patch_size: 20,
            iterations: 10,
            seed: 1000 + i,
        };
        let (c, log) = corrupt(&s, &spec).map_err(err)?;
        let mut a = s.pixels.clone();
        let mut b = c.pixels.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        ensure!(a == b, "slice {i}: pixel multiset changed");
        ensure!(log.len() == 10, "slice {i}: {} swaps logged", log.len());
        ensure!(log.iter().all(|p| p.is_disjoint()), "slice {i}: overlapping pair");
        let diff = s.pixels.iter().zip(&c.pixels).filter(|(x, y)| x != y).count();
        ensure!(diff <= 8000, "slice {i}: {diff} differing pixels");
        max_diff = max_diff.max(diff);
        let r = fibrossl::corruption::restore(&c, &log);
        ensure!(r == s, "slice {i}: replay does not restore");
    }
    Ok(format!("50 slices, max {max_diff} differing pixels"))
}

fn criterion_4() -> Outcome {
    let w = WindowSpec::default();
    ensure!(w.map::<f64>(-200.0) == 0.0, "-200 HU maps to {}", w.map::<f64>(-200.0));
    ensure!(w.map::<f64>(250.0) == 1.0, "250 HU maps to {}", w.map::<f64>(250.0));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut hu: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-3000.0..3000.0)).collect();
    hu.sort_by(f64::total_cmp);
    let mut prev = f64::NEG_INFINITY;
    for &v in &hu {
        let m = w.map::<f64>(v);
        ensure!((0.0..=1.0).contains(&m), "{v} HU maps outside [0,1]: {m}");
        ensure!(m >= prev, "non-monotone at {v} HU");
        prev = m;
    }
    Ok("bounds exact, 10000 random inputs monotone".into())
}

// ------------------------------------------------------------------ 5

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut enc = Encoder::<f32>::new(EncoderSpec::default(), 5);
    let mut dec = Decoder::<f32>::new(DecoderSpec::default(), 6);
    let x = random_tensor(&mut rng, [1, 1, 224, 224]);
    let z = enc.forward(&x, Mode::Eval).map_err(err)?;
    ensure!(z.shape() == [1, 128, 28, 28], "encoder output {:?}", z.shape());
    let y = dec.forward(&z, Mode::Eval).map_err(err)?;
    ensure!(y.shape() == [1, 1, 224, 224], "decoder output {:?}", y.shape());

    let xb = random_tensor(&mut rng, [3, 1, 32, 32]);
    let fmap = enc.forward(&xb, Mode::Eval).map_err(err)?;
    let feat = enc.extract_feature(&xb, Mode::Eval).map_err(err)?;
    ensure!(feat.shape() == [3, 128, 1, 1], "feature shape {:?}", feat.shape());
    let hw = fmap.h() * fmap.w();
    let oracle: Vec<f32> = fmap
        .data()
        .chunks(hw)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    let d = max_abs_diff(feat.data(), &oracle);
    ensure!(d <= 1e-6, "extract_feature differs from mean oracle by {d}");

    let mut head = ClassifierHead::<f32>::new(ClassifierHeadSpec::new(3), 7);
    let s = 6;
    let feats = random_tensor(&mut rng, [s, 128, 1, 1]).map(|v| v.abs());
    let base = head.forward(&feats).map_err(err)?;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let mut order: Vec<usize> = (0..s).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let perm: Vec<&[f32]> = order.iter().map(|&i| feats.item(i)).collect();
        let data: Vec<f32> = perm.concat();
        let permuted = Tensor::from_vec([s, 128, 1, 1], data).map_err(err)?;
        worst = worst.max(max_abs_diff(&head.forward(&permuted).map_err(err)?, &base));
    }
    let doubled: Vec<f32> = (0..s).flat_map(|i| [feats.item(i), feats.item(i)].concat()).collect();
    let doubled = Tensor::from_vec([2 * s, 128, 1, 1], doubled).map_err(err)?;
    worst = worst.max(max_abs_diff(&head.forward(&doubled).map_err(err)?, &base));
    ensure!(worst <= 1e-6, "aggregation not invariant: {worst}");
    Ok(format!("shapes ok, feature oracle diff {d:.1e}, invariance diff {worst:.1e}"))
}

// ------------------------------------------------------------------ 6

const GC_STEP: f64 = 1e-4;
const GC_TOL: f64 = 1e-3;
const GC_SAMPLES: usize = 24;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero
/// gradients from dominating.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

fn small_config(adversarial: bool, adv_weight: f64) -> PretrainConfig {
    PretrainConfig {
        adversarial,
        adv_weight,
        encoder: EncoderSpec {
            in_channels: 1,
            channels: vec![3, 4, 5],
            kernel: 3,
        },
        decoder: DecoderSpec {
            in_channels: 5,
            channels: vec![4, 3, 2],
            out_channels: 1,
            kernel: 3,
        },
        ..PretrainConfig::default()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Which {
    Generator,
    Discriminator,
}

/// Distinct learnable entries whose gradient is not negligible, so the
/// comparison cannot pass on `0 == 0`.
fn sample_indices(params: &[&Param<f64>], rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let learnable: Vec<usize> = (0..params.len()).filter(|&i| params[i].learnable()).collect();
    let mut picks = Vec::new();
    for _ in 0..100_000 {
        if picks.len() == GC_SAMPLES {
            break;
        }
        let pi = learnable[rng.gen_range(0..learnable.len())];
        let j = rng.gen_range(0..params[pi].len());
        if params[pi].grad[j].abs() > 1e-6 && !picks.contains(&(pi, j)) {
            picks.push((pi, j));
        }
    }
    picks
}

fn gradcheck(adversarial: bool, lambda: f64, which: Which, seed: u64) -> std::result::Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Pretrainer::<f64>::new(small_config(adversarial, lambda), 8, 8).map_err(err)?;
    let orig = Tensor::from_vec([4, 1, 8, 8], (0..256).map(|_| rng.gen_range(0.0..1.0)).collect()).map_err(err)?;
    let corr = Tensor::from_vec([4, 1, 8, 8], (0..256).map(|_| rng.gen_range(0.0..1.0)).collect()).map_err(err)?;
    let fake = Tensor::from_vec([4, 1, 8, 8], (0..256).map(|_| rng.gen_range(0.0..1.0)).collect()).map_err(err)?;

    let loss = |t: &mut Pretrainer<f64>, grads: bool| -> f64 {
        t.discriminator.reseed_dropout(99);
        match which {
            Which::Generator => t.generator_pass(&corr, &orig, grads).unwrap().0.total,
            Which::Discriminator => t.discriminator_pass(&orig, &fake, grads).unwrap(),
        }
    };
    t.encoder.zero_grad();
    t.decoder.zero_grad();
    t.discriminator.zero_grad();
    loss(&mut t, true);

    let params = |t: &Pretrainer<f64>| -> Vec<Param<f64>> {
        match which {
            Which::Generator => t.generator_params().into_iter().cloned().collect(),
            Which::Discriminator => t.discriminator.params().into_iter().cloned().collect(),
        }
    };
    let snapshot = params(&t);
    let refs: Vec<&Param<f64>> = snapshot.iter().collect();
    let picks = sample_indices(&refs, &mut rng);
    if picks.len() < GC_SAMPLES {
        return Err(format!("only {} parameters with non-negligible gradient", picks.len()));
    }
    let mut worst: f64 = 0.0;
    for &(pi, j) in &picks {
        let analytic = snapshot[pi].grad[j];
        let nudge = |t: &mut Pretrainer<f64>, delta: f64| {
            let mut ps: Vec<&mut Param<f64>> = match which {
                Which::Generator => {
                    let mut v = t.encoder.params_mut();
                    v.extend(t.decoder.params_mut());
                    v
                }
                Which::Discriminator => t.discriminator.params_mut(),
            };
            ps[pi].value[j] += delta;
        };
        nudge(&mut t, GC_STEP);
        let up = loss(&mut t, false);
        nudge(&mut t, -2.0 * GC_STEP);
        let down = loss(&mut t, false);
        nudge(&mut t, GC_STEP);
        let numeric = (up - down) / (2.0 * GC_STEP);
        let e = rel_err(analytic, numeric);
        if e > GC_TOL {
            return Err(format!(
                "{} `{}`[{j}]: analytic {analytic:e} numeric {numeric:e}",
                if which == Which::Generator { "generator" } else { "discriminator" },
                snapshot[pi].name
            ));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

fn criterion_6() -> Outcome {
    let cases = [
        ("rmse", false, 0.0, Which::Generator),
        ("generator l=0.01", true, 0.01, Which::Generator),
        ("generator l=1", true, 1.0, Which::Generator),
        ("discriminator", true, 0.01, Which::Discriminator),
    ];
    let mut parts = Vec::new();
    for (i, (name, adv, lambda, which)) in cases.into_iter().enumerate() {
        let worst = gradcheck(adv, lambda, which, 60 + i as u64)?;
        parts.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!("{GC_SAMPLES} params each, max rel err: {}", parts.join(", ")))
}

// ------------------------------------------------------------------ shared phantom data

struct Phantoms {
    bags: Vec<PatientBag<f32>>,
    labels: Vec<ScoreRecord>,
}

fn phantoms(n: usize, slices: usize, dims: usize, seed: u64) -> std::result::Result<Phantoms, String> {
    let spec = PhantomSpec {
        n_patients: n,
        slices_per_patient: slices,
        dims,
        seed,
        ..PhantomSpec::with_categories(2)
    };
    let data = gen_phantom_dataset(&spec).map_err(err)?;
    let prep = PreprocessSpec {
        target: dims,
        ..PreprocessSpec::default()
    };
    let bags = data
        .volumes
        .iter()
        .map(|v| {
            Ok(PatientBag {
                patient_id: v.patient_id.clone(),
                slices: preprocess_volume::<f32>(v, &prep).map_err(err)?,
            })
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    Ok(Phantoms {
        bags,
        labels: data.labels,
    })
}

fn pretrain<T: fibrossl::Scalar>(
    slices: &[GraySlice<T>],
    cfg: &PretrainConfig,
) -> fibrossl::Result<PretrainOutcome> {
    let verbose = std::env::var_os("ACCEPTANCE_VERBOSE").is_some();
    let t0 = Instant::now();
    pretrain_with(slices, cfg, |r: &EpochRecord| {
        if verbose {
            eprintln!(
                "  epoch {:>3} rmse {:.5} gen_adv {:.4} disc {:.4} [{:.0}s]",
                r.epoch,
                r.rmse,
                r.gen_adv,
                r.disc,
                t0.elapsed().as_secs_f64()
            );
        }
    })
}

fn pretrain_config(adversarial: bool) -> PretrainConfig {
    PretrainConfig {
        epochs: 30,
        batch_size: 16,
        lr: 2e-4,
        adv_weight: 0.01,
        adversarial,
        // 20 px at 224 scaled to the 64 px slices
        corruption: CorruptionSpec {
            patch_size: 6,
            iterations: 10,
            seed: 0,
        },
        seed: 9,
        ..PretrainConfig::default()
    }
}

struct Shared {
    data: Option<Phantoms>,
    checkpoint: Option<ModelState>,
}

impl Shared {
    fn data(&mut self) -> std::result::Result<&Phantoms, String> {
        if self.data.is_none() {
            self.data = Some(phantoms(30, 7, 64, 10)?);
        }
        Ok(self.data.as_ref().unwrap())
    }

    fn corpus(&mut self) -> std::result::Result<Vec<GraySlice<f32>>, String> {
        let d = self.data()?;
        let all: Vec<GraySlice<f32>> = d.bags.iter().flat_map(|b| b.slices.iter().cloned()).collect();
        ensure!(all.len() >= 200, "only {} preprocessed slices", all.len());
        Ok(all.into_iter().take(200).collect())
    }

    fn checkpoint(&mut self) -> std::result::Result<ModelState, String> {
        if self.checkpoint.is_none() {
            let corpus = self.corpus()?;
            let out = pretrain(&corpus, &pretrain_config(true)).map_err(err)?;
            self.checkpoint = Some(out.checkpoint());
        }
        Ok(self.checkpoint.clone().unwrap())
    }
}

// ------------------------------------------------------------------ 7

fn criterion_7(sh: &mut Shared) -> Outcome {
    let ckpt = sh.checkpoint()?;
    let d = sh.data()?;
    let task = TaskSpec::new(Task::Fibrosis);
    let config = FinetuneConfig {
        epochs: 5,
        seed: 7,
        ..FinetuneConfig::default()
    };

    let step0 = build_classifier::<f32>(Some(&ckpt), &config, task.num_categories).map_err(err)?;
    let stored = ckpt.component("encoder").map_err(err)?;
    for (p, vals) in step0.encoder.params().iter().zip(&stored.values) {
        let same = p.value.len() == vals.len() && p.value.iter().zip(vals).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "step-0 `{}` differs from the checkpoint", p.name);
    }
    let frozen_before = params_hash(&step0.encoder.frozen_params());
    ensure!(!step0.encoder.frozen_params().is_empty(), "no frozen conv block");

    let ids: Vec<String> = d.labels.iter().map(|r| r.patient_id.clone()).collect();
    let split = Split {
        train: ids[..20].to_vec(),
        val: ids[20..24].to_vec(),
        test: ids[24..].to_vec(),
    };
    let out = finetune(&d.bags, &d.labels, &task, &config, &split, Some(&ckpt)).map_err(err)?;
    ensure!(out.history.len() == 5, "{} epochs run", out.history.len());
    let frozen_after = params_hash(&out.model.encoder.frozen_params());
    ensure!(frozen_before == frozen_after, "frozen hash changed");
    let trainable_changed = out
        .model
        .encoder
        .params()
        .iter()
        .filter(|p| p.learnable())
        .zip(step0.encoder.params().iter().filter(|p| p.learnable()))
        .any(|(a, b)| a.value != b.value);
    ensure!(trainable_changed, "trainable conv blocks never moved");
    Ok(format!("step-0 bit-equal, frozen hash {} unchanged", &frozen_after[..12]))
}

// ------------------------------------------------------------------ 8

/// AUC of one class against the rest by explicit pair enumeration.
fn pair_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn criterion_8() -> Outcome {
    let a = auc_binary(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).map_err(err)?;
    ensure!(a == 0.75, "reference instance gives {a}");
    let t = auc_binary(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).map_err(err)?;
    ensure!(t == 0.5, "all ties give {t}");

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    while checked < 50 {
        let c = rng.gen_range(2..=3);
        let n = rng.gen_range(c..=50);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        if labels.iter().collect::<HashSet<_>>().len() < 2 {
            continue;
        }
        // coarse values so ties occur
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(1..6) as f64).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|v| v / z).collect()
            })
            .collect();
        let got = auc_multiclass(&probs, &labels).map_err(err)?;
        let want = if c == 2 {
            let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            pair_auc(&probs.iter().map(|p| p[1]).collect::<Vec<_>>(), &pos)
        } else {
            let present: Vec<usize> = (0..c).filter(|k| labels.contains(k)).collect();
            let per: Vec<f64> = present
                .iter()
                .filter(|&&k| labels.iter().any(|&l| l != k))
                .map(|&k| {
                    let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
                    pair_auc(&probs.iter().map(|p| p[k]).collect::<Vec<_>>(), &pos)
                })
                .collect();
            per.iter().sum::<f64>() / per.len() as f64
        };
        ensure!((got - want).abs() <= 1e-12, "instance {checked}: {got} vs oracle {want}");

        let bin: Vec<usize> = labels.iter().map(|&l| (l > 0) as usize).collect();
        if bin.contains(&0) && bin.contains(&1) {
            let s: Vec<f64> = probs.iter().map(|p| p[0]).collect();
            let flipped: Vec<usize> = bin.iter().map(|&l| 1 - l).collect();
            let x = auc_binary(&s, &bin).map_err(err)?;
            let y = auc_binary(&s, &flipped).map_err(err)?;
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let z = auc_binary(&neg, &bin).map_err(err)?;
            ensure!((x + y - 1.0).abs() <= 1e-12, "label complement: {x} + {y}");
            ensure!((x + z - 1.0).abs() <= 1e-12, "score complement: {x} + {z}");
        }
        checked += 1;
    }
    Ok("reference 0.75, ties 0.5, 50 random instances match".into())
}

// ------------------------------------------------------------------ 9

fn criterion_9(sh: &mut Shared) -> Outcome {
    let corpus = sh.corpus()?;
    let cfg = pretrain_config(true);
    let t0 = Instant::now();
    let first = pretrain(&corpus, &cfg).map_err(err)?;
    let one_run = t0.elapsed().as_secs_f64();
    let second = pretrain(&corpus, &cfg).map_err(err)?;
    let h: &PretrainHistory = &first.history;
    let (r0, rn) = (h.epochs[0].rmse, h.epochs.last().unwrap().rmse);
    ensure!(first.history.to_csv() == second.history.to_csv(), "histories differ between runs");
    ensure!(rn < 0.5 * r0, "rmse {r0:.4} -> {rn:.4} is not below half");
    sh.checkpoint = Some(first.checkpoint());
    Ok(format!(
        "rmse {r0:.4} -> {rn:.4} ({:.2}x), histories identical, {one_run:.0}s per run",
        rn / r0
    ))
}

// ------------------------------------------------------------------ 10

fn criterion_10(sh: &mut Shared) -> Outcome {
    let ckpt = sh.checkpoint()?;
    let d = sh.data()?;
    let task = TaskSpec::new(Task::Fibrosis);
    let cats = categories(&d.labels, &task).map_err(err)?;
    let present: HashSet<usize> = cats.iter().map(|c| c.1).collect();
    ensure!(present.len() == 2, "phantoms span {} categories", present.len());
    let plan = make_folds(&cats, 3, 3, 2, 10).map_err(err)?;
    let config = FinetuneConfig {
        epochs: FT_EPOCHS,
        lr: FT_LR,
        seed: 10,
        ..FinetuneConfig::default()
    };

    let constant = run_cv(&mut ConstantLearner, &d.labels, &task, &plan, "constant", "").map_err(err)?;
    ensure!(constant.mean_auc == 50.0, "constant learner gives {}", constant.mean_auc);
    let oracle = run_cv(&mut OracleLearner { labels: &d.labels }, &d.labels, &task, &plan, "oracle", "").map_err(err)?;
    ensure!(oracle.mean_auc == 100.0, "oracle learner gives {}", oracle.mean_auc);

    let mut learner = FinetuneLearner {
        patients: &d.bags,
        labels: &d.labels,
        config,
        checkpoint: Some(&ckpt),
    };
    let report = run_cv(&mut learner, &d.labels, &task, &plan, "ssl+lbp", "").map_err(err)?;
    ensure!(
        report.mean_auc >= 90.0,
        "mean AUC {:.2} ± {:.2} below 90",
        report.mean_auc,
        report.std_auc
    );
    Ok(format!(
        "AUC {:.2} ± {:.2}, constant 50.0, oracle 100.0",
        report.mean_auc, report.std_auc
    ))
}

const FT_EPOCHS: usize = 30;
const FT_LR: f64 = 1e-4;

// ------------------------------------------------------------------ 11

fn criterion_11() -> Outcome {
    let mut records = Vec::new();
    let mut push = |task: Task, dist: &[(f64, usize)]| {
        for &(raw, count) in dist {
            for _ in 0..count {
                let mut r = ScoreRecord {
                    patient_id: format!("p{}", records.len()),
                    fibrosis: 0.0,
                    steatosis: 0,
                    lobular: 0,
                    ballooning: 0,
                };
                match task {
                    Task::Fibrosis => r.fibrosis = raw,
                    Task::Steatosis => r.steatosis = raw as u8,
                    Task::Lobular => r.lobular = raw as u8,
                    Task::Ballooning => r.ballooning = raw as u8,
                }
                records.push((task, r));
            }
        }
    };
    push(Task::Fibrosis, &[(0.0, 7), (1.0, 6), (2.0, 4), (3.0, 3), (3.5, 2), (4.0, 8)]);
    push(Task::Steatosis, &[(0.0, 2), (1.0, 9), (2.0, 11), (3.0, 8)]);
    push(Task::Lobular, &[(0.0, 9), (1.0, 10), (2.0, 8), (3.0, 3)]);
    push(Task::Ballooning, &[(0.0, 8), (1.0, 11), (2.0, 11)]);
    let expected: [(Task, &[usize]); 4] = [
        (Task::Fibrosis, &[7, 10, 13]),
        (Task::Steatosis, &[11, 19]),
        (Task::Lobular, &[9, 10, 11]),
        (Task::Ballooning, &[8, 11, 11]),
    ];
    let mut parts = Vec::new();
    for (task, want) in expected {
        let spec = TaskSpec::new(task);
        let mut counts = vec![0usize; spec.num_categories];
        for (t, r) in &records {
            if *t == task {
                counts[combine_score(r, &spec).map_err(err)?] += 1;
            }
        }
        ensure!(counts == want, "{task}: {counts:?} vs {want:?}");
        parts.push(format!("{task} {counts:?}"));
    }
    Ok(parts.join(", "))
}

// ------------------------------------------------------------------ 12

fn criterion_12() -> Outcome {
    let d = phantoms(12, 2, 32, 12)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let corpus: Vec<GraySlice<f32>> = d.bags.iter().flat_map(|b| b.slices.iter().cloned()).collect();
    let quick = |adversarial| PretrainConfig {
        epochs: 1,
        batch_size: 8,
        corruption: CorruptionSpec {
            patch_size: 8,
            iterations: 4,
            seed: 0,
        },
        ..pretrain_config(adversarial)
    };
    let with_adv = dir.path().join("adv.ckpt");
    let without_adv = dir.path().join("noadv.ckpt");
    pretrain(&corpus, &quick(true)).map_err(err)?.checkpoint().save(&with_adv).map_err(err)?;
    pretrain(&corpus, &quick(false)).map_err(err)?.checkpoint().save(&without_adv).map_err(err)?;

    let base = FinetuneConfig {
        epochs: 1,
        seed: 12,
        ..FinetuneConfig::default()
    };
    let folds = FoldSettings {
        k: 2,
        repeats: 1,
        val_patients: 2,
        seed: 12,
    };
    let tasks = [TaskSpec::new(Task::Steatosis)];
    let grid = AblationCell::standard_grid();

    let ssl_off: Vec<AblationCell> = grid.iter().copied().filter(|c| !c.ssl).collect();
    let source = FileCheckpoints::new(&with_adv, &without_adv);
    run_ablation_grid(&d.bags, &d.labels, &tasks, &ssl_off, &base, &folds, &source).map_err(err)?;
    ensure!(source.reads() == 0, "ssl-off cells read {} checkpoints", source.reads());

    let source = FileCheckpoints::new(&with_adv, &without_adv);
    let rows = run_ablation_grid(&d.bags, &d.labels, &tasks, &grid, &base, &folds, &source).map_err(err)?;
    ensure!(rows.len() == 6, "{} rows", rows.len());
    let mut prints = HashSet::new();
    for (row, cell) in rows.iter().zip(&grid) {
        ensure!(row.cell == *cell, "row order differs from the grid");
        let report = row.report.as_ref().ok_or_else(|| format!("{}: no report", cell.label()))?;
        let want = cell_fingerprint(cell, &tasks[0], &base, &folds);
        ensure!(row.config_fingerprint == want, "{}: fingerprint mismatch", cell.label());
        ensure!(report.config_fingerprint == want, "{}: report fingerprint mismatch", cell.label());
        ensure!(report.method == cell.label(), "{}: method `{}`", cell.label(), report.method);
        let expected_cfg = FinetuneConfig {
            input_mode: cell.input_mode,
            init_mode: if cell.ssl { InitMode::SslCheckpoint } else { InitMode::Random },
            ..base.clone()
        };
        ensure!(cell.finetune_config(&base) == expected_cfg, "{}: config mismatch", cell.label());
        prints.insert(want);
    }
    ensure!(prints.len() == 6, "fingerprints not distinct");
    ensure!(source.reads() == 2, "{} checkpoint reads for two ssl variants", source.reads());
    Ok("6 reports, fingerprints match, ssl-off cells read 0 checkpoints".into())
}

// ------------------------------------------------------------------ driver

fn main() {
    set_deterministic(true);
    let only: Option<HashSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut shared = Shared {
        data: None,
        checkpoint: None,
    };
    type Run<'a> = Box<dyn FnMut(&mut Shared) -> Outcome + 'a>;
    let criteria: Vec<(u32, &str, Run)> = vec![
        (1, "lbp oracle equivalence", Box::new(|_| criterion_1())),
        (2, "lbp monotone invariance", Box::new(|_| criterion_2())),
        (3, "corruption conservation", Box::new(|_| criterion_3())),
        (4, "windowing bounds", Box::new(|_| criterion_4())),
        (5, "shape and aggregation contracts", Box::new(|_| criterion_5())),
        (6, "gradient check", Box::new(|_| criterion_6())),
        (9, "pretraining convergence", Box::new(criterion_9)),
        (7, "freeze contract", Box::new(criterion_7)),
        (8, "auc oracles", Box::new(|_| criterion_8())),
        (10, "end-to-end separability", Box::new(criterion_10)),
        (11, "label combining counts", Box::new(|_| criterion_11())),
        (12, "ablation grid integrity", Box::new(|_| criterion_12())),
    ];
    let mut results = Vec::new();
    for (id, name, mut run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = run(&mut shared);
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => ("FAIL", e.clone()),
        };
        println!("criterion {id:>2} {name:<32} {tag} ({secs:.1}s) {detail}");
        results.push((id, outcome.is_ok()));
    }
    results.sort();
    let failed: Vec<u32> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
