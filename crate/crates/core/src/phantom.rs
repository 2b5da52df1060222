//! Synthetic liver phantoms with category-controlled texture granularity.
//!
//! Each slice holds a body disk of fat, an elliptical liver with a
//! nodular boundary and, inside the liver, smoothed Gaussian noise whose
//! correlation length depends on the patient's category. Every task label
//! is driven by that one category.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::derive_seed;
use crate::error::{invalid, Result};
use crate::finetune::{ScoreRecord, Task, TaskSpec};
use crate::io::{write_labels, write_volume};
use crate::preprocess::HuVolume;

const FAT_HU: f64 = -100.0;
const AIR_HU: i16 = -1000;
/// Smallest in-plane size that still holds a recognisable ellipse.
pub const MIN_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    /// In-plane size (square slices).
    pub dims: usize,
    /// Texture correlation length per category, pixels.
    pub texture_scale: Vec<f64>,
    /// Boundary perturbation amplitude per category, pixels.
    pub nodularity: Vec<f64>,
    pub base_hu: f64,
    pub noise_sigma: f64,
    pub spacing_mm: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_patients: 30,
            slices_per_patient: 20,
            dims: 64,
            texture_scale: vec![2.0, 8.0],
            nodularity: vec![0.5, 2.0],
            base_hu: 60.0,
            noise_sigma: 20.0,
            spacing_mm: [5.0, 0.8, 0.8],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Spec with `categories` evenly spaced texture scales from 2 to 8.
    pub fn with_categories(categories: usize) -> Self {
        let c = categories.max(1);
        let lerp = |lo: f64, hi: f64, i: usize| {
            if c == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (c - 1) as f64
            }
        };
        PhantomSpec {
            texture_scale: (0..c).map(|i| lerp(2.0, 8.0, i)).collect(),
            nodularity: (0..c).map(|i| lerp(0.5, 2.0, i)).collect(),
            ..Default::default()
        }
    }

    pub fn num_categories(&self) -> usize {
        self.texture_scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.texture_scale.is_empty() {
            return Err(invalid("phantom spec needs at least one category"));
        }
        if self.nodularity.len() != self.texture_scale.len() {
            return Err(invalid(format!(
                "{} texture scales but {} nodularity amplitudes",
                self.texture_scale.len(),
                self.nodularity.len()
            )));
        }
        if self.texture_scale.windows(2).any(|w| w[0] >= w[1]) || self.texture_scale[0] <= 0.0 {
            return Err(invalid("texture scales must be positive and strictly increasing"));
        }
        if self.dims < MIN_DIM {
            return Err(invalid(format!("dims {} too small for the liver ellipse (min {MIN_DIM})", self.dims)));
        }
        if self.slices_per_patient == 0 {
            return Err(invalid("slices_per_patient must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(invalid("noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Canonical raw score for each combined category of a task.
fn raw_for(task: Task, combined: usize) -> f64 {
    let table: &[f64] = match task {
        Task::Fibrosis => &[0.0, 1.0, 3.0],
        Task::Steatosis => &[0.0, 2.0],
        Task::Lobular | Task::Ballooning => &[0.0, 1.0, 2.0],
    };
    table[combined]
}

/// Labels for a phantom of texture `category` out of `n` categories.
pub fn phantom_scores(patient_id: &str, category: usize, n: usize) -> ScoreRecord {
    let raw = |task: Task| {
        let k = TaskSpec::new(task).num_categories;
        raw_for(task, category * k / n.max(1))
    };
    ScoreRecord {
        patient_id: patient_id.to_string(),
        fibrosis: raw(Task::Fibrosis),
        steatosis: raw(Task::Steatosis) as u8,
        lobular: raw(Task::Lobular) as u8,
        ballooning: raw(Task::Ballooning) as u8,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomDataset {
    pub volumes: Vec<HuVolume>,
    pub labels: Vec<ScoreRecord>,
    /// Texture category per patient.
    pub categories: Vec<usize>,
}

pub fn patient_id(i: usize) -> String {
    format!("phantom_{i:03}")
}

/// Separable Gaussian blur with mirrored borders.
fn blur(field: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    let mirror = |i: isize| -> usize {
        let n = n as isize;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * field[y * n + mirror(x as isize + k as isize - r)])
                .sum::<f64>()
                / ksum;
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[mirror(y as isize + k as isize - r) * n + x])
                .sum::<f64>()
                / ksum;
        }
    }
    out
}

/// Unit-variance texture field with correlation length `scale`.
fn texture(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    let mut t = blur(&white, n, scale);
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let std = (t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64).sqrt();
    let std = if std > 0.0 { std } else { 1.0 };
    t.iter_mut().for_each(|v| *v = (*v - mean) / std);
    t
}

struct Shape {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Shape {
    fn sample(n: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Self {
        let d = n as f64;
        let harmonics = (0..4)
            .map(|_| (rng.gen_range(5.0..12.0f64).round(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.5..1.0)))
            .collect::<Vec<_>>();
        let norm: f64 = harmonics.iter().map(|h| h.2).sum();
        Shape {
            cy: d / 2.0 + rng.gen_range(-0.04..0.04) * d,
            cx: d / 2.0 + rng.gen_range(-0.04..0.04) * d,
            a: rng.gen_range(0.30..0.36) * d,
            b: rng.gen_range(0.24..0.30) * d,
            harmonics: harmonics.into_iter().map(|(k, p, w)| (k, p, amplitude * w / norm)).collect(),
        }
    }

    /// Inside test for a slice scaled by `s` (star-shaped about the centre).
    fn contains(&self, y: f64, x: f64, s: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let theta = dy.atan2(dx);
        let (ca, sb) = (theta.cos() / (self.a * s), theta.sin() / (self.b * s));
        let radius = 1.0 / (ca * ca + sb * sb).sqrt();
        let bump: f64 = self.harmonics.iter().map(|&(k, p, w)| w * (k * theta + p).sin()).sum();
        (dy * dy + dx * dx).sqrt() <= radius + bump
    }
}

fn render_patient(spec: &PhantomSpec, index: usize, category: usize) -> HuVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let n = spec.dims;
    let z = spec.slices_per_patient;
    let shape = Shape::sample(n, spec.nodularity[category], &mut rng);
    let body = 0.47 * n as f64;
    let mut voxels = Vec::with_capacity(z * n * n);
    let mut mask = Vec::with_capacity(z * n * n);
    for k in 0..z {
        let s = 0.85 + 0.15 * (PI * (k as f64 + 0.5) / z as f64).sin();
        let tex = texture(n, spec.texture_scale[category], &mut rng);
        for y in 0..n {
            for x in 0..n {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let inside = shape.contains(fy, fx, s);
                let r = ((fy - n as f64 / 2.0).powi(2) + (fx - n as f64 / 2.0).powi(2)).sqrt();
                let hu = if inside {
                    (spec.base_hu + spec.noise_sigma * tex[y * n + x].clamp(-5.0, 5.0)).round() as i16
                } else if r <= body {
                    (FAT_HU + 10.0 * tex[y * n + x].clamp(-5.0, 5.0)).round() as i16
                } else {
                    AIR_HU
                };
                voxels.push(hu);
                mask.push(inside as u8);
            }
        }
    }
    HuVolume::new(patient_id(index), [z, n, n], voxels, Some(mask)).expect("consistent phantom dims")
}

/// Patients `i` get category `i mod C`, so categories stay balanced.
pub fn gen_phantom_dataset(spec: &PhantomSpec) -> Result<PhantomDataset> {
    spec.validate()?;
    let c = spec.num_categories();
    let categories: Vec<usize> = (0..spec.n_patients).map(|i| i % c).collect();
    let volumes: Vec<HuVolume> = categories
        .par_iter()
        .enumerate()
        .map(|(i, &cat)| render_patient(spec, i, cat))
        .collect();
    let labels = categories
        .iter()
        .enumerate()
        .map(|(i, &cat)| phantom_scores(&patient_id(i), cat, c))
        .collect();
    Ok(PhantomDataset {
        volumes,
        labels,
        categories,
    })
}

/// Write volumes in the raw layout plus `labels.csv` under `out`.
pub fn write_phantom_dataset(out: &Path, spec: &PhantomSpec, data: &PhantomDataset) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| crate::Error::io(out, e))?;
    for v in &data.volumes {
        write_volume(&out.join(&v.patient_id), v, spec.spacing_mm)?;
    }
    write_labels(&out.join("labels.csv"), &data.labels)
}
