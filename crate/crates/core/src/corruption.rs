//! Patch-swap corruption for the context-restoration pretext task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::preprocess::GraySlice;
use crate::scalar::Scalar;

/// Attempts per patch before sampling gives up.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub patch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            patch_size: 20,
            iterations: 10,
            seed: 0,
        }
    }
}

/// Top-left corners `(row, col)` of two equally sized square patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPair {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub size: usize,
}

impl PatchPair {
    pub fn is_disjoint(&self) -> bool {
        squares_disjoint(self.a, self.b, self.size)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        let ok = |(r, c): (usize, usize)| r + self.size <= height && c + self.size <= width;
        ok(self.a) && ok(self.b)
    }
}

#[inline]
fn squares_disjoint(a: (usize, usize), b: (usize, usize), p: usize) -> bool {
    a.0 + p <= b.0 || b.0 + p <= a.0 || a.1 + p <= b.1 || b.1 + p <= a.1
}

/// Whether some patch can be placed disjointly from one at `a`.
fn has_partner(a: (usize, usize), h: usize, w: usize, p: usize) -> bool {
    a.0 >= p || a.0 + 2 * p <= h || a.1 >= p || a.1 + 2 * p <= w
}

/// splitmix64 finalizer over `seed ^ index`; per-slice stream derivation.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = (seed ^ index).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draw a pair of disjoint patches uniformly over valid placements.
///
/// The first corner is redrawn while it admits no disjoint partner; the
/// second is then rejection-sampled until disjoint from the first.
pub fn sample_patch_pair<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    patch_size: usize,
    rng: &mut R,
) -> Result<PatchPair> {
    let p = patch_size;
    let sizing = Error::PatchSizing {
        height,
        width,
        patch: p,
    };
    if p == 0 || p > height || p > width || (2 * p > height && 2 * p > width) {
        return Err(sizing);
    }
    let (rows, cols) = (height - p + 1, width - p + 1);
    let draw = |rng: &mut R| (rng.gen_range(0..rows), rng.gen_range(0..cols));
    let a = (0..MAX_REJECTIONS)
        .map(|_| draw(rng))
        .find(|&a| has_partner(a, height, width, p))
        .ok_or_else(|| Error::PatchSizing {
            height,
            width,
            patch: p,
        })?;
    let b = (0..MAX_REJECTIONS)
        .map(|_| draw(rng))
        .find(|&b| squares_disjoint(a, b, p))
        .ok_or(sizing)?;
    Ok(PatchPair { a, b, size: p })
}

/// Exchange the contents of the two patches in place.
pub fn swap_patches<T: Copy>(pixels: &mut [T], width: usize, pair: &PatchPair) {
    debug_assert!(pair.is_disjoint());
    for dr in 0..pair.size {
        let ra = (pair.a.0 + dr) * width + pair.a.1;
        let rb = (pair.b.0 + dr) * width + pair.b.1;
        for dc in 0..pair.size {
            pixels.swap(ra + dc, rb + dc);
        }
    }
}

/// Apply `spec.iterations` sequential swaps, each drawn on the evolving
/// image. Returns the corrupted slice and the swap log in application order.
pub fn corrupt<T: Scalar>(slice: &GraySlice<T>, spec: &CorruptionSpec) -> Result<(GraySlice<T>, Vec<PatchPair>)> {
    if spec.patch_size == 0 {
        return Err(invalid("patch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = slice.clone();
    let mut log = Vec::with_capacity(spec.iterations);
    for _ in 0..spec.iterations {
        let pair = sample_patch_pair(slice.height, slice.width, spec.patch_size, &mut rng)?;
        swap_patches(&mut out.pixels, out.width, &pair);
        log.push(pair);
    }
    Ok((out, log))
}

/// Undo a corruption by replaying its log in reverse.
pub fn restore<T: Scalar>(corrupted: &GraySlice<T>, log: &[PatchPair]) -> GraySlice<T> {
    let mut out = corrupted.clone();
    for pair in log.iter().rev() {
        swap_patches(&mut out.pixels, out.width, pair);
    }
    out
}
