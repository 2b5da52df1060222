//! CT preprocessing: Hounsfield windowing, liver masking, slice filtering
//! and resizing of axial slices.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// A 3D CT volume in Hounsfield units with an optional binary liver mask.
///
/// Voxels are stored row-major over `dims = [d0, d1, d2]`; `slice_axis`
/// names the axis that enumerates axial slices (0 for the usual `[z, y, x]`).
#[derive(Clone, Debug, PartialEq)]
pub struct HuVolume {
    pub patient_id: String,
    pub dims: [usize; 3],
    pub voxels: Vec<i16>,
    pub mask: Option<Vec<u8>>,
    pub slice_axis: usize,
}

impl HuVolume {
    pub fn new(
        patient_id: impl Into<String>,
        dims: [usize; 3],
        voxels: Vec<i16>,
        mask: Option<Vec<u8>>,
    ) -> Result<Self> {
        let v = HuVolume {
            patient_id: patient_id.into(),
            dims,
            voxels,
            mask,
            slice_axis: 0,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.dims.iter().product();
        if self.voxels.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} voxels for dims {:?}", self.dims),
                got: self.voxels.len().to_string(),
            });
        }
        if self.slice_axis > 2 {
            return Err(invalid(format!("slice axis {} out of range", self.slice_axis)));
        }
        if let Some(mask) = &self.mask {
            if mask.len() != n {
                return Err(Error::Shape {
                    expected: format!("mask of {n} voxels"),
                    got: mask.len().to_string(),
                });
            }
            if let Some(bad) = mask.iter().find(|&&m| m > 1) {
                return Err(invalid(format!("mask value {bad} is not binary")));
            }
        }
        Ok(())
    }

    pub fn num_slices(&self) -> usize {
        self.dims[self.slice_axis]
    }

    /// In-plane dims `(height, width)` of one axial slice.
    pub fn plane_dims(&self) -> (usize, usize) {
        let rest: Vec<usize> = (0..3).filter(|&a| a != self.slice_axis).map(|a| self.dims[a]).collect();
        (rest[0], rest[1])
    }

    fn plane_indices(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let [d0, d1, d2] = self.dims;
        let (h, w) = self.plane_dims();
        let axis = self.slice_axis;
        (0..h * w).map(move |p| {
            let (r, c) = (p / w, p % w);
            let (i, j, l) = match axis {
                0 => (k, r, c),
                1 => (r, k, c),
                _ => (r, c, k),
            };
            debug_assert!(i < d0 && j < d1 && l < d2);
            (i * d1 + j) * d2 + l
        })
    }

    /// Raw HU values of axial slice `k`.
    pub fn hu_slice(&self, k: usize) -> Vec<i16> {
        self.plane_indices(k).map(|i| self.voxels[i]).collect()
    }

    /// Mask of axial slice `k`; all ones when the volume carries no mask.
    pub fn mask_slice(&self, k: usize) -> Vec<u8> {
        match &self.mask {
            Some(m) => self.plane_indices(k).map(|i| m[i]).collect(),
            None => {
                let (h, w) = self.plane_dims();
                vec![1; h * w]
            }
        }
    }
}

/// Hounsfield window `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lo: f64,
    pub hi: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { lo: -200.0, hi: 250.0 }
    }
}

impl WindowSpec {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let w = WindowSpec { lo, hi };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(invalid(format!("degenerate HU window [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    #[inline]
    pub fn map<T: Scalar>(&self, hu: f64) -> T {
        T::of((hu.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo))
    }
}

/// A single-channel image with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GraySlice<T> {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<T>,
}

impl<T: Scalar> GraySlice<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape {
                expected: format!("{height}x{width} pixels"),
                got: pixels.len().to_string(),
            });
        }
        Ok(GraySlice { height, width, pixels })
    }

    pub fn constant(height: usize, width: usize, value: T) -> Self {
        GraySlice {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.pixels[row * self.width + col]
    }

    pub fn mean(&self) -> T {
        if self.pixels.is_empty() {
            return T::zero();
        }
        self.pixels.iter().copied().sum::<T>() / T::of(self.pixels.len() as f64)
    }

    pub fn cast<U: Scalar>(&self) -> GraySlice<U> {
        GraySlice {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| U::of(p.as_f64())).collect(),
        }
    }
}

/// Window every voxel of `volume` to `[0, 1]`, keeping its layout.
pub fn window_hu<T: Scalar>(volume: &HuVolume, spec: WindowSpec) -> Result<Vec<T>> {
    spec.validate()?;
    Ok(volume.voxels.iter().map(|&v| spec.map(v as f64)).collect())
}

/// Zero every pixel outside the liver mask.
pub fn apply_mask<T: Scalar>(
    height: usize,
    width: usize,
    slice: &[T],
    mask_slice: &[u8],
) -> Result<GraySlice<T>> {
    if slice.len() != height * width || mask_slice.len() != slice.len() {
        return Err(Error::Shape {
            expected: format!("slice and mask of {height}x{width}"),
            got: format!("{} pixels and {} mask entries", slice.len(), mask_slice.len()),
        });
    }
    let pixels = slice
        .iter()
        .zip(mask_slice)
        .map(|(&p, &m)| if m == 1 { p } else { T::zero() })
        .collect();
    GraySlice::new(height, width, pixels)
}

/// Keep slices whose `mean · value_scale >= threshold`, in order.
pub fn filter_slices<T: Scalar>(
    slices: Vec<GraySlice<T>>,
    threshold: f64,
    value_scale: f64,
) -> Vec<GraySlice<T>> {
    slices
        .into_iter()
        .filter(|s| passes_threshold(s.mean().as_f64(), threshold, value_scale))
        .collect()
}

#[inline]
fn passes_threshold(mean: f64, threshold: f64, value_scale: f64) -> bool {
    mean * value_scale >= threshold
}

/// Bilinear resize to `target×target` using half-pixel sample centres with
/// edge clamping; outputs are clamped to `[0, 1]`.
pub fn resize_slice<T: Scalar>(slice: &GraySlice<T>, target: usize) -> Result<GraySlice<T>> {
    if target < 2 {
        return Err(invalid(format!("resize target {target} must be at least 2")));
    }
    if slice.height == 0 || slice.width == 0 {
        return Err(invalid("cannot resize an empty slice"));
    }
    if slice.height == target && slice.width == target {
        return Ok(slice.clone());
    }
    let rows = sample_axis(slice.height, target);
    let cols = sample_axis(slice.width, target);
    let mut out = Vec::with_capacity(target * target);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = slice.at(r0, c0) * (1.0 - fc) + slice.at(r0, c1) * fc;
            let bottom = slice.at(r1, c0) * (1.0 - fc) + slice.at(r1, c1) * fc;
            let v = top * (1.0 - fr) + bottom * fr;
            out.push(T::of(v.clamp(0.0, 1.0)));
        }
    }
    GraySlice::new(target, target, out)
}

impl<T: Scalar> GraySlice<T> {
    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.get(r, c).as_f64()
    }
}

/// For each output index: (lower source index, upper source index, weight of upper).
fn sample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            (x0, x1, x - x0 as f64)
        })
        .collect()
}

/// How the slice-retention mean is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanOver {
    /// Mean over every pixel of the masked slice.
    #[default]
    AllPixels,
    /// Mean over liver pixels only (zero when the mask is empty).
    MaskedPixels,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub window: WindowSpec,
    pub threshold: f64,
    pub value_scale: f64,
    pub target: usize,
    pub mean_over: MeanOver,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            window: WindowSpec::default(),
            threshold: 5.0,
            value_scale: 255.0,
            target: 224,
            mean_over: MeanOver::AllPixels,
        }
    }
}

/// Window → mask → filter → resize, per axial slice.
///
/// Returns [`Error::EmptyPatient`] when no slice survives; callers decide
/// whether that aborts the run or just drops the patient.
pub fn preprocess_volume<T: Scalar>(volume: &HuVolume, spec: &PreprocessSpec) -> Result<Vec<GraySlice<T>>> {
    volume.validate()?;
    spec.window.validate()?;
    if spec.threshold < 0.0 {
        return Err(invalid("slice threshold must be non-negative"));
    }
    let (h, w) = volume.plane_dims();
    let mut out = Vec::new();
    for k in 0..volume.num_slices() {
        let windowed: Vec<T> = volume
            .hu_slice(k)
            .into_iter()
            .map(|v| spec.window.map(v as f64))
            .collect();
        let mask = volume.mask_slice(k);
        let masked = apply_mask(h, w, &windowed, &mask)?;
        let mean = match spec.mean_over {
            MeanOver::AllPixels => masked.mean().as_f64(),
            MeanOver::MaskedPixels => {
                let n = mask.iter().filter(|&&m| m == 1).count();
                if n == 0 {
                    0.0
                } else {
                    masked.pixels.iter().map(|p| p.as_f64()).sum::<f64>() / n as f64
                }
            }
        };
        if !passes_threshold(mean, spec.threshold, spec.value_scale) {
            continue;
        }
        let resized = resize_slice(&masked, spec.target)?;
        // interpolation can pull a borderline slice under the threshold
        if spec.mean_over == MeanOver::AllPixels
            && !passes_threshold(resized.mean().as_f64(), spec.threshold, spec.value_scale)
        {
            continue;
        }
        out.push(resized);
    }
    if out.is_empty() {
        return Err(Error::EmptyPatient(volume.patient_id.clone()));
    }
    Ok(out)
}
