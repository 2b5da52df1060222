//! Local binary pattern texture encoding.
//!
//! Pixels are quantized to integer levels, then every pixel receives an
//! `n`-bit code whose bit `p` is set when neighbour `p` compares above the
//! centre. Neighbours are numbered from the east neighbour counter-clockwise
//! (east, north-east, north, north-west, west, south-west, south, south-east
//! for the 8-neighbourhood at radius 1).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::preprocess::GraySlice;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// Bit set when `q_p - q_c >= 1`, i.e. neighbour strictly brighter.
    #[default]
    StrictGreater,
    /// Bit set when `q_p >= q_c`.
    GreaterOrEqual,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderPolicy {
    /// Out-of-frame neighbours take the nearest edge pixel.
    #[default]
    Replicate,
    /// Pixels whose neighbourhood leaves the frame get code 0.
    ZeroCode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbpSpec {
    pub radius: usize,
    pub neighbors: usize,
    pub border: BorderPolicy,
    pub comparison: Comparison,
    pub levels: u32,
}

impl Default for LbpSpec {
    fn default() -> Self {
        LbpSpec {
            radius: 1,
            neighbors: 8,
            border: BorderPolicy::Replicate,
            comparison: Comparison::StrictGreater,
            levels: 256,
        }
    }
}

impl LbpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(invalid("LBP radius must be at least 1"));
        }
        if !(1..=32).contains(&self.neighbors) {
            return Err(invalid(format!(
                "LBP neighbour count {} outside 1..=32",
                self.neighbors
            )));
        }
        if self.levels < 2 {
            return Err(invalid("LBP quantization needs at least 2 levels"));
        }
        Ok(())
    }

    /// Largest representable code, `2^n - 1`.
    pub fn max_code(&self) -> u32 {
        if self.neighbors == 32 {
            u32::MAX
        } else {
            (1u32 << self.neighbors) - 1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LbpImage {
    pub height: usize,
    pub width: usize,
    pub neighbors: usize,
    pub radius: usize,
    pub codes: Vec<u32>,
}

impl LbpImage {
    /// Code counts indexed by code value; sums to the pixel count.
    pub fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; 1usize << self.neighbors.min(16)];
        for &c in &self.codes {
            if let Some(slot) = h.get_mut(c as usize) {
                *slot += 1;
            }
        }
        h
    }
}

/// `round(pixel · (levels - 1))`, clamped into range.
pub fn quantize<T: Scalar>(slice: &GraySlice<T>, levels: u32) -> Vec<i64> {
    let top = (levels - 1) as f64;
    slice
        .pixels
        .iter()
        .map(|p| (p.as_f64().clamp(0.0, 1.0) * top).round() as i64)
        .collect()
}

/// Offsets `(dy, dx)` of the radius-1 8-neighbourhood in bit order.
pub const RING8: [(isize, isize); 8] = [
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
];

pub fn lbp_encode<T: Scalar>(slice: &GraySlice<T>, spec: &LbpSpec) -> Result<LbpImage> {
    spec.validate()?;
    let side = 2 * spec.radius + 1;
    if slice.height < side || slice.width < side {
        return Err(invalid(format!(
            "{}x{} slice is smaller than the {side}x{side} LBP neighbourhood",
            slice.height, slice.width
        )));
    }
    let q = quantize(slice, spec.levels);
    let codes = if spec.radius == 1 && spec.neighbors == 8 {
        encode_ring8(&q, slice.height, slice.width, spec)
    } else {
        encode_circular(&q, slice.height, slice.width, spec)
    };
    Ok(LbpImage {
        height: slice.height,
        width: slice.width,
        neighbors: spec.neighbors,
        radius: spec.radius,
        codes,
    })
}

fn encode_ring8(q: &[i64], h: usize, w: usize, spec: &LbpSpec) -> Vec<u32> {
    let strict = spec.comparison == Comparison::StrictGreater;
    let mut codes = vec![0u32; h * w];
    for y in 0..h {
        let border_row = y == 0 || y + 1 == h;
        for x in 0..w {
            let on_border = border_row || x == 0 || x + 1 == w;
            if on_border && spec.border == BorderPolicy::ZeroCode {
                continue;
            }
            let c = q[y * w + x];
            let mut code = 0u32;
            for (bit, &(dy, dx)) in RING8.iter().enumerate() {
                let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let nx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let n = q[ny * w + nx];
                let set = if strict { n > c } else { n >= c };
                code |= (set as u32) << bit;
            }
            codes[y * w + x] = code;
        }
    }
    codes
}

/// Circular sampling with bilinear interpolation between pixel centres.
fn encode_circular(q: &[i64], h: usize, w: usize, spec: &LbpSpec) -> Vec<u32> {
    let r = spec.radius as f64;
    let offsets: Vec<(f64, f64)> = (0..spec.neighbors)
        .map(|p| {
            let theta = 2.0 * std::f64::consts::PI * p as f64 / spec.neighbors as f64;
            // snap values that are integral up to rounding noise
            let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
            (snap(-r * theta.sin()), snap(r * theta.cos()))
        })
        .collect();
    let at = |yy: isize, xx: isize| -> f64 {
        let yy = yy.clamp(0, h as isize - 1) as usize;
        let xx = xx.clamp(0, w as isize - 1) as usize;
        q[yy * w + xx] as f64
    };
    let strict = spec.comparison == Comparison::StrictGreater;
    let rad = spec.radius;
    let mut codes = vec![0u32; h * w];
    for y in 0..h {
        for x in 0..w {
            let inside = y >= rad && x >= rad && y + rad < h && x + rad < w;
            if !inside && spec.border == BorderPolicy::ZeroCode {
                continue;
            }
            let c = q[y * w + x] as f64;
            let mut code = 0u32;
            for (bit, &(dy, dx)) in offsets.iter().enumerate() {
                let sy = y as f64 + dy;
                let sx = x as f64 + dx;
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x0 + 1) * (1.0 - fy) * fx
                    + at(y0 + 1, x0) * fy * (1.0 - fx)
                    + at(y0 + 1, x0 + 1) * fy * fx;
                let set = if strict { v > c } else { v >= c };
                code |= (set as u32) << bit;
            }
            codes[y * w + x] = code;
        }
    }
    codes
}

/// Scale codes into `[0, 1]` by `2^n - 1`.
pub fn lbp_normalize<T: Scalar>(lbp: &LbpImage) -> GraySlice<T> {
    let top = if lbp.neighbors >= 32 {
        u32::MAX as f64
    } else {
        ((1u64 << lbp.neighbors) - 1) as f64
    };
    GraySlice {
        height: lbp.height,
        width: lbp.width,
        pixels: lbp.codes.iter().map(|&c| T::of(c as f64 / top)).collect(),
    }
}

/// Encode then normalize; the classifier's texture input.
pub fn lbp_slice<T: Scalar>(slice: &GraySlice<T>, spec: &LbpSpec) -> Result<GraySlice<T>> {
    Ok(lbp_normalize(&lbp_encode(slice, spec)?))
}
