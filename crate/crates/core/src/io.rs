//! On-disk formats: per-patient HU volumes (raw or PNG slices), the
//! preprocessed slice store and the labels table.
//!
//! Volume directory (raw layout):
//!
//! ```text
//! <patient>/volume.raw   i16 LE HU voxels, row-major over dims [z, y, x]
//! <patient>/mask.raw     u8 {0,1}, same layout (optional)
//! <patient>/meta.json    {"dims": [z,y,x], "spacing_mm": [z,y,x], "patient_id": ...}
//! ```
//!
//! PNG layout: `slice_####.png` 16-bit grayscale with `HU = value - hu_offset`
//! (`hu_offset` in meta.json, default 32768) and optional 8-bit
//! `mask_####.png` (nonzero is liver).
//!
//! Slice store: `<root>/<patient>/slice_####.f32` (f32 LE, row-major) plus
//! `<root>/index.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::finetune::{PatientBag, ScoreRecord};
use crate::preprocess::{GraySlice, HuVolume};

pub const DEFAULT_HU_OFFSET: i32 = 32768;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hu_offset: Option<i32>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path.display().to_string(), e))?;
    write_bytes(path, text.as_bytes())
}

/// Write a volume in the raw layout.
pub fn write_volume(dir: &Path, volume: &HuVolume, spacing_mm: [f64; 3]) -> Result<()> {
    create_dir(dir)?;
    let bytes: Vec<u8> = volume.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(&dir.join("volume.raw"), &bytes)?;
    if let Some(mask) = &volume.mask {
        write_bytes(&dir.join("mask.raw"), mask)?;
    }
    write_json(
        &dir.join("meta.json"),
        &VolumeMeta {
            dims: volume.dims,
            spacing_mm,
            patient_id: volume.patient_id.clone(),
            hu_offset: None,
        },
    )
}

/// Write a volume as per-slice 16-bit PNGs.
pub fn write_png_volume(dir: &Path, volume: &HuVolume, spacing_mm: [f64; 3], hu_offset: i32) -> Result<()> {
    create_dir(dir)?;
    let (h, w) = volume.plane_dims();
    for k in 0..volume.num_slices() {
        let mut data = Vec::with_capacity(2 * h * w);
        for v in volume.hu_slice(k) {
            let stored = (v as i32 + hu_offset).clamp(0, u16::MAX as i32) as u16;
            data.extend_from_slice(&stored.to_be_bytes());
        }
        write_png(&dir.join(format!("slice_{k:04}.png")), w, h, png::BitDepth::Sixteen, &data)?;
        if volume.mask.is_some() {
            let m: Vec<u8> = volume.mask_slice(k).iter().map(|&m| m * 255).collect();
            write_png(&dir.join(format!("mask_{k:04}.png")), w, h, png::BitDepth::Eight, &m)?;
        }
    }
    write_json(
        &dir.join("meta.json"),
        &VolumeMeta {
            dims: volume.dims,
            spacing_mm,
            patient_id: volume.patient_id.clone(),
            hu_offset: Some(hu_offset),
        },
    )
}

fn write_png(path: &Path, w: usize, h: usize, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| Error::format(path.display().to_string(), e))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::format(path.display().to_string(), e))
}

/// Grayscale PNG as `(width, height, samples)`, 8- or 16-bit.
fn read_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let fmt = |e: png::DecodingError| Error::format(path.display().to_string(), e);
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(fmt)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(path.display().to_string(), "expected a grayscale PNG"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let samples = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..2 * w * h]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect(),
        png::BitDepth::Eight => buf[..w * h].iter().map(|&b| b as u16).collect(),
        d => return Err(Error::format(path.display().to_string(), format!("unsupported bit depth {d:?}"))),
    };
    Ok((w, h, samples))
}

/// Read one patient directory in either layout.
pub fn read_volume(dir: &Path) -> Result<HuVolume> {
    let meta: VolumeMeta = read_json(&dir.join("meta.json"))?;
    let raw = dir.join("volume.raw");
    if raw.exists() {
        let bytes = read_bytes(&raw)?;
        if bytes.len() % 2 != 0 {
            return Err(Error::format(raw.display().to_string(), "odd byte count"));
        }
        let voxels = bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
        let mask_path = dir.join("mask.raw");
        let mask = if mask_path.exists() {
            Some(read_bytes(&mask_path)?)
        } else {
            None
        };
        return HuVolume::new(meta.patient_id, meta.dims, voxels, mask);
    }
    let offset = meta.hu_offset.unwrap_or(DEFAULT_HU_OFFSET);
    let [z, y, x] = meta.dims;
    let mut voxels = Vec::with_capacity(z * y * x);
    let mut mask = Vec::with_capacity(z * y * x);
    let mut any_mask = false;
    for k in 0..z {
        let path = dir.join(format!("slice_{k:04}.png"));
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let (w, h, samples) = read_png(&path)?;
        if (h, w) != (y, x) {
            return Err(Error::Shape {
                expected: format!("{y}x{x} slice"),
                got: format!("{h}x{w} in {}", path.display()),
            });
        }
        voxels.extend(samples.iter().map(|&v| (v as i32 - offset).clamp(i16::MIN as i32, i16::MAX as i32) as i16));
        let mpath = dir.join(format!("mask_{k:04}.png"));
        if mpath.exists() {
            any_mask = true;
            let (_, _, m) = read_png(&mpath)?;
            mask.extend(m.iter().map(|&v| (v != 0) as u8));
        } else {
            mask.extend(std::iter::repeat(1u8).take(y * x));
        }
    }
    HuVolume::new(meta.patient_id, meta.dims, voxels, any_mask.then_some(mask))
}

/// Patient directories (those holding a meta.json) under `root`, sorted.
pub fn patient_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn read_dataset(root: &Path) -> Result<Vec<HuVolume>> {
    patient_dirs(root)?.iter().map(|d| read_volume(d)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepIndexEntry {
    pub patient_id: String,
    pub slices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepIndex {
    pub height: usize,
    pub width: usize,
    pub patients: Vec<PrepIndexEntry>,
}

/// Write bags to a slice store rooted at `root`.
pub fn write_prep(root: &Path, bags: &[PatientBag<f32>]) -> Result<()> {
    create_dir(root)?;
    let (height, width) = bags
        .iter()
        .flat_map(|b| b.slices.first())
        .map(|s| (s.height, s.width))
        .next()
        .unwrap_or((0, 0));
    let mut patients = Vec::with_capacity(bags.len());
    for bag in bags {
        let dir = root.join(&bag.patient_id);
        create_dir(&dir)?;
        for (k, s) in bag.slices.iter().enumerate() {
            if (s.height, s.width) != (height, width) {
                return Err(invalid("slices in one store must share a size"));
            }
            let bytes: Vec<u8> = s.pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
            write_bytes(&dir.join(format!("slice_{k:04}.f32")), &bytes)?;
        }
        patients.push(PrepIndexEntry {
            patient_id: bag.patient_id.clone(),
            slices: bag.slices.len(),
        });
    }
    write_json(
        &root.join("index.json"),
        &PrepIndex {
            height,
            width,
            patients,
        },
    )
}

pub fn read_prep(root: &Path) -> Result<Vec<PatientBag<f32>>> {
    let index_path = root.join("index.json");
    if !index_path.exists() {
        return Err(Error::MissingArtifact(index_path));
    }
    let index: PrepIndex = read_json(&index_path)?;
    let n = index.height * index.width;
    index
        .patients
        .iter()
        .map(|e| {
            let slices = (0..e.slices)
                .map(|k| {
                    let path = root.join(&e.patient_id).join(format!("slice_{k:04}.f32"));
                    let bytes = read_bytes(&path)?;
                    if bytes.len() != 4 * n {
                        return Err(Error::Shape {
                            expected: format!("{} bytes", 4 * n),
                            got: format!("{} in {}", bytes.len(), path.display()),
                        });
                    }
                    let px = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    GraySlice::new(index.height, index.width, px)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PatientBag {
                patient_id: e.patient_id.clone(),
                slices,
            })
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path.display().to_string(), e))?;
    if labels.is_empty() {
        w.write_record(["patient_id", "fibrosis", "steatosis", "lobular", "ballooning"])
            .map_err(|e| Error::format(path.display().to_string(), e))?;
    }
    for r in labels {
        w.serialize(r).map_err(|e| Error::format(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<ScoreRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let rec: ScoreRecord = rec.map_err(|e| Error::format(path.display().to_string(), e))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}
