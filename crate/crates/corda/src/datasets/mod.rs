//! Dataset format, sample loading and the geometric transforms shared by the
//! training loop.
//!
//! On-disk layout per dataset root:
//! `manifest.json` + `images/*.png` (8-bit RGB) + `labels/*.png` (8-bit gray
//! class ids, 255 = ignore) + `depth/*.png` (16-bit gray, linear in metres,
//! 0 = invalid).

mod generate;

pub use generate::{class_names, generate_synthetic_domain, shift_preset, DomainShiftConfig, CLASS_GROUND, CLASS_SKY};

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, s};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CordaError, Result};

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

pub const DEPTH_MAX_STORED: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One scene: image, semantic label map and depth map with a domain tag.
///
/// The image is stored channels-first (`[3, H, W]`, values in `[0, 1]`);
/// depth is metres with 0 marking invalid pixels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Array3<f32>,
    pub semantics: Array2<u8>,
    pub depth: Array2<f32>,
    pub domain: Domain,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        let d = self.semantics.dim();
        (d.0, d.1)
    }

    /// Pixels with usable depth.
    pub fn depth_valid(&self) -> Array2<bool> {
        self.depth.mapv(|d| d > 0.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub label: String,
    pub depth: String,
}

/// Index of one dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub domain: Domain,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub d_min: f32,
    pub d_max: f32,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Load and validate `root/manifest.json` (or the file itself when `path`
    /// points at a JSON file).
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| CordaError::io(&manifest_path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| CordaError::Json {
            path: manifest_path.clone(),
            source: e,
        })?;
        manifest.root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| CordaError::Json {
            path: path.clone(),
            source: e,
        })?;
        std::fs::write(&path, text).map_err(|e| CordaError::io(&path, e))
    }

    fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(CordaError::Format {
                path: self.root.clone(),
                msg: format!("invalid depth range [{}, {}]", self.d_min, self.d_max),
            });
        }
        if self.class_names.len() != self.num_classes {
            return Err(CordaError::Format {
                path: self.root.clone(),
                msg: format!(
                    "{} class names for {} classes",
                    self.class_names.len(),
                    self.num_classes
                ),
            });
        }
        for rec in &self.records {
            for rel in [&rec.image, &rec.label, &rec.depth] {
                let p = self.root.join(rel);
                if !p.is_file() {
                    return Err(CordaError::Format {
                        path: p,
                        msg: "referenced file does not exist".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Encode a metric depth for 16-bit storage: `round(d / d_max * 65535)`,
/// clamped into `[1, 65535]` for valid pixels so a valid depth can never
/// alias the 0 = invalid sentinel.
pub fn encode_depth(depth_m: f32, d_max: f32) -> u16 {
    if depth_m <= 0.0 {
        return 0;
    }
    let scaled = (depth_m as f64 / d_max as f64 * f64::from(DEPTH_MAX_STORED)).round();
    scaled.clamp(1.0, f64::from(DEPTH_MAX_STORED)) as u16
}

/// Inverse of [`encode_depth`]; 0 decodes to 0.0 (invalid).
pub fn decode_depth(stored: u16, d_max: f32) -> f32 {
    (f64::from(stored) * d_max as f64 / f64::from(DEPTH_MAX_STORED)) as f32
}

/// Decode one record from disk.
pub fn load_sample(manifest: &DatasetManifest, index: usize) -> Result<Sample> {
    if index >= manifest.records.len() {
        return Err(CordaError::contract(format!(
            "sample index {index} out of range ({} records)",
            manifest.records.len()
        )));
    }
    let rec = &manifest.records[index];
    let image_path = manifest.root.join(&rec.image);
    let label_path = manifest.root.join(&rec.label);
    let depth_path = manifest.root.join(&rec.depth);

    let img = image::open(&image_path)
        .map_err(|e| CordaError::Image {
            path: image_path.clone(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut image = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            image[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
        }
    }

    let lbl = image::open(&label_path)
        .map_err(|e| CordaError::Image {
            path: label_path.clone(),
            source: e,
        })?
        .to_luma8();
    if (lbl.width() as usize, lbl.height() as usize) != (w, h) {
        return Err(CordaError::Format {
            path: label_path.clone(),
            msg: format!("label dims {}x{} do not match image {}x{}", lbl.width(), lbl.height(), w, h),
        });
    }
    let mut semantics = Array2::<u8>::zeros((h, w));
    for (x, y, px) in lbl.enumerate_pixels() {
        let v = px.0[0];
        if v != IGNORE_LABEL && v as usize >= manifest.num_classes {
            return Err(CordaError::Format {
                path: label_path.clone(),
                msg: format!("label value {v} out of range for {} classes", manifest.num_classes),
            });
        }
        semantics[[y as usize, x as usize]] = v;
    }

    let dep = image::open(&depth_path)
        .map_err(|e| CordaError::Image {
            path: depth_path.clone(),
            source: e,
        })?
        .to_luma16();
    if (dep.width() as usize, dep.height() as usize) != (w, h) {
        return Err(CordaError::Format {
            path: depth_path.clone(),
            msg: format!("depth dims {}x{} do not match image {}x{}", dep.width(), dep.height(), w, h),
        });
    }
    let mut depth = Array2::<f32>::zeros((h, w));
    for (x, y, px) in dep.enumerate_pixels() {
        depth[[y as usize, x as usize]] = decode_depth(px.0[0], manifest.d_max);
    }

    Ok(Sample {
        image,
        semantics,
        depth,
        domain: manifest.domain,
    })
}

/// Map metric depth to normalized inverse depth in `[0, 1]`:
/// `(1/clamp(d, d_min, d_max) - 1/d_max) / (1/d_min - 1/d_max)`.
///
/// Invalid pixels (depth <= 0) map to 0 and are reported in the mask.
pub fn to_inverse_depth(depth: &Array2<f32>, d_min: f32, d_max: f32) -> Result<(Array2<f32>, Array2<bool>)> {
    if !(d_min > 0.0 && d_min < d_max) {
        return Err(CordaError::config(format!(
            "inverse depth requires 0 < d_min < d_max, got [{d_min}, {d_max}]"
        )));
    }
    let inv_min = 1.0 / d_max as f64;
    let span = 1.0 / d_min as f64 - inv_min;
    let mut out = Array2::<f32>::zeros(depth.dim());
    let mut mask = Array2::<bool>::from_elem(depth.dim(), false);
    ndarray::azip!((o in &mut out, m in &mut mask, &d in depth) {
        if d > 0.0 {
            let c = (d as f64).clamp(d_min as f64, d_max as f64);
            *o = ((1.0 / c - inv_min) / span) as f32;
            *m = true;
        }
    });
    Ok((out, mask))
}

/// Crop image/semantics/depth at one shared random offset.
pub fn random_crop_pair(sample: &Sample, size: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    use rand::Rng;
    let (h, w) = sample.dims();
    if size > h.min(w) {
        return Err(CordaError::config(format!(
            "crop size {size} exceeds sample dims {h}x{w}"
        )));
    }
    let oy = rng.random_range(0..=h - size);
    let ox = rng.random_range(0..=w - size);
    Ok(Sample {
        image: sample.image.slice(s![.., oy..oy + size, ox..ox + size]).to_owned(),
        semantics: sample.semantics.slice(s![oy..oy + size, ox..ox + size]).to_owned(),
        depth: sample.depth.slice(s![oy..oy + size, ox..ox + size]).to_owned(),
        domain: sample.domain,
    })
}
