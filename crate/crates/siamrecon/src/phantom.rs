//! Synthetic ground-truth generation and dataset persistence.
//!
//! Phantoms are real non-negative magnitude images normalized so the peak
//! intensity is 1. Values are quantized to f32 at generation time so a
//! dataset round-trips the CIM1 format without loss.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ComplexImage, MIN_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Ordered collection of (id, image) pairs sharing one shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<(String, ComplexImage)>,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    split: Split,
    h: usize,
    w: usize,
    ids: Vec<String>,
}

/// Accumulates one soft-edged rotated ellipse into a real grid.
pub fn add_soft_ellipse(
    img: &mut Array2<f64>,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    intensity: f64,
) {
    let (h, w) = img.dim();
    let (sin_a, cos_a) = angle.sin_cos();
    const EDGE: f64 = 0.3;
    for i in 0..h {
        for j in 0..w {
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let u = (dx * cos_a + dy * sin_a) / rx;
            let v = (-dx * sin_a + dy * cos_a) / ry;
            let e = u * u + v * v;
            let t = ((1.0 - e) / EDGE).clamp(0.0, 1.0);
            img[(i, j)] += intensity * t * t * (3.0 - 2.0 * t);
        }
    }
}

fn quantize_f32(img: &mut Array2<f64>) {
    img.mapv_inplace(|v| v as f32 as f64);
}

/// Deterministic random smooth-ellipse phantom, peak intensity 1.
pub fn gen_ellipse_phantom(h: usize, w: usize, n_ellipses: usize, seed: u64) -> Result<ComplexImage> {
    if h < MIN_DIM || w < MIN_DIM {
        return Err(Error::Validation(format!(
            "phantom must be at least {MIN_DIM}x{MIN_DIM}, got {h}x{w}"
        )));
    }
    if n_ellipses == 0 {
        return Err(Error::Validation("n_ellipses must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Array2::<f64>::zeros((h, w));
    for _ in 0..n_ellipses {
        let cy = (0.2 + 0.6 * rng.random::<f64>()) * h as f64;
        let cx = (0.2 + 0.6 * rng.random::<f64>()) * w as f64;
        let ry = ((0.08 + 0.27 * rng.random::<f64>()) * h as f64).max(1.5);
        let rx = ((0.08 + 0.27 * rng.random::<f64>()) * w as f64).max(1.5);
        let angle = rng.random::<f64>() * std::f64::consts::PI;
        let intensity = 0.2 + 0.8 * rng.random::<f64>();
        add_soft_ellipse(&mut img, cy, cx, ry, rx, angle, intensity);
    }
    let max = img.iter().cloned().fold(0.0_f64, f64::max);
    debug_assert!(max > 0.0, "ellipse rasterization covered no pixel");
    img.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    quantize_f32(&mut img);
    ComplexImage::from_real(&img)
}

/// Shepp-Logan-style head phantom (modified high-contrast intensities),
/// clipped to be non-negative and normalized to peak 1.
pub fn shepp_logan(h: usize, w: usize) -> Result<ComplexImage> {
    if h < MIN_DIM || w < MIN_DIM {
        return Err(Error::Validation(format!(
            "phantom must be at least {MIN_DIM}x{MIN_DIM}, got {h}x{w}"
        )));
    }
    // (value, a, b, x0, y0, phi_deg)
    const ELLIPSES: [(f64, f64, f64, f64, f64, f64); 10] = [
        (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
        (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
        (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
        (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
        (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
        (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
        (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
        (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
        (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
    ];
    let mut img = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            // pixel centers mapped to [-1, 1], y up
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / h as f64;
            let x = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
            let mut v = 0.0;
            for &(val, a, b, x0, y0, phi) in &ELLIPSES {
                let (sin_p, cos_p) = phi.to_radians().sin_cos();
                let xr = (x - x0) * cos_p + (y - y0) * sin_p;
                let yr = -(x - x0) * sin_p + (y - y0) * cos_p;
                if (xr / a).powi(2) + (yr / b).powi(2) <= 1.0 {
                    v += val;
                }
            }
            img[(i, j)] = v.max(0.0);
        }
    }
    let max = img.iter().cloned().fold(0.0_f64, f64::max);
    if max > 0.0 {
        img.mapv_inplace(|v| v / max);
    }
    quantize_f32(&mut img);
    ComplexImage::from_real(&img)
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and tag words.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &t in tags {
        s = splitmix64(s ^ t.wrapping_mul(0xD1B54A32D192ED03));
    }
    s
}

/// Generates `count` phantoms with per-item derived seeds and stable ids.
pub fn gen_dataset(count: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Validation("dataset count must be at least 1".into()));
    }
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let item_seed = derive_seed(seed, &[i as u64]);
        let n_ellipses = 3 + (item_seed % 4) as usize;
        let img = gen_ellipse_phantom(h, w, n_ellipses, item_seed)?;
        items.push((format!("phantom_{i:03}"), img));
    }
    Ok(Dataset {
        items,
        split: Split::Train,
    })
}

impl Dataset {
    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.items.first().map(|(_, img)| img.shape())
    }
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (h, w) = ds
        .shape()
        .ok_or_else(|| Error::Validation("cannot save an empty dataset".into()))?;
    let manifest = Manifest {
        split: ds.split,
        h,
        w,
        ids: ds.items.iter().map(|(id, _)| id.clone()).collect(),
    };
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    for (id, img) in &ds.items {
        img.save(dir.join(format!("{id}.cim")))?;
    }
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::format(&manifest_path, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let mut items = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        let path = dir.join(format!("{id}.cim"));
        let img = ComplexImage::load(&path)?;
        if img.shape() != (manifest.h, manifest.w) {
            return Err(Error::format(
                &path,
                format!("shape {:?} disagrees with manifest", img.shape()),
            ));
        }
        items.push((id.clone(), img));
    }
    Ok(Dataset {
        items,
        split: manifest.split,
    })
}
