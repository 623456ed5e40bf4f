//! Centered orthonormal 2D Fourier forward model, undersampling operators
//! and mask generators.
//!
//! The Fourier convention is orthonormal with the DC component at the grid
//! center (index `(H/2, W/2)`), so Parseval and the adjoint identity hold
//! exactly and the data-fit step size is mask-independent.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_u32, ComplexImage, KSpaceGrid, MIN_DIM};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn roll2(a: &Array2<Complex64>, sh: isize, sw: isize) -> Array2<Complex64> {
    let (h, w) = a.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        let ii = (i as isize + sh).rem_euclid(h as isize) as usize;
        for j in 0..w {
            let jj = (j as isize + sw).rem_euclid(w as isize) as usize;
            out[(ii, jj)] = a[(i, j)];
        }
    }
    out
}

fn fftshift2(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = a.dim();
    roll2(a, (h / 2) as isize, (w / 2) as isize)
}

fn ifftshift2(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = a.dim();
    roll2(a, -((h / 2) as isize), -((w / 2) as isize))
}

fn transpose_copy(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((w, h), |(i, j)| a[(j, i)])
}

fn fft_rows_inplace(a: &mut Array2<Complex64>, inverse: bool) {
    let w = a.ncols();
    PLANNER.with(|p| {
        let fft = {
            let mut planner = p.borrow_mut();
            if inverse {
                planner.plan_fft_inverse(w)
            } else {
                planner.plan_fft_forward(w)
            }
        };
        for mut row in a.outer_iter_mut() {
            fft.process(row.as_slice_mut().expect("standard layout"));
        }
    });
}

/// Orthonormal centered 2D DFT on a raw array, no validation.
pub(crate) fn fft2c_raw(input: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (h, w) = input.dim();
    let mut buf = ifftshift2(input);
    fft_rows_inplace(&mut buf, inverse);
    let mut t = transpose_copy(&buf);
    fft_rows_inplace(&mut t, inverse);
    let buf = transpose_copy(&t);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut out = fftshift2(&buf);
    out.mapv_inplace(|z| z * scale);
    out
}

/// Orthonormal centered 2D Fourier transform.
pub fn fft2c(img: &ComplexImage) -> Result<KSpaceGrid> {
    img.validate()?;
    KSpaceGrid::new(fft2c_raw(&img.data, false))
}

/// Exact inverse of [`fft2c`].
pub fn ifft2c(ks: &KSpaceGrid) -> Result<ComplexImage> {
    ks.validate()?;
    ComplexImage::new(fft2c_raw(&ks.data, true))
}

/// Mask provenance: how the sample pattern was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Cartesian1d,
    Random2d,
    Resample,
}

impl MaskKind {
    fn code(self) -> u32 {
        match self {
            MaskKind::Cartesian1d => 0,
            MaskKind::Random2d => 1,
            MaskKind::Resample => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(MaskKind::Cartesian1d),
            1 => Some(MaskKind::Random2d),
            2 => Some(MaskKind::Resample),
            _ => None,
        }
    }
}

/// Binary k-space sampling pattern with provenance metadata.
///
/// `kind = Cartesian1d` samples full columns (phase-encode lines) with
/// `center_size` dense center columns; the point-based kinds sample
/// individual positions with a dense `center_size x center_size` block.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub grid: Array2<u8>,
    pub kind: MaskKind,
    pub rate: f64,
    pub center_size: usize,
    pub seed: u64,
}

const MSK_MAGIC: &[u8; 4] = b"MSK1";

fn round_count(x: f64) -> usize {
    x.round() as usize
}

/// Default dense-center side, scaled from the 20-of-256 full-scale recipe
/// with a floor of 4 so small grids stay valid.
pub fn scaled_center_size(dim: usize) -> usize {
    round_count(20.0 * dim as f64 / 256.0).max(4)
}

fn center_range(dim: usize, center: usize) -> std::ops::Range<usize> {
    let start = (dim - center) / 2;
    start..start + center
}

impl SamplingMask {
    pub fn shape(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn popcount(&self) -> usize {
        self.grid.iter().filter(|&&v| v != 0).count()
    }

    /// All-ones mask (rate 1.0).
    pub fn full(h: usize, w: usize) -> Result<Self> {
        if h < MIN_DIM || w < MIN_DIM {
            return Err(Error::Validation(format!(
                "mask must be at least {MIN_DIM}x{MIN_DIM}, got {h}x{w}"
            )));
        }
        Ok(Self {
            grid: Array2::from_elem((h, w), 1),
            kind: MaskKind::Random2d,
            rate: 1.0,
            center_size: 0,
            seed: 0,
        })
    }

    /// Elementwise application of the mask to a raw k-space array.
    pub(crate) fn apply_raw(&self, ks: &Array2<Complex64>) -> Array2<Complex64> {
        let mut out = ks.clone();
        out.zip_mut_with(&self.grid, |z, &m| {
            if m == 0 {
                *z = Complex64::new(0.0, 0.0);
            }
        });
        out
    }

    pub fn is_set(&self, i: usize, j: usize) -> bool {
        self.grid[(i, j)] != 0
    }

    /// Declares a dense center after loading from disk (MSK1 does not
    /// persist the center size). Fails if the region is not fully set.
    pub fn with_center_size(mut self, center_size: usize) -> Result<Self> {
        self.center_size = center_size;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid.dim();
        if h < MIN_DIM || w < MIN_DIM {
            return Err(Error::Validation(format!(
                "mask must be at least {MIN_DIM}x{MIN_DIM}, got {h}x{w}"
            )));
        }
        if self.grid.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask entries must be 0 or 1".into()));
        }
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::Validation(format!("rate {} outside (0, 1]", self.rate)));
        }
        if self.center_size > 0 {
            if self.center_size > h.min(w) {
                return Err(Error::Validation(format!(
                    "center {} larger than grid {h}x{w}",
                    self.center_size
                )));
            }
            match self.kind {
                MaskKind::Cartesian1d => {
                    for j in center_range(w, self.center_size) {
                        for i in 0..h {
                            if self.grid[(i, j)] == 0 {
                                return Err(Error::Validation(
                                    "declared center columns not fully sampled".into(),
                                ));
                            }
                        }
                    }
                }
                MaskKind::Random2d | MaskKind::Resample => {
                    for i in center_range(h, self.center_size) {
                        for j in center_range(w, self.center_size) {
                            if self.grid[(i, j)] == 0 {
                                return Err(Error::Validation(
                                    "declared center block not fully sampled".into(),
                                ));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.seed > u32::MAX as u64 {
            return Err(Error::Validation(
                "mask seed does not fit the 32-bit MSK1 seed field".into(),
            ));
        }
        let (h, w) = self.grid.dim();
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MSK_MAGIC)?;
        out.write_all(&(h as u32).to_le_bytes())?;
        out.write_all(&(w as u32).to_le_bytes())?;
        out.write_all(&self.kind.code().to_le_bytes())?;
        out.write_all(&(self.seed as u32).to_le_bytes())?;
        for &v in self.grid.iter() {
            out.write_all(&[v])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads an MSK1 file. The rate is recomputed from the stored grid and
    /// the center size is left at 0 (see [`SamplingMask::with_center_size`]).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut input = BufReader::new(
            File::open(path).map_err(|e| Error::format(path, format!("cannot open: {e}")))?,
        );
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|_| Error::format(path, "truncated header"))?;
        if &magic != MSK_MAGIC {
            return Err(Error::format(path, "bad magic, expected MSK1"));
        }
        let h = read_u32(&mut input, path)? as usize;
        let w = read_u32(&mut input, path)? as usize;
        let kind_code = read_u32(&mut input, path)?;
        let kind = MaskKind::from_code(kind_code)
            .ok_or_else(|| Error::format(path, format!("unknown mask kind {kind_code}")))?;
        let seed = read_u32(&mut input, path)? as u64;
        let mut buf = vec![0u8; h * w];
        input
            .read_exact(&mut buf)
            .map_err(|_| Error::format(path, "truncated payload"))?;
        if buf.iter().any(|&v| v > 1) {
            return Err(Error::format(path, "mask entries must be 0 or 1"));
        }
        let grid = Array2::from_shape_vec((h, w), buf)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let rate = match kind {
            MaskKind::Cartesian1d => {
                let full_cols = (0..w)
                    .filter(|&j| (0..h).all(|i| grid[(i, j)] != 0))
                    .count();
                full_cols as f64 / w as f64
            }
            _ => grid.iter().filter(|&&v| v != 0).count() as f64 / (h * w) as f64,
        };
        let mask = Self {
            grid,
            kind,
            rate,
            center_size: 0,
            seed,
        };
        mask.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(mask)
    }
}

/// Computes `mask .* fft2c(img)`; entries off the mask are exactly zero.
pub fn undersample(img: &ComplexImage, mask: &SamplingMask) -> Result<KSpaceGrid> {
    if img.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs mask {:?}",
            img.shape(),
            mask.shape()
        )));
    }
    let ks = fft2c(img)?;
    KSpaceGrid::new(mask.apply_raw(&ks.data))
}

/// Computes `ifft2c(mask .* ks)`; the zero-filled reconstruction when `ks`
/// holds acquired measurements.
pub fn adjoint(ks: &KSpaceGrid, mask: &SamplingMask) -> Result<ComplexImage> {
    if ks.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "k-space {:?} vs mask {:?}",
            ks.shape(),
            mask.shape()
        )));
    }
    ComplexImage::new(fft2c_raw(&mask.apply_raw(&ks.data), true))
}

/// Deterministic partial Fisher-Yates draw of `k` of `n` candidates.
fn sample_without_replacement<T: Copy>(rng: &mut ChaCha8Rng, pool: &mut Vec<T>, k: usize) -> Vec<T> {
    let n = pool.len();
    debug_assert!(k <= n);
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool[..k].to_vec()
}

/// Generates a sampling mask: dense center plus a uniform draw of the
/// remaining budget, deterministic per `(kind, h, w, rate, center_size, seed)`.
pub fn make_mask(
    kind: MaskKind,
    h: usize,
    w: usize,
    rate: f64,
    center_size: usize,
    seed: u64,
) -> Result<SamplingMask> {
    if h < MIN_DIM || w < MIN_DIM {
        return Err(Error::Validation(format!(
            "mask must be at least {MIN_DIM}x{MIN_DIM}, got {h}x{w}"
        )));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Validation(format!("rate {rate} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = Array2::<u8>::zeros((h, w));

    match kind {
        MaskKind::Cartesian1d => {
            if center_size > w {
                return Err(Error::Validation(format!(
                    "center {center_size} columns exceed width {w}"
                )));
            }
            let budget = round_count(rate * w as f64);
            if budget < center_size {
                return Err(Error::Budget(format!(
                    "rate {rate} gives {budget} columns, below the {center_size}-column center"
                )));
            }
            let center = center_range(w, center_size);
            for j in center.clone() {
                for i in 0..h {
                    grid[(i, j)] = 1;
                }
            }
            let mut pool: Vec<usize> = (0..w).filter(|j| !center.contains(j)).collect();
            for j in sample_without_replacement(&mut rng, &mut pool, budget - center_size) {
                for i in 0..h {
                    grid[(i, j)] = 1;
                }
            }
        }
        MaskKind::Random2d | MaskKind::Resample => {
            if center_size > h.min(w) {
                return Err(Error::Validation(format!(
                    "center {center_size} larger than grid {h}x{w}"
                )));
            }
            let budget = round_count(rate * (h * w) as f64);
            let center_cells = center_size * center_size;
            if budget < center_cells {
                return Err(Error::Budget(format!(
                    "rate {rate} gives {budget} samples, below the {center_cells}-sample center"
                )));
            }
            let rows = center_range(h, center_size);
            let cols = center_range(w, center_size);
            for i in rows.clone() {
                for j in cols.clone() {
                    grid[(i, j)] = 1;
                }
            }
            let mut pool: Vec<usize> = (0..h * w)
                .filter(|idx| {
                    let (i, j) = (idx / w, idx % w);
                    !(rows.contains(&i) && cols.contains(&j))
                })
                .collect();
            for idx in sample_without_replacement(&mut rng, &mut pool, budget - center_cells) {
                grid[(idx / w, idx % w)] = 1;
            }
        }
    }

    let mask = SamplingMask {
        grid,
        kind,
        rate,
        center_size,
        seed,
    };
    mask.validate()?;
    Ok(mask)
}

/// Splits an acquisition mask into a training component `theta` and a loss
/// component `lambda`. The dense center always goes to `theta`; off-center
/// samples are assigned to `lambda` uniformly without replacement
/// (`|lambda| = max(1, round(loss_fraction * |omega off-center|))`).
pub fn partition_mask(
    omega: &SamplingMask,
    loss_fraction: f64,
    seed: u64,
) -> Result<(SamplingMask, SamplingMask)> {
    omega.validate()?;
    if !(loss_fraction > 0.0 && loss_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "loss_fraction {loss_fraction} outside (0, 1)"
        )));
    }
    let (h, w) = omega.shape();
    let rows = center_range(h, omega.center_size);
    let cols = center_range(w, omega.center_size);
    let in_center = |i: usize, j: usize| {
        omega.center_size > 0
            && match omega.kind {
                MaskKind::Cartesian1d => cols.contains(&j),
                _ => rows.contains(&i) && cols.contains(&j),
            }
    };
    let mut off_center: Vec<(usize, usize)> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if omega.grid[(i, j)] != 0 && !in_center(i, j) {
                off_center.push((i, j));
            }
        }
    }
    let n = off_center.len();
    if n < 2 {
        return Err(Error::Budget(format!(
            "omega has only {n} off-center samples; cannot split into nonempty components"
        )));
    }
    let k = round_count(loss_fraction * n as f64).max(1);
    if k >= n {
        return Err(Error::Budget(format!(
            "loss_fraction {loss_fraction} leaves the training component empty off-center"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = off_center;
    let lambda_cells = sample_without_replacement(&mut rng, &mut pool, k);

    let mut theta_grid = omega.grid.clone();
    let mut lambda_grid = Array2::<u8>::zeros((h, w));
    for &(i, j) in &lambda_cells {
        theta_grid[(i, j)] = 0;
        lambda_grid[(i, j)] = 1;
    }
    let cells = (h * w) as f64;
    let theta = SamplingMask {
        rate: theta_grid.iter().filter(|&&v| v != 0).count() as f64 / cells,
        grid: theta_grid,
        kind: MaskKind::Random2d,
        center_size: if omega.kind == MaskKind::Cartesian1d { 0 } else { omega.center_size },
        seed,
    };
    let lambda = SamplingMask {
        rate: k as f64 / cells,
        grid: lambda_grid,
        kind: MaskKind::Random2d,
        center_size: 0,
        seed,
    };
    theta.validate()?;
    lambda.validate()?;
    Ok((theta, lambda))
}
