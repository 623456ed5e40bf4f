//! Complex-valued image-domain and Fourier-domain grids, plus the CIM1
//! on-disk format shared by both.
//!
//! CIM1 layout: magic `CIM1`, H and W as u32 little-endian, then H*W
//! (real, imag) pairs of f32 little-endian, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Smallest grid side for which a dense-center mask exists.
pub const MIN_DIM: usize = 8;

const CIM_MAGIC: &[u8; 4] = b"CIM1";

fn validate_grid(data: &Array2<Complex64>, what: &str) -> Result<()> {
    let (h, w) = data.dim();
    if h < MIN_DIM || w < MIN_DIM {
        return Err(Error::Validation(format!(
            "{what} must be at least {MIN_DIM}x{MIN_DIM}, got {h}x{w}"
        )));
    }
    if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite(format!("{what} contains non-finite entries")));
    }
    Ok(())
}

/// 2D complex image-domain grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    pub data: Array2<Complex64>,
}

/// 2D complex Fourier-domain grid, DC component at the grid center.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceGrid {
    pub data: Array2<Complex64>,
}

impl ComplexImage {
    pub fn new(data: Array2<Complex64>) -> Result<Self> {
        validate_grid(&data, "image")?;
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Self::new(Array2::zeros((h, w)))
    }

    pub fn from_real(real: &Array2<f64>) -> Result<Self> {
        Self::new(real.mapv(|v| Complex64::new(v, 0.0)))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.data, "image")
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.data.mapv(|z| z.norm())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_cim(path, &self.data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_cim(path)?)
    }
}

impl KSpaceGrid {
    pub fn new(data: Array2<Complex64>) -> Result<Self> {
        validate_grid(&data, "k-space grid")?;
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Self::new(Array2::zeros((h, w)))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.data, "k-space grid")
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_cim(path, &self.data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_cim(path)?)
    }
}

/// Inner product `sum conj(a_i) * b_i` over two same-shape grids.
pub fn inner_product(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

pub fn write_cim(path: impl AsRef<Path>, data: &Array2<Complex64>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = data.dim();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CIM_MAGIC)?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    for z in data.iter() {
        out.write_all(&(z.re as f32).to_le_bytes())?;
        out.write_all(&(z.im as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_cim(path: impl AsRef<Path>) -> Result<Array2<Complex64>> {
    let path = path.as_ref();
    let mut input = BufReader::new(
        File::open(path).map_err(|e| Error::format(path, format!("cannot open: {e}")))?,
    );
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if &magic != CIM_MAGIC {
        return Err(Error::format(path, "bad magic, expected CIM1"));
    }
    let h = read_u32(&mut input, path)? as usize;
    let w = read_u32(&mut input, path)? as usize;
    let mut buf = vec![0u8; 8 * h * w];
    input
        .read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated payload"))?;
    let mut data = Array2::zeros((h, w));
    for (idx, chunk) in buf.chunks_exact(8).enumerate() {
        let re = f32::from_le_bytes(chunk[0..4].try_into().unwrap()) as f64;
        let im = f32::from_le_bytes(chunk[4..8].try_into().unwrap()) as f64;
        data[(idx / w, idx % w)] = Complex64::new(re, im);
    }
    Ok(data)
}

pub(crate) fn read_u32(input: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|_| Error::format(path, "truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_grids() {
        assert!(ComplexImage::zeros(4, 16).is_err());
        assert!(ComplexImage::zeros(16, 16).is_ok());
    }

    #[test]
    fn rejects_non_finite() {
        let mut data = Array2::zeros((8, 8));
        data[(3, 3)] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(ComplexImage::new(data), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cim_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.cim");
        let data = Array2::from_shape_fn((8, 12), |(i, j)| {
            Complex64::new(i as f64 * 0.25, j as f64 - 3.5)
        });
        write_cim(&path, &data).unwrap();
        let back = read_cim(&path).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn cim_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cim");
        std::fs::write(&path, b"NOPE").unwrap();
        match read_cim(&path) {
            Err(Error::Format { path: p, .. }) => assert!(p.contains("bad.cim")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn cim_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.cim");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CIM1");
        bytes.extend_from_slice(&8u32.to_le_bytes());
        bytes.extend_from_slice(&8u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_cim(&path), Err(Error::Format { .. })));
    }
}
