//! Learnable parameters of the unrolled reconstructor and their binary
//! container format.
//!
//! PRM1 layout (little-endian throughout): magic `PRM1`, version u32,
//! provenance u8, n_phases u32, channels u32, then per phase: rho f64,
//! threshold f64, then the four named weight arrays in order `g.conv_in`,
//! `g.conv_out`, `g_tilde.conv_in`, `g_tilde.conv_out`, each as four u32
//! dims followed by f64 data, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::reconnet::conv::KERNEL;

const PRM_MAGIC: &[u8; 4] = b"PRM1";
const PRM_VERSION: u32 = 1;

/// Floor applied to thresholds after every optimizer step.
pub const THRESHOLD_FLOOR: f64 = 1e-6;

/// How a parameter set was produced; SiamRecon training requires an
/// SSDU-pretrained initializer unless explicitly overridden.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Random,
    Identity,
    Supervised,
    Ssdu,
    Parallel,
    Siamrecon,
}

impl Provenance {
    fn code(self) -> u8 {
        match self {
            Provenance::Random => 0,
            Provenance::Identity => 1,
            Provenance::Supervised => 2,
            Provenance::Ssdu => 3,
            Provenance::Parallel => 4,
            Provenance::Siamrecon => 5,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Provenance::Random,
            1 => Provenance::Identity,
            2 => Provenance::Supervised,
            3 => Provenance::Ssdu,
            4 => Provenance::Parallel,
            5 => Provenance::Siamrecon,
            _ => return None,
        })
    }
}

/// One convolution stack: `conv_in -> relu -> conv_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformWeights {
    pub conv_in: Array4<f64>,
    pub conv_out: Array4<f64>,
}

/// Per-phase parameters: data-fit step size, soft threshold, forward
/// transform `g` and its left inverse `g_tilde`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseParams {
    pub rho: f64,
    pub threshold: f64,
    pub g: TransformWeights,
    pub g_tilde: TransformWeights,
}

/// The full learnable parameter set of the unrolled reconstructor.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconParams {
    pub phases: Vec<PhaseParams>,
    pub channels: usize,
    pub provenance: Provenance,
}

fn uniform_scaled(rng: &mut ChaCha8Rng, oc: usize, ic: usize) -> Array4<f64> {
    let scale = 1.0 / ((ic * KERNEL * KERNEL) as f64).sqrt();
    Array4::from_shape_fn((oc, ic, KERNEL, KERNEL), |_| {
        (2.0 * rng.random::<f64>() - 1.0) * scale
    })
}

impl ReconParams {
    pub fn n_phases(&self) -> usize {
        self.phases.len()
    }

    /// Random initialization: rho 0.5, threshold 0.01, weights uniform
    /// scaled by `1/sqrt(fan_in)`.
    pub fn random(n_phases: usize, channels: usize, seed: u64) -> Result<Self> {
        if n_phases == 0 {
            return Err(Error::Validation("n_phases must be at least 1".into()));
        }
        if channels < 2 {
            return Err(Error::Validation("need at least 2 transform channels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases = (0..n_phases)
            .map(|_| PhaseParams {
                rho: 0.5,
                threshold: 0.01,
                g: TransformWeights {
                    conv_in: uniform_scaled(&mut rng, channels, 2),
                    conv_out: uniform_scaled(&mut rng, channels, channels),
                },
                g_tilde: TransformWeights {
                    conv_in: uniform_scaled(&mut rng, channels, channels),
                    conv_out: uniform_scaled(&mut rng, 2, channels),
                },
            })
            .collect();
        Ok(Self {
            phases,
            channels,
            provenance: Provenance::Random,
        })
    }

    /// Exact-identity transform pair. The two complex channels are split
    /// into rectified positive and negative parts so the mid-stack relu
    /// passes them through losslessly; `g_tilde` recombines them. Requires
    /// at least 4 channels. Thresholds start at the positivity floor.
    pub fn identity(n_phases: usize, channels: usize) -> Result<Self> {
        if n_phases == 0 {
            return Err(Error::Validation("n_phases must be at least 1".into()));
        }
        if channels < 4 {
            return Err(Error::Validation(
                "identity initialization needs at least 4 channels".into(),
            ));
        }
        let mut g_in = Array4::<f64>::zeros((channels, 2, KERNEL, KERNEL));
        // channel layout: +re, -re, +im, -im
        g_in[(0, 0, 1, 1)] = 1.0;
        g_in[(1, 0, 1, 1)] = -1.0;
        g_in[(2, 1, 1, 1)] = 1.0;
        g_in[(3, 1, 1, 1)] = -1.0;
        let mut eye = Array4::<f64>::zeros((channels, channels, KERNEL, KERNEL));
        for c in 0..channels {
            eye[(c, c, 1, 1)] = 1.0;
        }
        let mut gt_out = Array4::<f64>::zeros((2, channels, KERNEL, KERNEL));
        gt_out[(0, 0, 1, 1)] = 1.0;
        gt_out[(0, 1, 1, 1)] = -1.0;
        gt_out[(1, 2, 1, 1)] = 1.0;
        gt_out[(1, 3, 1, 1)] = -1.0;
        let phase = PhaseParams {
            rho: 0.5,
            threshold: THRESHOLD_FLOOR,
            g: TransformWeights {
                conv_in: g_in,
                conv_out: eye.clone(),
            },
            g_tilde: TransformWeights {
                conv_in: eye,
                conv_out: gt_out,
            },
        };
        Ok(Self {
            phases: vec![phase; n_phases],
            channels,
            provenance: Provenance::Identity,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Validation("parameter set has no phases".into()));
        }
        for (idx, p) in self.phases.iter().enumerate() {
            if !p.rho.is_finite() || !p.threshold.is_finite() {
                return Err(Error::NonFinite(format!("phase {idx} scalars")));
            }
            if p.threshold <= 0.0 {
                return Err(Error::Validation(format!(
                    "phase {idx} threshold {} must be positive",
                    p.threshold
                )));
            }
            for w in [
                &p.g.conv_in,
                &p.g.conv_out,
                &p.g_tilde.conv_in,
                &p.g_tilde.conv_out,
            ] {
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("phase {idx} weights")));
                }
            }
        }
        Ok(())
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(PRM_MAGIC)?;
        out.write_all(&PRM_VERSION.to_le_bytes())?;
        out.write_all(&[self.provenance.code()])?;
        out.write_all(&(self.n_phases() as u32).to_le_bytes())?;
        out.write_all(&(self.channels as u32).to_le_bytes())?;
        for p in &self.phases {
            out.write_all(&p.rho.to_le_bytes())?;
            out.write_all(&p.threshold.to_le_bytes())?;
            for w in [
                &p.g.conv_in,
                &p.g.conv_out,
                &p.g_tilde.conv_in,
                &p.g_tilde.conv_out,
            ] {
                for d in w.dim().into_pattern_tuple() {
                    out.write_all(&(d as u32).to_le_bytes())?;
                }
                for v in w.iter() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut input = BufReader::new(
            File::open(path).map_err(|e| Error::format(path, format!("cannot open: {e}")))?,
        );
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|_| Error::format(path, "truncated header"))?;
        if &magic != PRM_MAGIC {
            return Err(Error::format(path, "bad magic, expected PRM1"));
        }
        let version = read_u32(&mut input, path)?;
        if version != PRM_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported version {version}, expected {PRM_VERSION}"),
            ));
        }
        let mut prov = [0u8; 1];
        input
            .read_exact(&mut prov)
            .map_err(|_| Error::format(path, "truncated header"))?;
        let provenance = Provenance::from_code(prov[0])
            .ok_or_else(|| Error::format(path, format!("unknown provenance {}", prov[0])))?;
        let n_phases = read_u32(&mut input, path)? as usize;
        let channels = read_u32(&mut input, path)? as usize;
        let mut phases = Vec::with_capacity(n_phases);
        for _ in 0..n_phases {
            let rho = read_f64(&mut input, path)?;
            let threshold = read_f64(&mut input, path)?;
            let g_in = read_array4(&mut input, path)?;
            let g_out = read_array4(&mut input, path)?;
            let gt_in = read_array4(&mut input, path)?;
            let gt_out = read_array4(&mut input, path)?;
            phases.push(PhaseParams {
                rho,
                threshold,
                g: TransformWeights {
                    conv_in: g_in,
                    conv_out: g_out,
                },
                g_tilde: TransformWeights {
                    conv_in: gt_in,
                    conv_out: gt_out,
                },
            });
        }
        let params = Self {
            phases,
            channels,
            provenance,
        };
        params.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(params)
    }
}

trait DimExt {
    fn into_pattern_tuple(self) -> [usize; 4];
}

impl DimExt for (usize, usize, usize, usize) {
    fn into_pattern_tuple(self) -> [usize; 4] {
        [self.0, self.1, self.2, self.3]
    }
}

fn read_u32(input: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|_| Error::format(path, "truncated file"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(input: &mut impl Read, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    input
        .read_exact(&mut b)
        .map_err(|_| Error::format(path, "truncated file"))?;
    Ok(f64::from_le_bytes(b))
}

fn read_array4(input: &mut impl Read, path: &Path) -> Result<Array4<f64>> {
    let dims = [
        read_u32(input, path)? as usize,
        read_u32(input, path)? as usize,
        read_u32(input, path)? as usize,
        read_u32(input, path)? as usize,
    ];
    let len: usize = dims.iter().product();
    let mut buf = vec![0u8; 8 * len];
    input
        .read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated array data"))?;
    let values: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), values)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Gradient (or optimizer moment) buffers mirroring [`ReconParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub phases: Vec<PhaseGrads>,
}

#[derive(Debug, Clone)]
pub struct PhaseGrads {
    pub rho: f64,
    pub threshold: f64,
    pub g_in: Array4<f64>,
    pub g_out: Array4<f64>,
    pub gt_in: Array4<f64>,
    pub gt_out: Array4<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ReconParams) -> Self {
        Self {
            phases: params
                .phases
                .iter()
                .map(|p| PhaseGrads {
                    rho: 0.0,
                    threshold: 0.0,
                    g_in: Array4::zeros(p.g.conv_in.raw_dim()),
                    g_out: Array4::zeros(p.g.conv_out.raw_dim()),
                    gt_in: Array4::zeros(p.g_tilde.conv_in.raw_dim()),
                    gt_out: Array4::zeros(p.g_tilde.conv_out.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for p in &mut self.phases {
            p.rho = 0.0;
            p.threshold = 0.0;
            p.g_in.fill(0.0);
            p.g_out.fill(0.0);
            p.gt_in.fill(0.0);
            p.gt_out.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.phases.iter().all(|p| {
            p.rho.is_finite()
                && p.threshold.is_finite()
                && p.g_in.iter().all(|v| v.is_finite())
                && p.g_out.iter().all(|v| v.is_finite())
                && p.gt_in.iter().all(|v| v.is_finite())
                && p.gt_out.iter().all(|v| v.is_finite())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_params_respect_defaults() {
        let p = ReconParams::random(3, 8, 42).unwrap();
        assert_eq!(p.n_phases(), 3);
        for phase in &p.phases {
            assert_eq!(phase.rho, 0.5);
            assert_eq!(phase.threshold, 0.01);
            let fan_in_scale = 1.0 / ((2 * KERNEL * KERNEL) as f64).sqrt();
            assert!(phase.g.conv_in.iter().all(|v| v.abs() <= fan_in_scale));
        }
        let q = ReconParams::random(3, 8, 42).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn identity_needs_four_channels() {
        assert!(ReconParams::identity(2, 2).is_err());
        assert!(ReconParams::identity(2, 4).is_ok());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let path2 = dir.path().join("params2.bin");
        let p = ReconParams::random(2, 4, 7)
            .unwrap()
            .with_provenance(Provenance::Ssdu);
        p.save(&path).unwrap();
        let q = ReconParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.provenance, Provenance::Ssdu);
        q.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_truncation_and_bad_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let p = ReconParams::random(1, 4, 7).unwrap();
        p.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(ReconParams::load(&path), Err(Error::Format { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9; // version field
        std::fs::write(&path, &bad).unwrap();
        match ReconParams::load(&path) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
