//! Forward evaluation of the unrolled reconstructor and its reverse pass.
//!
//! Each phase takes a data-fit gradient step in native complex arithmetic,
//! then runs the two real channels (re, im) through a learned transform,
//! soft-thresholding, and the learned left-inverse transform. A hard data
//! consistency layer replaces the acquired k-space entries at the end, so
//! every output matches the measurements on the sampling mask exactly.
//!
//! Gradients follow the real-pair convention for complex tensors
//! (`grad = dL/d(re) + i dL/d(im)`), under which the adjoint of any
//! complex-linear map is its conjugate transpose; for the unitary centered
//! DFT that is simply the inverse transform.

use ndarray::{Array2, Array3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{ComplexImage, KSpaceGrid};
use crate::kspace::{fft2c_raw, SamplingMask};
use crate::reconnet::conv::{conv_backward_input, conv_backward_weights, conv_forward};
use crate::reconnet::params::{ParamGrads, PhaseParams, ReconParams};

/// Real-valued transform coefficients, shape `(channels, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
}

/// Elementwise `sign(v) * max(|v| - t, 0)`.
pub fn soft_threshold(v: &FeatureMap, t: f64) -> Result<FeatureMap> {
    if !(t > 0.0) {
        return Err(Error::Validation(format!("threshold {t} must be positive")));
    }
    Ok(FeatureMap {
        data: soft_threshold_raw(&v.data, t),
    })
}

fn soft_threshold_raw(v: &Array3<f64>, t: f64) -> Array3<f64> {
    v.mapv(|x| x.signum() * (x.abs() - t).max(0.0))
}

fn relu(a: &Array3<f64>) -> Array3<f64> {
    a.mapv(|v| v.max(0.0))
}

fn two_channel(x: &Array2<Complex64>) -> Array3<f64> {
    let (h, w) = x.dim();
    let mut out = Array3::zeros((2, h, w));
    for ((i, j), z) in x.indexed_iter() {
        out[(0, i, j)] = z.re;
        out[(1, i, j)] = z.im;
    }
    out
}

fn from_two_channel(a: &Array3<f64>) -> Array2<Complex64> {
    let (_, h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| Complex64::new(a[(0, i, j)], a[(1, i, j)]))
}

fn mask_apply(mask: &Array2<u8>, ks: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = ks.clone();
    out.zip_mut_with(mask, |z, &m| {
        if m == 0 {
            *z = Complex64::new(0.0, 0.0);
        }
    });
    out
}

fn mask_apply_complement(mask: &Array2<u8>, ks: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = ks.clone();
    out.zip_mut_with(mask, |z, &m| {
        if m != 0 {
            *z = Complex64::new(0.0, 0.0);
        }
    });
    out
}

struct SymTape {
    /// Pre-relu output of `g_tilde.conv_in` applied to the untresholded
    /// transform coefficients.
    sy1: Array3<f64>,
    /// `g_tilde(g(r)) - r` in two-channel form.
    residual: Array3<f64>,
}

struct PhaseTape {
    /// `F^H (M F x - y)`, the data-fit descent direction.
    grad_dir: Array2<Complex64>,
    /// Two-channel form of the phase input to the transforms.
    t0: Array3<f64>,
    /// Pre-relu output of `g.conv_in`.
    a1: Array3<f64>,
    /// Transform coefficients entering the soft threshold.
    a2: Array3<f64>,
    /// Thresholded coefficients.
    s: Array3<f64>,
    /// Pre-relu output of `g_tilde.conv_in`.
    b1: Array3<f64>,
    sym: Option<SymTape>,
}

/// Cached intermediates of one forward evaluation.
pub struct ReconTape {
    mask: Array2<u8>,
    phases: Vec<PhaseTape>,
    /// Image entering the final data consistency layer.
    x_pre_dc: Array2<Complex64>,
    /// Final reconstruction.
    pub output: Array2<Complex64>,
    /// Number of transform applications performed (one per phase).
    pub transform_applications: usize,
}

fn check_recon_inputs(y: &KSpaceGrid, omega: &SamplingMask, params: &ReconParams) -> Result<()> {
    params.validate()?;
    y.validate()?;
    if y.shape() != omega.shape() {
        return Err(Error::ShapeMismatch(format!(
            "k-space {:?} vs mask {:?}",
            y.shape(),
            omega.shape()
        )));
    }
    Ok(())
}

fn phase_forward(
    x_in: &Array2<Complex64>,
    y_masked: &Array2<Complex64>,
    mask: &Array2<u8>,
    p: &PhaseParams,
    with_symmetry: bool,
) -> (PhaseTape, Array2<Complex64>) {
    let e = fft2c_raw(x_in, false);
    let mut d = mask_apply(mask, &e);
    d.zip_mut_with(y_masked, |a, b| *a -= b);
    let grad_dir = fft2c_raw(&d, true);
    let mut r = x_in.clone();
    r.zip_mut_with(&grad_dir, |a, b| *a -= p.rho * b);

    let t0 = two_channel(&r);
    let a1 = conv_forward(&p.g.conv_in, &t0);
    let h1 = relu(&a1);
    let a2 = conv_forward(&p.g.conv_out, &h1);
    let s = soft_threshold_raw(&a2, p.threshold);
    let b1 = conv_forward(&p.g_tilde.conv_in, &s);
    let h2 = relu(&b1);
    let b2 = conv_forward(&p.g_tilde.conv_out, &h2);
    let x_out = from_two_channel(&b2);

    let sym = with_symmetry.then(|| {
        let sy1 = conv_forward(&p.g_tilde.conv_in, &a2);
        let syh = relu(&sy1);
        let sy2 = conv_forward(&p.g_tilde.conv_out, &syh);
        let residual = &sy2 - &t0;
        SymTape { sy1, residual }
    });

    (
        PhaseTape {
            grad_dir,
            t0,
            a1,
            a2,
            s,
            b1,
            sym,
        },
        x_out,
    )
}

/// Runs the full unrolled reconstructor, caching everything the reverse
/// pass needs. `with_symmetry` additionally evaluates `g_tilde(g(r))` per
/// phase for the left-inverse penalty.
pub(crate) fn forward_taped(
    y: &KSpaceGrid,
    omega: &SamplingMask,
    params: &ReconParams,
    with_symmetry: bool,
) -> Result<ReconTape> {
    check_recon_inputs(y, omega, params)?;
    let mask = omega.grid.clone();
    let y_masked = mask_apply(&mask, &y.data);

    // zero-filled initialization
    let mut x = fft2c_raw(&y_masked, true);
    let mut phases = Vec::with_capacity(params.n_phases());
    for p in &params.phases {
        let (tape, x_out) = phase_forward(&x, &y_masked, &mask, p, with_symmetry);
        phases.push(tape);
        x = x_out;
    }

    let x_pre_dc = x.clone();
    let k_x = fft2c_raw(&x, false);
    let mut k_dc = mask_apply_complement(&mask, &k_x);
    k_dc.zip_mut_with(&y_masked, |a, b| *a += b);
    let output = fft2c_raw(&k_dc, true);
    if output.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("reconstruction diverged".into()));
    }

    let transform_applications = phases.len();
    Ok(ReconTape {
        mask,
        phases,
        x_pre_dc,
        output,
        transform_applications,
    })
}

impl ReconTape {
    /// Sum over phases of `mean_pixels ||g_tilde(g(r)) - r||^2`, unweighted.
    pub fn symmetry_value(&self) -> f64 {
        self.phases
            .iter()
            .filter_map(|p| p.sym.as_ref())
            .map(|s| {
                let (_, h, w) = s.residual.dim();
                s.residual.iter().map(|v| v * v).sum::<f64>() / (h * w) as f64
            })
            .sum()
    }

    /// Reverse pass. `grad_output` is the loss gradient with respect to the
    /// final image; parameter gradients are accumulated into `grads` (the
    /// symmetry penalty contributes with weight `sym_weight`). Returns the
    /// loss gradient with respect to the input k-space grid.
    pub(crate) fn backward(
        &self,
        params: &ReconParams,
        grad_output: &Array2<Complex64>,
        sym_weight: f64,
        grads: &mut ParamGrads,
    ) -> Array2<Complex64> {
        let mask = &self.mask;
        let _ = &self.x_pre_dc;
        // hard data consistency layer
        let g_kdc = fft2c_raw(grad_output, false);
        let mut grad_y = mask_apply(mask, &g_kdc);
        let mut g_x = fft2c_raw(&mask_apply_complement(mask, &g_kdc), true);

        for (tape, (p, pg)) in self
            .phases
            .iter()
            .zip(params.phases.iter().zip(grads.phases.iter_mut()))
            .rev()
        {
            let g_b2 = two_channel(&g_x);
            let h2 = relu(&tape.b1);
            conv_backward_weights(&h2, &g_b2, &mut pg.gt_out);
            let g_h2 = conv_backward_input(&p.g_tilde.conv_out, &g_b2);
            let mut g_b1 = g_h2;
            g_b1.zip_mut_with(&tape.b1, |g, &pre| {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            });
            conv_backward_weights(&tape.s, &g_b1, &mut pg.gt_in);
            let g_s = conv_backward_input(&p.g_tilde.conv_in, &g_b1);

            // soft threshold: pass-through on active entries,
            // d/d(threshold) = -sign on active entries
            let mut g_a2 = Array3::zeros(g_s.raw_dim());
            let mut d_thr = 0.0;
            for ((ga, &gs), &a) in g_a2.iter_mut().zip(g_s.iter()).zip(tape.a2.iter()) {
                if a.abs() > p.threshold {
                    *ga = gs;
                    d_thr -= gs * a.signum();
                }
            }
            pg.threshold += d_thr;

            let mut g_t0_extra: Option<Array3<f64>> = None;
            if sym_weight > 0.0 {
                if let Some(sym) = &tape.sym {
                    let (_, h, w) = sym.residual.dim();
                    let scale = 2.0 * sym_weight / (h * w) as f64;
                    let g_sy2 = sym.residual.mapv(|v| scale * v);
                    let syh = relu(&sym.sy1);
                    conv_backward_weights(&syh, &g_sy2, &mut pg.gt_out);
                    let mut g_sy1 = conv_backward_input(&p.g_tilde.conv_out, &g_sy2);
                    g_sy1.zip_mut_with(&sym.sy1, |g, &pre| {
                        if pre <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    conv_backward_weights(&tape.a2, &g_sy1, &mut pg.gt_in);
                    g_a2 += &conv_backward_input(&p.g_tilde.conv_in, &g_sy1);
                    g_t0_extra = Some(sym.residual.mapv(|v| -scale * v));
                }
            }

            let h1 = relu(&tape.a1);
            conv_backward_weights(&h1, &g_a2, &mut pg.g_out);
            let g_h1 = conv_backward_input(&p.g.conv_out, &g_a2);
            let mut g_a1 = g_h1;
            g_a1.zip_mut_with(&tape.a1, |g, &pre| {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            });
            conv_backward_weights(&tape.t0, &g_a1, &mut pg.g_in);
            let mut g_t0 = conv_backward_input(&p.g.conv_in, &g_a1);
            if let Some(extra) = g_t0_extra {
                g_t0 += &extra;
            }
            let g_r = from_two_channel(&g_t0);

            // r = x - rho * grad_dir(x, y)
            pg.rho -= g_r
                .iter()
                .zip(tape.grad_dir.iter())
                .map(|(g, d)| (g.conj() * d).re)
                .sum::<f64>();
            let fg = fft2c_raw(&g_r, false);
            let masked_fg = mask_apply(mask, &fg);
            grad_y.zip_mut_with(&masked_fg, |a, b| *a += p.rho * b);
            let correction = fft2c_raw(&masked_fg, true);
            g_x = g_r;
            g_x.zip_mut_with(&correction, |a, b| *a -= p.rho * b);
        }

        // zero-filled initialization x0 = F^H (M y)
        let f_gx = fft2c_raw(&g_x, false);
        grad_y.zip_mut_with(&mask_apply(mask, &f_gx), |a, b| *a += b);
        grad_y
    }
}

/// One unrolled iteration: data-fit gradient step, learned transform,
/// soft-thresholding, learned left-inverse transform.
pub fn ista_phase(
    x_prev: &ComplexImage,
    y: &KSpaceGrid,
    omega: &SamplingMask,
    p: &PhaseParams,
) -> Result<ComplexImage> {
    x_prev.validate()?;
    y.validate()?;
    if x_prev.shape() != y.shape() || x_prev.shape() != omega.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?}, k-space {:?}, mask {:?}",
            x_prev.shape(),
            y.shape(),
            omega.shape()
        )));
    }
    let y_masked = mask_apply(&omega.grid, &y.data);
    let (_, x_out) = phase_forward(&x_prev.data, &y_masked, &omega.grid, p, false);
    ComplexImage::new(x_out)
}

/// Replaces the k-space of `x` with `y` on the sampled positions.
pub fn hard_dc(x: &ComplexImage, y: &KSpaceGrid, omega: &SamplingMask) -> Result<ComplexImage> {
    x.validate()?;
    y.validate()?;
    if x.shape() != y.shape() || x.shape() != omega.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?}, k-space {:?}, mask {:?}",
            x.shape(),
            y.shape(),
            omega.shape()
        )));
    }
    let k_x = fft2c_raw(&x.data, false);
    let mut k_dc = mask_apply_complement(&omega.grid, &k_x);
    k_dc.zip_mut_with(&mask_apply(&omega.grid, &y.data), |a, b| *a += b);
    ComplexImage::new(fft2c_raw(&k_dc, true))
}

/// Full reconstruction: zero-filled initialization, `n_phases` unrolled
/// iterations, then hard data consistency.
pub fn reconstruct(
    y: &KSpaceGrid,
    omega: &SamplingMask,
    params: &ReconParams,
) -> Result<ComplexImage> {
    let tape = forward_taped(y, omega, params, false)?;
    ComplexImage::new(tape.output)
}

/// Left-inverse defect `mean_pixels ||g_tilde(g(x)) - x||^2` of one phase.
pub fn symmetry_penalty(x: &ComplexImage, p: &PhaseParams) -> Result<f64> {
    x.validate()?;
    let t0 = two_channel(&x.data);
    let a1 = conv_forward(&p.g.conv_in, &t0);
    let a2 = conv_forward(&p.g.conv_out, &relu(&a1));
    let sy1 = conv_forward(&p.g_tilde.conv_in, &a2);
    let sy2 = conv_forward(&p.g_tilde.conv_out, &relu(&sy1));
    let (h, w) = x.shape();
    Ok(sy2
        .iter()
        .zip(t0.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / (h * w) as f64)
}

/// Hybrid loss of `fft2c(reconstruct(y, omega))` against `target` on
/// `loss_mask`, plus `sym_weight` times the left-inverse penalty, with
/// analytic gradients for every parameter group.
pub fn loss_and_grads(
    y: &KSpaceGrid,
    omega: &SamplingMask,
    target: &KSpaceGrid,
    loss_mask: &SamplingMask,
    params: &ReconParams,
    sym_weight: f64,
) -> Result<(f64, ParamGrads)> {
    let tape = forward_taped(y, omega, params, sym_weight > 0.0)?;
    let u = fft2c_raw(&tape.output, false);
    let (hyb, g_u) = crate::metrics::hybrid_loss_raw(&u, &target.data, &loss_mask.grid)?;
    let loss = hyb + sym_weight * tape.symmetry_value();
    let g_out = fft2c_raw(&g_u, true);
    let mut grads = ParamGrads::zeros_like(params);
    tape.backward(params, &g_out, sym_weight, &mut grads);
    Ok((loss, grads))
}
