//! 3x3 same-padded convolution with explicit backward passes.
//!
//! Weights are stored as `(out_channels, in_channels, 3, 3)`. No bias terms:
//! the transforms must stay linear apart from their activations so the
//! left-inverse pairing is meaningful.

use ndarray::{Array3, Array4};

pub const KERNEL: usize = 3;

/// `out[o, y, x] = sum_{i, ky, kx} w[o, i, ky, kx] * input[i, y+ky-1, x+kx-1]`
/// with zero padding.
pub fn conv_forward(w: &Array4<f64>, input: &Array3<f64>) -> Array3<f64> {
    let (oc, ic, kh, kw) = w.dim();
    let (ic2, h, width) = input.dim();
    debug_assert_eq!(ic, ic2);
    debug_assert_eq!((kh, kw), (KERNEL, KERNEL));
    let mut out = Array3::<f64>::zeros((oc, h, width));
    for o in 0..oc {
        for i in 0..ic {
            for ky in 0..KERNEL {
                let dy = ky as isize - 1;
                for kx in 0..KERNEL {
                    let dx = kx as isize - 1;
                    let wv = w[(o, i, ky, kx)];
                    accumulate_shifted(&mut out, input, o, i, dy, dx, wv);
                }
            }
        }
    }
    out
}

/// Adds `wv * input[i, y+dy, x+dx]` into `out[o, y, x]` over valid indices.
fn accumulate_shifted(
    out: &mut Array3<f64>,
    input: &Array3<f64>,
    o: usize,
    i: usize,
    dy: isize,
    dx: isize,
    wv: f64,
) {
    if wv == 0.0 {
        return;
    }
    let (_, h, w) = input.dim();
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        for x in x0..x1 {
            let sx = (x as isize + dx) as usize;
            out[(o, y, x)] += wv * input[(i, sy, sx)];
        }
    }
}

/// Gradient with respect to the convolution input.
pub fn conv_backward_input(w: &Array4<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
    let (oc, ic, _, _) = w.dim();
    let (oc2, h, width) = grad_out.dim();
    debug_assert_eq!(oc, oc2);
    let mut grad_in = Array3::<f64>::zeros((ic, h, width));
    // d in[i, q] = sum_{o, k} w[o, i, k] * grad_out[o, q - k + 1]
    for o in 0..oc {
        for i in 0..ic {
            for ky in 0..KERNEL {
                let dy = ky as isize - 1;
                for kx in 0..KERNEL {
                    let dx = kx as isize - 1;
                    let wv = w[(o, i, ky, kx)];
                    accumulate_shifted(&mut grad_in, grad_out, i, o, -dy, -dx, wv);
                }
            }
        }
    }
    grad_in
}

/// Gradient with respect to the weights, accumulated into `grad_w`.
pub fn conv_backward_weights(
    input: &Array3<f64>,
    grad_out: &Array3<f64>,
    grad_w: &mut Array4<f64>,
) {
    let (oc, ic, _, _) = grad_w.dim();
    let (_, h, w) = input.dim();
    for o in 0..oc {
        for i in 0..ic {
            for ky in 0..KERNEL {
                let dy = ky as isize - 1;
                for kx in 0..KERNEL {
                    let dx = kx as isize - 1;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy.max(0)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx.max(0)) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            acc += grad_out[(o, y, x)] * input[(i, sy, sx)];
                        }
                    }
                    grad_w[(o, i, ky, kx)] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_w(oc: usize, ic: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((oc, ic, KERNEL, KERNEL), |_| rng.random::<f64>() - 0.5)
    }

    fn random_in(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn forward_matches_hand_computation() {
        // single-channel 3x3 input, identity-like kernel with one off-center tap
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[(0, 0, 1, 1)] = 2.0;
        w[(0, 0, 0, 1)] = 1.0; // taps the pixel above
        let mut input = Array3::<f64>::zeros((1, 8, 8));
        input[(0, 3, 4)] = 1.0;
        let out = conv_forward(&w, &input);
        assert_eq!(out[(0, 3, 4)], 2.0);
        assert_eq!(out[(0, 4, 4)], 1.0); // pixel below sees its upper neighbor
        assert_eq!(out[(0, 2, 4)], 0.0);
    }

    #[test]
    fn backward_input_is_adjoint_of_forward() {
        // <conv(x), y> == <x, conv_backward_input(y)> for random tensors
        let w = random_w(3, 2, 1);
        let x = random_in(2, 9, 11, 2);
        let y = random_in(3, 9, 11, 3);
        let lhs: f64 = conv_forward(&w, &x).iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let xt = conv_backward_input(&w, &y);
        let rhs: f64 = x.iter().zip(xt.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn backward_weights_matches_finite_differences() {
        let mut w = random_w(2, 2, 4);
        let x = random_in(2, 8, 8, 5);
        // scalar loss: sum of squares of the output
        let loss = |w: &Array4<f64>| -> f64 {
            conv_forward(w, &x).iter().map(|v| v * v).sum::<f64>() * 0.5
        };
        let out = conv_forward(&w, &x);
        let mut grad_w = Array4::zeros(w.raw_dim());
        conv_backward_weights(&x, &out, &mut grad_w);
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 1, 2, 2), (0, 1, 1, 1)] {
            let orig = w[idx];
            w[idx] = orig + h;
            let lp = loss(&w);
            w[idx] = orig - h;
            let lm = loss(&w);
            w[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad_w[idx]).abs() < 1e-5 * fd.abs().max(1.0),
                "fd {fd} vs analytic {} at {idx:?}",
                grad_w[idx]
            );
        }
    }
}
