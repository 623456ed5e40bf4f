//! Stochastic gradient descent and Adam over the reconstructor parameters.
//!
//! Thresholds are projected back to the positivity floor after every step.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::reconnet::{ParamGrads, ReconParams, THRESHOLD_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimAlgo {
    Sgd,
    Adam,
}

pub struct Optimizer {
    algo: OptimAlgo,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Option<ParamGrads>,
    v: Option<ParamGrads>,
}

impl Optimizer {
    pub fn new(algo: OptimAlgo, lr: f64) -> Self {
        Self {
            algo,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: None,
            v: None,
        }
    }

    pub fn step(&mut self, params: &mut ReconParams, grads: &ParamGrads) {
        match self.algo {
            OptimAlgo::Sgd => self.sgd_step(params, grads),
            OptimAlgo::Adam => self.adam_step(params, grads),
        }
        for p in &mut params.phases {
            p.threshold = p.threshold.max(THRESHOLD_FLOOR);
        }
    }

    fn sgd_step(&mut self, params: &mut ReconParams, grads: &ParamGrads) {
        let lr = self.lr;
        for (p, g) in params.phases.iter_mut().zip(grads.phases.iter()) {
            p.rho -= lr * g.rho;
            p.threshold -= lr * g.threshold;
            sgd_array(&mut p.g.conv_in, &g.g_in, lr);
            sgd_array(&mut p.g.conv_out, &g.g_out, lr);
            sgd_array(&mut p.g_tilde.conv_in, &g.gt_in, lr);
            sgd_array(&mut p.g_tilde.conv_out, &g.gt_out, lr);
        }
    }

    fn adam_step(&mut self, params: &mut ReconParams, grads: &ParamGrads) {
        if self.m.is_none() {
            self.m = Some(ParamGrads::zeros_like(params));
            self.v = Some(ParamGrads::zeros_like(params));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let m = self.m.as_mut().unwrap();
        let v = self.v.as_mut().unwrap();
        let scalar = |w: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        };
        for ((p, g), (ms, vs)) in params
            .phases
            .iter_mut()
            .zip(grads.phases.iter())
            .zip(m.phases.iter_mut().zip(v.phases.iter_mut()))
        {
            scalar(&mut p.rho, g.rho, &mut ms.rho, &mut vs.rho);
            scalar(&mut p.threshold, g.threshold, &mut ms.threshold, &mut vs.threshold);
            adam_array(&mut p.g.conv_in, &g.g_in, &mut ms.g_in, &mut vs.g_in, b1, b2, bc1, bc2, eps, lr);
            adam_array(&mut p.g.conv_out, &g.g_out, &mut ms.g_out, &mut vs.g_out, b1, b2, bc1, bc2, eps, lr);
            adam_array(&mut p.g_tilde.conv_in, &g.gt_in, &mut ms.gt_in, &mut vs.gt_in, b1, b2, bc1, bc2, eps, lr);
            adam_array(&mut p.g_tilde.conv_out, &g.gt_out, &mut ms.gt_out, &mut vs.gt_out, b1, b2, bc1, bc2, eps, lr);
        }
    }
}

fn sgd_array(w: &mut Array4<f64>, g: &Array4<f64>, lr: f64) {
    w.zip_mut_with(g, |wv, &gv| *wv -= lr * gv);
}

#[allow(clippy::too_many_arguments)]
fn adam_array(
    w: &mut Array4<f64>,
    g: &Array4<f64>,
    m: &mut Array4<f64>,
    v: &mut Array4<f64>,
    b1: f64,
    b2: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
    lr: f64,
) {
    for (((wv, &gv), mv), vv) in w.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mv = b1 * *mv + (1.0 - b1) * gv;
        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
        *wv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
    }
}
