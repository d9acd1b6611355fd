use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `t` is the 1-based
/// step count.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamMoments, t: u64, hp: &AdamHyper) {
    debug_assert!(t >= 1);
    debug_assert_eq!(param.len(), grad.len());
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for (((p, g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// Adam over a fixed, ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step: u64,
    pub moments: Vec<AdamMoments>,
}

impl Adam {
    pub fn new(hyper: AdamHyper, sizes: &[usize]) -> Self {
        Adam {
            hyper,
            step: 0,
            moments: sizes.iter().map(|&n| AdamMoments::zeros(n)).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.hyper.lr = lr;
    }

    /// Advances the step counter once and updates every parameter.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.moments.len(), "adam parameter count");
        self.step += 1;
        for ((p, g), st) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            adam_step(p, g, st, self.step, &self.hyper);
        }
    }

    pub fn reset(&mut self, index: usize) {
        let n = self.moments[index].m.len();
        self.moments[index] = AdamMoments::zeros(n);
    }
}
