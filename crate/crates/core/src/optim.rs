//! Adam with per-slot learning rates.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moment estimates for `N` scalars.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamMoments<const N: usize> {
    pub m: [f64; N],
    pub v: [f64; N],
}

impl<const N: usize> Default for AdamMoments<N> {
    fn default() -> Self {
        AdamMoments {
            m: [0.0; N],
            v: [0.0; N],
        }
    }
}

impl<const N: usize> AdamMoments<N> {
    /// Bias-corrected Adam step `t` (1-based). Slots with a zero rate are left untouched.
    pub fn step(
        &mut self,
        params: &mut [f64; N],
        grads: &[f64; N],
        lrs: &[f64; N],
        t: u64,
        cfg: &AdamConfig,
    ) {
        let bc1 = 1.0 - cfg.beta1.powf(t as f64);
        let bc2 = 1.0 - cfg.beta2.powf(t as f64);
        for i in 0..N {
            if lrs[i] == 0.0 {
                continue;
            }
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lrs[i] * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }

    /// Returns the step without applying it.
    pub fn delta(
        &mut self,
        grads: &[f64; N],
        lrs: &[f64; N],
        t: u64,
        cfg: &AdamConfig,
    ) -> [f64; N] {
        let mut p = [0.0; N];
        self.step(&mut p, grads, lrs, t, cfg);
        p
    }
}
