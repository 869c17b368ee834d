//! AdamW with decoupled weight decay and the warmup-cosine learning rate.

use serde::{Deserialize, Serialize};

use crate::param::ParamStore;

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total`.
/// Steps past `total` stay at 0.
pub fn warmup_cosine(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = (total - warmup) as f64;
    let progress = (step - warmup) as f64 / span;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.04 }
    }
}

/// First and second moments, one pair of stores per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<ParamStore>,
    pub v: Vec<ParamStore>,
    /// Updates applied so far; bias correction uses `t + 1`.
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, groups: &[&ParamStore]) -> Self {
        Self {
            config,
            m: groups.iter().map(|g| g.zeros_like()).collect(),
            v: groups.iter().map(|g| g.zeros_like()).collect(),
            t: 0,
        }
    }

    /// One update of every group. Decay is skipped for parameters whose
    /// `decay` flag is unset.
    pub fn step(&mut self, params: &mut [&mut ParamStore], grads: &[&ParamStore], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "group count mismatch");
        assert_eq!(grads.len(), self.m.len(), "group count mismatch");
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (gi, store) in params.iter_mut().enumerate() {
            assert!(store.same_layout(grads[gi]), "gradient layout mismatch");
            let ms = self.m[gi].params_mut();
            let vs = self.v[gi].params_mut();
            for (((p, g), m), v) in store.params_mut().iter_mut().zip(grads[gi].params()).zip(ms).zip(vs) {
                let shrink = if p.decay { 1.0 - lr * weight_decay } else { 1.0 };
                let pd = p.value.data_mut();
                let gd = g.value.data();
                let md = m.value.data_mut();
                let vd = v.value.data_mut();
                for i in 0..pd.len() {
                    pd[i] *= shrink;
                    md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                    vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                    let mh = md[i] / c1;
                    let vh = vd[i] / c2;
                    pd[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}
