//! AdamW with decoupled weight decay, global-norm clipping and a linear
//! warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    /// One update of every parameter that has a gradient. Parameters absent
    /// from `grads` are left untouched.
    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!("gradient shape mismatch for {name}")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
            for i in 0..gd.len() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gd[i];
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gd[i] * gd[i];
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= lr * c.weight_decay * pd[i];
                pd[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_assign(k);
        }
    }
    norm
}

/// Fails with the first parameter whose gradient is not finite.
pub fn check_finite(grads: &BTreeMap<String, Tensor>) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.is_finite()) {
        Some((name, _)) => Err(Error::NonFinite(format!("gradient of {name}"))),
        None => Ok(()),
    }
}

/// Linear warmup to `peak`, then cosine decay to `floor_ratio · peak`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor_ratio: f64,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let floor = self.peak * self.floor_ratio;
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        floor + 0.5 * (self.peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> (Params, BTreeMap<String, Tensor>) {
        let mut p = Params::default();
        p.insert(name, Tensor::from_vec(vec![v]));
        (p, BTreeMap::new())
    }

    #[test]
    fn zero_gradients_without_decay_leave_params() {
        let (mut p, mut g) = one("w", 0.7);
        g.insert("w".into(), Tensor::from_vec(vec![0.0]));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..5 {
            opt.update(&mut p, &g, 1e-3).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn clipping_to_unit_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::from_vec(vec![3.0]));
        g.insert("b".to_string(), Tensor::from_vec(vec![0.0, 4.0]));
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = BTreeMap::new();
        small.insert("a".to_string(), Tensor::from_vec(vec![0.3]));
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small["a"].item(), 0.3);
    }

    #[test]
    fn hand_applied_update() {
        // θ = 0.5, g = 0.2, lr = 0.01, first step: m̂ = g, v̂ = g², so the
        // Adam step is lr · g / (|g| + ε); decay removes lr · wd · θ first.
        let (mut p, mut g) = one("w", 0.5);
        g.insert("w".into(), Tensor::from_vec(vec![0.2]));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.update(&mut p, &g, 0.01).unwrap();
        let decayed = 0.5 - 0.01 * 0.01 * 0.5;
        let expect = decayed - 0.01 * 0.2 / (0.2 + 1e-8);
        assert!((p.get("w").unwrap().item() - expect).abs() < 1e-15);
        assert!((expect - 0.489_950_000_5).abs() < 1e-12);

        // Second step with g = −0.1: m = 0.9·0.02 − 0.01 = 0.008,
        // v = 0.999·4e-5·... computed by hand below.
        g.insert("w".into(), Tensor::from_vec(vec![-0.1]));
        let before = p.get("w").unwrap().item();
        opt.update(&mut p, &g, 0.01).unwrap();
        let m = 0.9 * (0.1 * 0.2) + 0.1 * -0.1;
        let v = 0.999 * (0.001 * 0.04) + 0.001 * 0.01;
        let mh = m / (1.0 - 0.81);
        let vh = v / (1.0 - 0.999f64 * 0.999);
        let expect = before - 0.01 * 0.01 * before - 0.01 * mh / (vh.sqrt() + 1e-8);
        assert!((p.get("w").unwrap().item() - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut g = BTreeMap::new();
        g.insert("ok".to_string(), Tensor::from_vec(vec![1.0]));
        g.insert("bad".to_string(), Tensor::from_vec(vec![f64::NAN]));
        match check_finite(&g) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("bad")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            peak: 1e-3,
            warmup_steps: 10,
            total_steps: 110,
            floor_ratio: 0.1,
        };
        assert!((s.lr(0) - 1e-4).abs() < 1e-18);
        assert!((s.lr(9) - 1e-3).abs() < 1e-18);
        assert!((s.lr(10) - 1e-3).abs() < 1e-18);
        assert!((s.lr(60) - 0.55e-3).abs() < 1e-15);
        assert!((s.lr(110) - 1e-4).abs() < 1e-18);
        assert!((s.lr(500) - 1e-4).abs() < 1e-18);
        for k in 10..110 {
            assert!(s.lr(k + 1) <= s.lr(k));
        }
    }
}
