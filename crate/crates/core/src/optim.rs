//! Adam with L2 weight decay, global-norm clipping, linear warmup and EMA.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam state with one moment pair and one step counter per parameter, so
/// parameters added by growth start from zero moments and fresh bias
/// correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore<f32>) -> Self {
        let mut a = Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            steps: Vec::new(),
        };
        a.extend_to(params);
        a
    }

    /// Add zero moments for parameters appended since the last call.
    pub fn extend_to(&mut self, params: &ParamStore<f32>) {
        for i in self.m.len()..params.len() {
            let shape = params.get(i).shape();
            self.m.push(Tensor::zeros(shape));
            self.v.push(Tensor::zeros(shape));
            self.steps.push(0);
        }
    }

    /// One update. `grads[i]` of `None` leaves parameter `i` and its state
    /// untouched.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Option<Vec<f32>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Consistency(format!(
                "{} gradients, {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.steps[i] += 1;
            let k = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(k);
            let c2 = 1.0 - beta2.powi(k);
            let p = params.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g[j] as f64 + weight_decay * p[j] as f64;
                let mj = beta1 * m[j] as f64 + (1.0 - beta1) * gj;
                let vj = beta2 * v[j] as f64 + (1.0 - beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = (mj / c1) / ((vj / c2).sqrt() + eps);
                p[j] = (p[j] as f64 - lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        // Slightly below the exact ratio so f32 rounding cannot overshoot.
        let scale = (max_norm / norm * (1.0 - 1e-7)) as f32;
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

/// Linear warmup: `lr·k/warmup` for completed steps `k < warmup`, then `lr`.
pub fn warmup_lr(lr: f64, warmup: u64, k: u64) -> f64 {
    if k >= warmup {
        lr
    } else {
        lr * k as f64 / warmup as f64
    }
}

/// `ema ← d·ema + (1−d)·param`, entrywise.
pub fn ema_update(ema: &mut ParamStore<f32>, params: &ParamStore<f32>, decay: f64) {
    for i in 0..params.len() {
        let p = params.get(i).data();
        let e = ema.get_mut(i).data_mut();
        if decay == 0.0 {
            e.copy_from_slice(p);
            continue;
        }
        if decay == 1.0 {
            continue;
        }
        for (ej, &pj) in e.iter_mut().zip(p) {
            let old = *ej as f64;
            *ej = (old + (1.0 - decay) * (pj as f64 - old)) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[1], v)).unwrap();
        s
    }

    #[test]
    fn single_scalar_step_matches_hand_arithmetic() {
        let mut p = store(0.5);
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &p);
        adam.step(&mut p, &[Some(vec![0.2])], 0.1).unwrap();
        // m = 0.02, v = 0.0004, mhat = 0.2, vhat = 0.04, update = 0.2/(0.2+1e-8)
        let expected = 0.5 - 0.1 * (0.2 / (0.2 + 1e-8));
        assert!((p.get(0).data()[0] as f64 - expected).abs() < 1e-7);
        adam.step(&mut p, &[Some(vec![-0.1])], 0.1).unwrap();
        let m2 = 0.9 * 0.02 + 0.1 * -0.1;
        let v2 = 0.99 * 0.0004 + 0.01 * 0.01;
        let upd = (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.9801f64)).sqrt() + 1e-8);
        let expected2 = expected - 0.1 * upd;
        assert!((p.get(0).data()[0] as f64 - expected2).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_adds_l2_gradient() {
        let mut p = store(2.0);
        let mut adam = Adam::new(
            AdamConfig {
                weight_decay: 0.5,
                ..AdamConfig::default()
            },
            &p,
        );
        adam.step(&mut p, &[Some(vec![0.0])], 0.1).unwrap();
        // effective gradient 1.0 -> update 1/(1+1e-8)
        assert!((p.get(0).data()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn missing_grad_leaves_parameter() {
        let mut p = store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[None], 0.1).unwrap();
        assert_eq!(p.get(0).data()[0], 1.0);
        assert_eq!(adam.steps[0], 0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(vec![3.0f32, 4.0]), None, Some(vec![12.0])];
        let n = clip_global_norm(&mut g, 2.0);
        assert!((n - 13.0).abs() < 1e-9);
        let after: f64 = g.iter().flatten().flatten().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!(after <= 2.0 + 1e-6 && after > 1.999);
        let mut small = vec![Some(vec![0.1f32])];
        clip_global_norm(&mut small, 2.0);
        assert_eq!(small[0].as_ref().unwrap()[0], 0.1);
    }

    #[test]
    fn warmup_is_linear() {
        assert_eq!(warmup_lr(1e-4, 1000, 0), 0.0);
        assert_eq!(warmup_lr(1e-4, 1000, 250), 1e-4 * 250.0 / 1000.0);
        assert_eq!(warmup_lr(1e-4, 1000, 1000), 1e-4);
        assert_eq!(warmup_lr(1e-4, 0, 0), 1e-4);
    }

    #[test]
    fn ema_extremes_and_convexity() {
        let p = store(1.0);
        let mut e = store(0.0);
        ema_update(&mut e, &p, 0.0);
        assert_eq!(e.get(0).data()[0], 1.0);
        let mut e = store(0.0);
        ema_update(&mut e, &p, 1.0);
        assert_eq!(e.get(0).data()[0], 0.0);
        let mut e = store(-3.0);
        ema_update(&mut e, &p, 0.9);
        let v = e.get(0).data()[0];
        assert!(v > -3.0 && v < 1.0);
        assert!((v as f64 - (-3.0 * 0.9 + 0.1)).abs() < 1e-6);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ema_stays_between_old_value_and_parameter(
            old in proptest::collection::vec(-10.0f32..10.0, 1..16),
            new in proptest::collection::vec(-10.0f32..10.0, 16),
            decay in 0.0f64..=1.0,
        ) {
            let n = old.len();
            let mut e = ParamStore::new();
            e.insert("w", Tensor::new(&[n], old.clone()).unwrap()).unwrap();
            let mut p = ParamStore::new();
            p.insert("w", Tensor::new(&[n], new[..n].to_vec()).unwrap()).unwrap();
            ema_update(&mut e, &p, decay);
            for ((&v, &a), &b) in e.get(0).data().iter().zip(&old).zip(&new) {
                prop_assert!(v >= a.min(b) && v <= a.max(b), "{v} outside [{a}, {b}]");
            }
        }

        #[test]
        fn clipped_norm_never_exceeds_the_limit(
            g in proptest::collection::vec(proptest::collection::vec(-1e3f32..1e3, 0..20), 1..5),
            limit in 0.1f64..5.0,
        ) {
            let mut grads: Vec<Option<Vec<f32>>> = g.into_iter().map(Some).collect();
            let before: f64 = grads.iter().flatten().flatten().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let reported = clip_global_norm(&mut grads, limit);
            let after: f64 = grads.iter().flatten().flatten().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((reported - before).abs() <= 1e-9 * before.max(1.0));
            prop_assert!(after <= limit + 1e-6, "{after} > {limit}");
        }

        #[test]
        fn warmup_is_exactly_proportional(lr in 1e-6f64..1.0, warmup in 1u64..100_000, frac in 0.0f64..2.0) {
            let step = (warmup as f64 * frac) as u64;
            let got = warmup_lr(lr, warmup, step);
            let want = if step >= warmup { lr } else { lr * step as f64 / warmup as f64 };
            prop_assert_eq!(got, want);
        }
    }
}
