//! Heavy-ball SGD and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// Cosine decay from `lr0` to `lr_min` over `total` epochs. The endpoints
/// are returned exactly (no float round trip through the formula): epoch 0
/// gives `lr0`, any epoch at or past `total` gives `lr_min`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if epoch == 0 {
        lr0
    } else if epoch >= total {
        lr_min
    } else {
        let t = epoch as f64 / total as f64;
        lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// SGD with classical momentum: `v <- m v + g`, `theta <- theta - lr v`.
/// Velocity is kept per parameter, keyed by visit name, and materializes
/// lazily on the first step.
pub struct SgdMomentum<S: Elem> {
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor<S>>,
}

impl<S: Elem> SgdMomentum<S> {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum { momentum, velocity: BTreeMap::new() }
    }

    /// One update over every parameter. Parameters without a gradient entry
    /// still decay their velocity, which keeps the recurrence exact when a
    /// submodule happens to be unused in one step.
    pub fn step(
        &mut self,
        params: &mut ModelParams<S>,
        grads: &BTreeMap<String, Tensor<S>>,
        lr: f64,
    ) -> Result<()> {
        let velocity = &mut self.velocity;
        let m = S::from_f64(self.momentum);
        let lr_s = S::from_f64(lr);
        let mut failure: Option<Error> = None;
        params.visit_mut(&mut |name, t| {
            if failure.is_some() {
                return;
            }
            let grad = grads.get(&name);
            if let Some(g) = grad {
                if g.shape() != t.shape() {
                    failure = Some(Error::shape(
                        "sgd_momentum",
                        format!(
                            "gradient for `{name}` has shape {:?}, parameter is {:?}",
                            g.shape(),
                            t.shape()
                        ),
                    ));
                    return;
                }
            }
            let v = velocity.entry(name).or_insert_with(|| Tensor::zeros(t.shape()));
            let (vd, td) = (v.data_mut(), t.data_mut());
            for i in 0..td.len() {
                let g_i = grad.map_or_else(S::zero, |g| g.data()[i]);
                vd[i] = m * vd[i] + g_i;
                td[i] = td[i] - lr_s * vd[i];
            }
        });
        failure.map_or(Ok(()), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_params() -> (ModelConfig, ModelParams<f64>) {
        let mut cfg = ModelConfig::classify(2);
        cfg.layer_dims = vec![4];
        cfg.interpoint = vec![false];
        cfg.k = 2;
        cfg.shared_dim = 4;
        cfg.head_dims = vec![];
        let mut rng = crate::rng::stream(1, "init");
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        (cfg, params)
    }

    fn snapshot(params: &ModelParams<f64>) -> Vec<f64> {
        let mut all = Vec::new();
        params.visit(&mut |_, t| all.extend_from_slice(t.data()));
        all
    }

    fn ones_like(params: &ModelParams<f64>) -> BTreeMap<String, Tensor<f64>> {
        let mut grads = BTreeMap::new();
        params.visit(&mut |name, t| {
            grads.insert(name, Tensor::full(t.shape(), 1.0));
        });
        grads
    }

    #[test]
    fn momentum_recurrence_matches_hand_computation() {
        // Constant gradient 1, lr 1, momentum 0.9, theta_0 = 0:
        //   v1 = 1,   theta_1 = -1
        //   v2 = 1.9, theta_2 = -2.9
        let (_, mut params) = tiny_params();
        params.visit_mut(&mut |_, t| *t = Tensor::zeros(t.shape()));
        let grads = ones_like(&params);
        let mut opt = SgdMomentum::new(0.9);
        opt.step(&mut params, &grads, 1.0).unwrap();
        assert!(snapshot(&params).iter().all(|&v| v == -1.0), "theta_1 must be -1");
        opt.step(&mut params, &grads, 1.0).unwrap();
        assert!(snapshot(&params).iter().all(|&v| v == -2.9), "theta_2 must be -2.9");
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let (_, mut params) = tiny_params();
        params.visit_mut(&mut |_, t| *t = Tensor::full(t.shape(), 1.0));
        let grads = ones_like(&params);
        let mut opt = SgdMomentum::new(0.0);
        opt.step(&mut params, &grads, 0.05).unwrap();
        assert!(snapshot(&params).iter().all(|&v| v == 0.95), "1 - 0.05 * 1 = 0.95");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let (_, mut params) = tiny_params();
        let before = snapshot(&params);
        let grads = ones_like(&params);
        let mut opt = SgdMomentum::new(0.9);
        for _ in 0..3 {
            opt.step(&mut params, &grads, 0.0).unwrap();
        }
        let after = snapshot(&params);
        assert!(
            before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()),
            "lr 0 must not move parameters even as velocity accumulates"
        );
    }

    #[test]
    fn heavy_ball_converges_on_a_quadratic_bowl() {
        // Loss 0.5 * sum(theta^2) has gradient theta; momentum SGD must pull
        // every parameter to zero.
        let (_, mut params) = tiny_params();
        params.visit_mut(&mut |_, t| *t = Tensor::full(t.shape(), 5.0));
        let mut opt = SgdMomentum::new(0.9);
        for _ in 0..200 {
            let mut grads = BTreeMap::new();
            params.visit(&mut |name, t| {
                grads.insert(name, t.clone());
            });
            opt.step(&mut params, &grads, 0.05).unwrap();
        }
        let worst = snapshot(&params).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(worst < 1e-3, "bowl minimum not reached, worst |theta| = {worst}");
    }

    #[test]
    fn missing_gradients_decay_velocity_only() {
        let (_, mut params) = tiny_params();
        let before = snapshot(&params);
        let mut opt = SgdMomentum::new(0.9);
        opt.step(&mut params, &BTreeMap::new(), 0.1).unwrap();
        assert_eq!(snapshot(&params), before, "no gradients, no movement from zero velocity");
    }

    #[test]
    fn cosine_schedule_hits_endpoints_exactly() {
        let (lr0, lr_min) = (0.37, 0.0041);
        assert_eq!(cosine_lr(0, 80, lr0, lr_min), lr0);
        assert_eq!(cosine_lr(80, 80, lr0, lr_min), lr_min);
        assert_eq!(cosine_lr(81, 80, lr0, lr_min), lr_min, "past the end stays at the floor");
        let mid = cosine_lr(40, 80, lr0, lr_min);
        assert!(
            (mid - 0.5 * (lr0 + lr_min)).abs() < 1e-12,
            "midpoint must be the average, got {mid}"
        );
        // Monotone non-increasing across the whole schedule.
        let mut prev = f64::INFINITY;
        for e in 0..=80 {
            let lr = cosine_lr(e, 80, lr0, lr_min);
            assert!(lr <= prev + 1e-15, "schedule rose at epoch {e}");
            prev = lr;
        }
    }
}
