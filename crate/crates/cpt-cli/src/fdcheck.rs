//! Central-difference verification of the analytic gradients.
//!
//! Builds a small synthetic batch, runs one backward pass, then perturbs a
//! sample of entries in every parameter tensor and compares the analytic
//! gradient against `(loss(x + h) - loss(x - h)) / 2h`. All math runs in
//! `f64`; the forward is evaluated in eval mode, so dropout never fires and
//! the loss is a deterministic function of the parameters.

use std::collections::BTreeSet;

use cpt_core::data::{collate, generate_dataset, Cloud, LabelKind, PointBatch, ShapeFamily};
use cpt_core::model::{collect_grads, forward, ForwardOptions, ModelConfig, ModelParams, Task};
use cpt_core::rng::stream;
use cpt_core::train::cross_entropy;
use cpt_core::{Error, Result};
use rand::RngCore;

/// Tolerance on the worst relative error of any checked entry.
pub const TOLERANCE: f64 = 1e-4;

/// Central-difference step scale, about the cube root of f64 epsilon: the
/// classic balance between truncation and rounding error.
const H_SCALE: f64 = 6e-6;

/// Worst observed error for one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorReport {
    pub name: String,
    /// Entries actually perturbed (0 when no gradient reached the tensor).
    pub entries: usize,
    pub worst: f64,
}

impl TensorReport {
    pub fn passed(&self) -> bool {
        self.entries > 0 && self.worst < TOLERANCE
    }
}

/// `|a - f|` scaled by the larger magnitude; the floor keeps finite-difference
/// noise on near-zero gradients from reading as huge relative errors.
fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

/// Up to `samples` distinct entry indices, deterministic under the rng.
fn sample_indices(numel: usize, samples: usize, rng: &mut impl RngCore) -> Vec<usize> {
    if numel <= samples {
        return (0..numel).collect();
    }
    let mut picked = BTreeSet::new();
    while picked.len() < samples {
        picked.insert((rng.next_u64() % numel as u64) as usize);
    }
    picked.into_iter().collect()
}

/// Synthetic batch sized to the config: a couple of clouds per shape family,
/// enough points for the neighbourhood size, labels matching the task.
fn tiny_batch(cfg: &ModelConfig, seed: u64) -> Result<(PointBatch<f64>, Vec<usize>)> {
    let (families, labels): (&[ShapeFamily], LabelKind) = match cfg.task {
        Task::Classify { classes } => {
            (&ShapeFamily::ALL[..classes.min(ShapeFamily::ALL.len())], LabelKind::Classes)
        }
        Task::Segment { .. } => (&ShapeFamily::ALL[..3], LabelKind::Parts),
    };
    let n_points = 16.max(cfg.k + 1);
    let dataset = generate_dataset::<f64>(families, 2, n_points, 0.0, seed, labels)?;
    let refs: Vec<&Cloud<f64>> = dataset.clouds.iter().collect();
    let batch = collate(&refs)?;
    let targets = match cfg.task {
        Task::Classify { .. } => batch.class_ids.clone(),
        Task::Segment { .. } => batch.point_labels.clone(),
    }
    .ok_or_else(|| Error::Data("generated batch is missing its labels".into()))?;
    Ok((batch, targets))
}

fn loss_of(
    cfg: &ModelConfig,
    params: &ModelParams<f64>,
    batch: &PointBatch<f64>,
    targets: &[usize],
) -> Result<f64> {
    let mut rng = stream(0, "fdcheck-eval"); // eval-mode forward never draws
    let out = forward(cfg, params, batch, ForwardOptions::eval(), &mut rng)?;
    Ok(cross_entropy(&out.logits, targets)?.value().data()[0])
}

/// Runs the whole suite and reports per-tensor worst relative errors in
/// parameter visit order.
pub fn run(cfg: &ModelConfig, samples: usize, seed: u64) -> Result<Vec<TensorReport>> {
    cfg.validate()?;
    let (batch, targets) = tiny_batch(cfg, seed)?;

    let mut init_rng = stream(seed, "init");
    let params = ModelParams::<f64>::init(cfg, &mut init_rng)?;

    let mut fwd_rng = stream(seed, "fdcheck-grad");
    let out = forward(cfg, &params, &batch, ForwardOptions::grad(), &mut fwd_rng)?;
    let loss = cross_entropy(&out.logits, &targets)?;
    loss.backward()?;
    let analytic = collect_grads(&out.vars);

    let mut tensors: Vec<(String, usize)> = Vec::new();
    params.visit(&mut |name, t| tensors.push((name, t.numel())));

    let mut pick_rng = stream(seed, "fdcheck-pick");
    let mut reports = Vec::with_capacity(tensors.len());
    for (name, numel) in tensors {
        let Some(grad) = analytic.get(&name) else {
            // A parameter the loss never touches is itself a defect.
            reports.push(TensorReport { name, entries: 0, worst: f64::INFINITY });
            continue;
        };
        let mut worst = 0.0_f64;
        let indices = sample_indices(numel, samples, &mut pick_rng);
        for &i in &indices {
            let mut perturbed = params.clone();
            let mut base = 0.0;
            perturbed.visit_mut(&mut |n, t| {
                if n == name {
                    base = t.data()[i];
                }
            });
            let h = H_SCALE * (1.0 + base.abs());
            let mut set = |v: f64, p: &mut ModelParams<f64>| {
                p.visit_mut(&mut |n, t| {
                    if n == name {
                        t.data_mut()[i] = v;
                    }
                })
            };
            set(base + h, &mut perturbed);
            let up = loss_of(cfg, &perturbed, &batch, &targets)?;
            set(base - h, &mut perturbed);
            let down = loss_of(cfg, &perturbed, &batch, &targets)?;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(grad.data()[i], fd));
        }
        reports.push(TensorReport { name, entries: indices.len(), worst });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floors_near_zero_gradients() {
        assert!(rel_err(0.0, 1e-11) < TOLERANCE, "fd noise on a true zero must pass");
        assert!(rel_err(1.0, 1.1) > 0.09, "a real 10% miss must show");
    }

    #[test]
    fn sample_indices_are_distinct_sorted_and_capped() {
        let mut rng = stream(3, "fdcheck-pick");
        let idx = sample_indices(100, 6, &mut rng);
        assert_eq!(idx.len(), 6);
        assert!(idx.windows(2).all(|w| w[0] < w[1]), "sorted and distinct: {idx:?}");
        assert!(idx.iter().all(|&i| i < 100));
        let mut rng = stream(3, "fdcheck-pick");
        assert_eq!(sample_indices(4, 6, &mut rng), vec![0, 1, 2, 3], "small tensors use every entry");
    }
}
