//! Geometric normalization and training-time augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::PointBatch;
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

/// Centres the XYZ channels of `[n, f]` points on their centroid and scales
/// so the farthest point sits on the unit sphere. Accumulation runs in f64
/// regardless of storage type. A cloud whose points all coincide has no
/// scale and is rejected.
pub fn unit_sphere_normalize<S: Elem>(points: &mut Tensor<S>) -> Result<()> {
    let shape = points.shape().to_vec();
    if shape.len() != 2 || shape[1] < 3 {
        return Err(Error::shape(
            "unit_sphere_normalize",
            format!("points must be [n, f>=3], got {shape:?}"),
        ));
    }
    let (n, f) = (shape[0], shape[1]);
    let data = points.data_mut();
    let mut centroid = [0.0f64; 3];
    for i in 0..n {
        for (c, acc) in centroid.iter_mut().enumerate() {
            *acc += data[i * f + c].to_f64();
        }
    }
    for acc in &mut centroid {
        *acc /= n as f64;
    }
    let mut max_sq = 0.0f64;
    for i in 0..n {
        let mut sq = 0.0;
        for (c, acc) in centroid.iter().enumerate() {
            let v = data[i * f + c].to_f64() - acc;
            sq += v * v;
        }
        max_sq = max_sq.max(sq);
    }
    if max_sq == 0.0 {
        return Err(Error::Data("degenerate cloud: all points coincide".into()));
    }
    let inv = 1.0 / max_sq.sqrt();
    for i in 0..n {
        for (c, acc) in centroid.iter().enumerate() {
            data[i * f + c] = S::from_f64((data[i * f + c].to_f64() - acc) * inv);
        }
    }
    Ok(())
}

/// Training-time augmentation on the XYZ channels of `[b, n, f]` features:
/// per-coordinate Gaussian jitter clamped to `±jitter_clip`, then one
/// uniform scale per cloud. Draw order is fixed per cloud — the scale first,
/// then the jitters — and degenerate settings (`sigma = 0`, `lo = hi`)
/// consume no draws, so `sigma = 0` with scale range `[1, 1]` is a bit-exact
/// identity.
pub fn augment<S: Elem>(
    features: &mut Tensor<S>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let shape = features.shape().to_vec();
    if shape.len() != 3 || shape[2] < 3 {
        return Err(Error::shape("augment", format!("features must be [b, n, f>=3], got {shape:?}")));
    }
    cfg.validate()?;
    let (b, n, f) = (shape[0], shape[1], shape[2]);
    let noise = (cfg.jitter_sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.jitter_sigma).expect("sigma validated non-negative"));
    let data = features.data_mut();
    for cloud in 0..b {
        let scale = if cfg.scale_lo == cfg.scale_hi {
            cfg.scale_lo
        } else {
            rng.random_range(cfg.scale_lo..cfg.scale_hi)
        };
        for i in 0..n {
            for c in 0..3 {
                let idx = (cloud * n + i) * f + c;
                let mut v = data[idx].to_f64();
                if let Some(noise) = &noise {
                    let j = noise.sample(rng).clamp(-cfg.jitter_clip, cfg.jitter_clip);
                    v += j;
                }
                data[idx] = S::from_f64(v * scale);
            }
        }
    }
    Ok(())
}

/// Evaluation-time robustness probe: keeps `keep_n` uniformly chosen points
/// of every cloud (indices sorted ascending, so surviving points keep their
/// relative order), dropping the rest along with their labels.
pub fn random_point_dropout<S: Elem>(
    batch: &PointBatch<S>,
    keep_n: usize,
    rng: &mut impl Rng,
) -> Result<PointBatch<S>> {
    let shape = batch.features.shape().to_vec();
    let (b, n, f) = (shape[0], shape[1], shape[2]);
    if keep_n < 2 {
        return Err(Error::Data(format!("keeping {keep_n} point(s) leaves no structure")));
    }
    if keep_n > n {
        return Err(Error::Data(format!("cannot keep {keep_n} of {n} points")));
    }
    let mut features = Vec::with_capacity(b * keep_n * f);
    let mut point_labels = batch.point_labels.is_some().then(Vec::new);
    for cloud in 0..b {
        // Partial Fisher-Yates: the first keep_n slots are a uniform sample
        // without replacement.
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..keep_n {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        let mut kept = idx[..keep_n].to_vec();
        kept.sort_unstable();
        for &p in &kept {
            let at = (cloud * n + p) * f;
            features.extend_from_slice(&batch.features.data()[at..at + f]);
        }
        if let (Some(out), Some(labels)) = (&mut point_labels, &batch.point_labels) {
            out.extend(kept.iter().map(|&p| labels[cloud * n + p]));
        }
    }
    Ok(PointBatch {
        features: Tensor::new(vec![b, keep_n, f], features)?,
        class_ids: batch.class_ids.clone(),
        point_labels,
    })
}
