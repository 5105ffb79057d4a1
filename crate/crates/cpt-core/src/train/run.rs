//! The training loop, evaluation, run reports, and the ablation harness.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::data::{collate, Cloud, PointBatch};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::model::{
    collect_grads, forward, ForwardOptions, GraphMode, ModelConfig, ModelParams, Task,
};
use crate::rng::{stream, stream_indexed};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::train::metrics::{metrics, Metrics};
use crate::train::optim::SgdMomentum;
use crate::train::{augment, random_point_dropout, TrainConfig};

// ── Loss ────────────────────────────────────────────────────────────────────

/// Mean cross-entropy between logits and integer targets. Accepts
/// `[rows, classes]` or `[b, n, classes]` (flattened to per-point rows).
pub fn cross_entropy<S: Elem>(logits: &Var<S>, targets: &[usize]) -> Result<Var<S>> {
    let shape = logits.shape();
    let (rows, classes) = match shape.len() {
        2 => (shape[0], shape[1]),
        3 => (shape[0] * shape[1], shape[2]),
        _ => {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be [rows, classes] or [b, n, classes], got {shape:?}"),
            ))
        }
    };
    if targets.len() != rows {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} targets for {rows} logit rows", targets.len()),
        ));
    }
    logits.reshape(&[rows, classes])?.log_softmax(1)?.nll_mean(targets)
}

/// Row-wise argmax; ties resolve to the lowest index.
fn argmax_rows<S: Elem>(logits: &Tensor<S>, classes: usize) -> Vec<usize> {
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn batch_targets<S: Elem>(task: &Task, batch: &PointBatch<S>) -> Result<Vec<usize>> {
    match task {
        Task::Classify { .. } => batch
            .class_ids
            .clone()
            .ok_or_else(|| Error::Data("classification needs per-cloud class labels".into())),
        Task::Segment { .. } => batch
            .point_labels
            .clone()
            .ok_or_else(|| Error::Data("segmentation needs per-point part labels".into())),
    }
}

// ── Reports ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy of the training passes themselves (dropout included).
    pub train_acc: f64,
    pub eval: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: &'static str,
    pub variant: String,
    pub seed: u64,
    pub eval_overall: f64,
}

/// Everything a run writes down. The TSV form is byte-deterministic for a
/// fixed seed and config; the table form is for humans.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub ablations: Vec<AblationRow>,
}

impl RunReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str("#epochs\n");
        out.push_str("epoch\tlr\ttrain_loss\ttrain_acc\teval_overall\teval_mean_class\teval_mean_iou\n");
        for r in &self.epochs {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.eval.overall, r.eval.mean_class,
                r.eval.mean_iou
            )
            .expect("string write");
        }
        if !self.ablations.is_empty() {
            out.push_str("#ablations\n");
            out.push_str("axis\tvariant\tseed\teval_overall\n");
            for r in &self.ablations {
                writeln!(out, "{}\t{}\t{}\t{}", r.axis, r.variant, r.seed, r.eval_overall)
                    .expect("string write");
            }
        }
        out
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("epoch       lr   t_loss    t_acc  overall  cls_avg     miou\n");
        for r in &self.epochs {
            writeln!(
                out,
                "{:>5} {:>8.5} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.eval.overall, r.eval.mean_class,
                r.eval.mean_iou
            )
            .expect("string write");
        }
        if !self.ablations.is_empty() {
            out.push_str("\naxis         variant       seed  overall\n");
            for r in &self.ablations {
                writeln!(out, "{:<12} {:<12} {:>5} {:>8.4}", r.axis, r.variant, r.seed, r.eval_overall)
                    .expect("string write");
            }
        }
        out
    }
}

// ── Evaluation ──────────────────────────────────────────────────────────────

/// Runs the model over `clouds` in eval mode and pools one confusion matrix.
/// `keep_n` subsamples every cloud to that many points first (seeded by
/// `seed` and `keep_n`, so a given budget is reproducible).
pub fn evaluate<S: Elem>(
    mcfg: &ModelConfig,
    params: &ModelParams<S>,
    clouds: &[Cloud<S>],
    batch_size: usize,
    keep_n: Option<usize>,
    seed: u64,
) -> Result<Metrics> {
    if clouds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let mut drop_rng = keep_n.map(|k| stream_indexed(seed, "pointdrop", k as u64));
    let mut eval_rng = stream(seed, "eval"); // forward in eval mode never draws
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let indices: Vec<usize> = (0..clouds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let refs: Vec<&Cloud<S>> = chunk.iter().map(|&i| &clouds[i]).collect();
        let mut batch = collate(&refs)?;
        if let (Some(k), Some(rng)) = (keep_n, drop_rng.as_mut()) {
            batch = random_point_dropout(&batch, k, rng)?;
        }
        targets.extend(batch_targets(&mcfg.task, &batch)?);
        let out = forward(mcfg, params, &batch, ForwardOptions::eval(), &mut eval_rng)?;
        preds.extend(argmax_rows(&out.logits.value(), mcfg.task.outputs()));
    }
    metrics(&preds, &targets, mcfg.task.outputs())
}

// ── Training ────────────────────────────────────────────────────────────────

pub struct TrainOutcome<S: Elem> {
    pub report: RunReport,
    /// Parameters from the epoch with the best eval overall accuracy.
    pub params: ModelParams<S>,
    pub best_eval: Metrics,
    pub stopped_early: bool,
}

impl<S: Elem> std::fmt::Debug for TrainOutcome<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainOutcome")
            .field("best_eval", &self.best_eval)
            .field("stopped_early", &self.stopped_early)
            .finish_non_exhaustive()
    }
}

/// Any non-finite value surfacing during a step means the run diverged;
/// report it as such with its position.
fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, step },
        other => other,
    }
}

/// Full training loop: init from the seed's `init` stream, shuffle each
/// epoch, augment, forward, cross-entropy, backward, momentum step, then an
/// eval pass. Bit-deterministic for a fixed seed, config, and data.
pub fn train_model<S: Elem>(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    train_clouds: &[Cloud<S>],
    test_clouds: &[Cloud<S>],
) -> Result<TrainOutcome<S>> {
    mcfg.validate()?;
    tcfg.validate()?;
    if train_clouds.is_empty() || test_clouds.is_empty() {
        return Err(Error::Data("training needs non-empty train and test sets".into()));
    }
    let mut init_rng = stream(tcfg.seed, "init");
    let mut params = ModelParams::<S>::init(mcfg, &mut init_rng)?;
    let mut opt = SgdMomentum::new(tcfg.momentum);
    let mut report = RunReport::default();
    let mut best: Option<(Metrics, ModelParams<S>)> = None;
    let mut stopped_early = false;

    for epoch in 0..tcfg.epochs {
        // Warmup ramp, then a cosine landing on lr_min at the last epoch.
        let lr = tcfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_clouds.len()).collect();
        order.shuffle(&mut stream_indexed(tcfg.seed, "shuffle", epoch as u64));
        let mut aug_rng = stream_indexed(tcfg.seed, "augment", epoch as u64);
        let mut drop_rng = stream_indexed(tcfg.seed, "dropout", epoch as u64);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut rows_total = 0usize;
        for (step, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let refs: Vec<&Cloud<S>> = chunk.iter().map(|&i| &train_clouds[i]).collect();
            let mut batch = collate(&refs)?;
            augment(&mut batch.features, tcfg, &mut aug_rng)?;
            let targets = batch_targets(&mcfg.task, &batch)?;
            let out = forward(mcfg, &params, &batch, ForwardOptions::train(), &mut drop_rng)
                .map_err(|e| diverged(e, epoch, step))?;
            let loss = cross_entropy(&out.logits, &targets).map_err(|e| diverged(e, epoch, step))?;
            let loss_value = loss.value().data()[0].to_f64();
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            loss.backward().map_err(|e| diverged(e, epoch, step))?;
            let grads = collect_grads(&out.vars);
            opt.step(&mut params, &grads, lr)?;

            let rows = targets.len();
            loss_sum += loss_value * rows as f64;
            correct += argmax_rows(&out.logits.value(), mcfg.task.outputs())
                .iter()
                .zip(&targets)
                .filter(|(p, t)| p == t)
                .count();
            rows_total += rows;
        }

        let train_acc = correct as f64 / rows_total as f64;
        let steps = order.len().div_ceil(tcfg.batch_size);
        let eval = evaluate(mcfg, &params, test_clouds, tcfg.batch_size, None, tcfg.seed)
            .map_err(|e| diverged(e, epoch, steps))?;
        if best.as_ref().is_none_or(|(m, _)| eval.overall > m.overall) {
            best = Some((eval, params.clone()));
        }
        report.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / rows_total as f64,
            train_acc,
            eval,
        });
        if tcfg.early_stop_train_acc.is_some_and(|th| train_acc >= th) {
            stopped_early = true;
            break;
        }
    }

    let (best_eval, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { report, params: best_params, best_eval, stopped_early })
}

// ── Ablations ───────────────────────────────────────────────────────────────

/// Which factors to vary. Every variant trains on identical data with
/// identical seeds, so rows are comparable and the whole sweep is
/// deterministic.
#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub graph_modes: Vec<GraphMode>,
    pub k_sweep: Vec<usize>,
    /// Adds a graph-free baseline against the dynamic-graph run.
    pub locality_baseline: bool,
    /// Evaluation point budgets probed on the trained dynamic-graph model.
    pub eval_keep: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            graph_modes: vec![GraphMode::Dynamic, GraphMode::Static],
            k_sweep: vec![10, 20, 30, 40],
            locality_baseline: true,
            eval_keep: vec![],
            seeds: vec![0, 1, 2],
        }
    }
}

/// Trains every variant and returns one row per (axis, variant, seed).
/// The dynamic-graph run doubles as the "locality on" row and hosts the
/// eval-budget probes, so those axes add no extra training.
pub fn run_ablations<S: Elem>(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    train_clouds: &[Cloud<S>],
    test_clouds: &[Cloud<S>],
    spec: &AblationSpec,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let tcfg = TrainConfig { seed, ..base_train.clone() };
        let train_variant = |mcfg: &ModelConfig| -> Result<TrainOutcome<S>> {
            train_model(mcfg, &tcfg, train_clouds, test_clouds)
        };

        let mut dynamic_outcome: Option<TrainOutcome<S>> = None;
        for &mode in &spec.graph_modes {
            let mut mcfg = base_model.clone();
            mcfg.graph_mode = mode;
            let outcome = train_variant(&mcfg)?;
            rows.push(AblationRow {
                axis: "graph",
                variant: mode.name().to_string(),
                seed,
                eval_overall: outcome.best_eval.overall,
            });
            if mode == GraphMode::Dynamic {
                dynamic_outcome = Some(outcome);
            }
        }

        if spec.locality_baseline {
            let with = match &dynamic_outcome {
                Some(o) => o.best_eval.overall,
                None => {
                    let mut mcfg = base_model.clone();
                    mcfg.graph_mode = GraphMode::Dynamic;
                    let o = train_variant(&mcfg)?;
                    let acc = o.best_eval.overall;
                    dynamic_outcome = Some(o);
                    acc
                }
            };
            rows.push(AblationRow { axis: "locality", variant: "with".into(), seed, eval_overall: with });
            let mut mcfg = base_model.clone();
            mcfg.graph_mode = GraphMode::None;
            let outcome = train_variant(&mcfg)?;
            rows.push(AblationRow {
                axis: "locality",
                variant: "without".into(),
                seed,
                eval_overall: outcome.best_eval.overall,
            });
        }

        if let Some(outcome) = &dynamic_outcome {
            let mut mcfg = base_model.clone();
            mcfg.graph_mode = GraphMode::Dynamic;
            for &keep in &spec.eval_keep {
                let m = evaluate(&mcfg, &outcome.params, test_clouds, tcfg.batch_size, Some(keep), seed)?;
                rows.push(AblationRow {
                    axis: "eval_points",
                    variant: format!("keep={keep}"),
                    seed,
                    eval_overall: m.overall,
                });
            }
        }

        for &k in &spec.k_sweep {
            let mut mcfg = base_model.clone();
            mcfg.graph_mode = GraphMode::Dynamic;
            mcfg.k = k;
            mcfg.embed_kernel = None; // window tracks the new neighbourhood size
            let outcome = train_variant(&mcfg)?;
            rows.push(AblationRow {
                axis: "k",
                variant: k.to_string(),
                seed,
                eval_overall: outcome.best_eval.overall,
            });
        }
    }
    Ok(rows)
}

// ── Tests ───────────────────────────────────────────────────────────────────
