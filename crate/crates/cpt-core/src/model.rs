//! Whole-model assembly: a stack of convolutional point transformer layers,
//! a shared per-point MLP, global max pooling, and a task head.
//!
//! Classification: every layer's output is concatenated along channels,
//! lifted per point by a shared MLP, max-pooled over points into one global
//! vector, and classified by an MLP head. Segmentation keeps the per-point
//! features, re-broadcasts the global vector onto every point, and applies
//! the head per point instead.
//!
//! Parameters live in [`CptModelParams`], generic over the leaf payload so
//! the same tree describes stored tensors and one forward pass's tape
//! variables. `visit`/`visit_mut` enumerate leaves under stable dotted names;
//! those names key optimizer state, gradient maps, and checkpoint entries.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::config;
use crate::data::PointBatch;
use crate::elem::{Dtype, Elem};
use crate::error::{CheckpointError, Error, Result};
use crate::graph::{knn_graph, EdgeMode, KnnGraph};
use crate::layers::{
    cpt_layer_forward, linear, CptLayerParams, ForwardTrace, GraphSource, LayerConfig, NormParams,
    LAYER_NORM_EPS,
};
use crate::tape::{concat, Tape, Var};
use crate::tensor::Tensor;

// ── Configuration ───────────────────────────────────────────────────────────

/// What the model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// One label per cloud.
    Classify { classes: usize },
    /// One label per point.
    Segment { parts: usize },
}

impl Task {
    /// Width of the final logit axis.
    pub fn outputs(&self) -> usize {
        match *self {
            Task::Classify { classes } => classes,
            Task::Segment { parts } => parts,
        }
    }

    fn to_value(self) -> String {
        match self {
            Task::Classify { classes } => format!("classify:{classes}"),
            Task::Segment { parts } => format!("segment:{parts}"),
        }
    }

    fn from_value(v: &str) -> Result<Self> {
        let parse = |n: &str, what: &str| -> Result<usize> {
            n.parse()
                .map_err(|_| Error::Config(format!("bad {what} count in task {v:?}")))
        };
        match v.split_once(':') {
            Some(("classify", n)) => Ok(Task::Classify { classes: parse(n, "class")? }),
            Some(("segment", n)) => Ok(Task::Segment { parts: parse(n, "part")? }),
            _ => Err(Error::Config(format!(
                "task must be `classify:<classes>` or `segment:<parts>`, got {v:?}"
            ))),
        }
    }
}

/// How layers obtain their neighbourhood graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphMode {
    /// Each layer rebuilds the graph from its own input features.
    Dynamic,
    /// One graph is built from the raw input and shared by all layers.
    Static,
    /// No graphs: layers embed each point from its own features alone.
    None,
}

impl GraphMode {
    pub fn name(&self) -> &'static str {
        match self {
            GraphMode::Dynamic => "dynamic",
            GraphMode::Static => "static",
            GraphMode::None => "none",
        }
    }

    pub fn from_name(v: &str) -> Result<Self> {
        match v {
            "dynamic" => Ok(GraphMode::Dynamic),
            "static" => Ok(GraphMode::Static),
            "none" => Ok(GraphMode::None),
            _ => Err(Error::Config(format!(
                "graph mode must be dynamic, static, or none, got {v:?}"
            ))),
        }
    }
}

/// Full architectural description. Everything a checkpoint needs to rebuild
/// the parameter tree is here, and [`ModelConfig::to_kv`] round-trips it
/// through text exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input feature width; the first three channels are XYZ.
    pub in_features: usize,
    pub task: Task,
    /// Neighbours per point.
    pub k: usize,
    /// Output channels of each layer.
    pub layer_dims: Vec<usize>,
    /// Per layer: run the second (inter-point) attention stage?
    pub interpoint: Vec<bool>,
    pub graph_mode: GraphMode,
    pub edge_mode: EdgeMode,
    /// Width of the shared per-point MLP feeding the global pool.
    pub shared_dim: usize,
    /// Hidden widths of the task head.
    pub head_dims: Vec<usize>,
    /// Dropout rate inside the head, applied only in training mode.
    pub dropout: f64,
    pub heads: usize,
    /// Depthwise kernel of the q/k/v projections.
    pub proj_kernel: usize,
    pub proj_stride: usize,
    /// Neighbourhood conv window; `None` means the full neighbour list `k`.
    pub embed_kernel: Option<usize>,
    pub embed_stride: usize,
    /// When `k >= n`, silently use `n - 1` instead of failing.
    pub knn_clamp: bool,
}

impl ModelConfig {
    /// Desk-scale classification defaults.
    pub fn classify(classes: usize) -> Self {
        let layer_dims = vec![64, 64, 128];
        let task = Task::Classify { classes };
        ModelConfig {
            in_features: 3,
            interpoint: Self::default_interpoint(&task, layer_dims.len()),
            task,
            k: 20,
            layer_dims,
            graph_mode: GraphMode::Dynamic,
            edge_mode: EdgeMode::Concat,
            shared_dim: 1024,
            head_dims: vec![512, 256],
            dropout: 0.5,
            heads: 1,
            proj_kernel: 1,
            proj_stride: 1,
            embed_kernel: None,
            embed_stride: 1,
            knn_clamp: false,
        }
    }

    /// Desk-scale part-segmentation defaults.
    pub fn segment(parts: usize) -> Self {
        let task = Task::Segment { parts };
        ModelConfig {
            task,
            interpoint: Self::default_interpoint(&task, 3),
            head_dims: vec![256, 128],
            dropout: 0.4,
            ..Self::classify(2)
        }
    }

    /// Classification turns the second attention stage on everywhere except
    /// the last layer; segmentation leaves it off entirely.
    pub fn default_interpoint(task: &Task, layers: usize) -> Vec<bool> {
        match task {
            Task::Classify { .. } => (0..layers).map(|i| i + 1 < layers).collect(),
            Task::Segment { .. } => vec![false; layers],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.in_features < 3 {
            return fail(format!("input needs at least XYZ (3 features), got {}", self.in_features));
        }
        if self.task.outputs() < 2 {
            return fail(format!("need at least 2 output labels, got {}", self.task.outputs()));
        }
        if self.layer_dims.is_empty() {
            return fail("at least one layer is required".into());
        }
        if let Some(&d) = self.layer_dims.iter().find(|&&d| d == 0) {
            return fail(format!("layer dims must be positive, got {d}"));
        }
        if self.interpoint.len() != self.layer_dims.len() {
            return fail(format!(
                "{} interpoint flags for {} layers; set model.interpoint to match model.layer_dims",
                self.interpoint.len(),
                self.layer_dims.len()
            ));
        }
        if self.interpoint.last() == Some(&true) {
            return fail("the last layer must not use the second attention stage".into());
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.heads == 0 {
            return fail("heads must be at least 1".into());
        }
        if let Some(&d) = self.layer_dims.iter().find(|&&d| d % self.heads != 0) {
            return fail(format!("layer dim {d} does not split over {} heads", self.heads));
        }
        if self.proj_kernel % 2 == 0 {
            return fail(format!("projection kernel must be odd, got {}", self.proj_kernel));
        }
        if self.proj_stride != 1 {
            return fail(format!(
                "projection stride must be 1 so residual connections keep the point count, got {}",
                self.proj_stride
            ));
        }
        match self.embed_kernel {
            Some(0) => return fail("embed kernel must be at least 1".into()),
            Some(v) if v > self.k => {
                return fail(format!("embed kernel {v} exceeds neighbourhood size k = {}", self.k))
            }
            _ => {}
        }
        if self.embed_stride == 0 {
            return fail("embed stride must be at least 1".into());
        }
        if self.shared_dim == 0 {
            return fail("shared MLP dim must be positive".into());
        }
        if self.head_dims.contains(&0) {
            return fail("head dims must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Per-layer shape descriptions; layer `l` consumes layer `l-1`'s output.
    pub fn layer_configs(&self) -> Vec<LayerConfig> {
        let mut in_channels = self.in_features;
        self.layer_dims
            .iter()
            .zip(&self.interpoint)
            .map(|(&dim, &interpoint)| {
                let lc = LayerConfig {
                    in_channels,
                    dim,
                    k: self.k,
                    edge_mode: self.edge_mode,
                    heads: self.heads,
                    proj_kernel: self.proj_kernel,
                    proj_stride: self.proj_stride,
                    embed_kernel: self.embed_kernel.unwrap_or(self.k),
                    embed_stride: self.embed_stride,
                    interpoint,
                };
                in_channels = dim;
                lc
            })
            .collect()
    }

    /// Channel count of the concatenated layer outputs.
    pub fn concat_dim(&self) -> usize {
        self.layer_dims.iter().sum()
    }

    /// Input width of the task head's first linear.
    pub fn head_input_dim(&self) -> usize {
        match self.task {
            Task::Classify { .. } => self.shared_dim,
            Task::Segment { .. } => self.concat_dim() + self.shared_dim,
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let flags =
            |v: &[bool]| v.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",");
        let kv = [
            ("task", self.task.to_value()),
            ("in_features", self.in_features.to_string()),
            ("k", self.k.to_string()),
            ("layer_dims", list(&self.layer_dims)),
            ("interpoint", flags(&self.interpoint)),
            ("graph_mode", self.graph_mode.name().to_string()),
            ("edge_mode", edge_mode_name(self.edge_mode).to_string()),
            ("shared_dim", self.shared_dim.to_string()),
            ("head_dims", list(&self.head_dims)),
            ("dropout", self.dropout.to_string()),
            ("heads", self.heads.to_string()),
            ("proj_kernel", self.proj_kernel.to_string()),
            ("proj_stride", self.proj_stride.to_string()),
            (
                "embed_kernel",
                self.embed_kernel.map_or("full".to_string(), |v| v.to_string()),
            ),
            ("embed_stride", self.embed_stride.to_string()),
            ("knn_clamp", self.knn_clamp.to_string()),
        ];
        kv.into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect()
    }

    /// Applies one `model.*` assignment. Returns `Ok(false)` when the key
    /// belongs to some other namespace; unknown `model.*` keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("model.") else {
            return Ok(false);
        };
        match field {
            "task" => self.task = Task::from_value(value)?,
            "in_features" => self.in_features = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "layer_dims" => self.layer_dims = parse_list(key, value)?,
            "interpoint" => self.interpoint = parse_flags(key, value)?,
            "graph_mode" => self.graph_mode = GraphMode::from_name(value)?,
            "edge_mode" => self.edge_mode = edge_mode_from_name(value)?,
            "shared_dim" => self.shared_dim = parse_num(key, value)?,
            "head_dims" => self.head_dims = parse_list(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "proj_kernel" => self.proj_kernel = parse_num(key, value)?,
            "proj_stride" => self.proj_stride = parse_num(key, value)?,
            "embed_kernel" => {
                self.embed_kernel =
                    if value == "full" { None } else { Some(parse_num(key, value)?) }
            }
            "embed_stride" => self.embed_stride = parse_num(key, value)?,
            "knn_clamp" => self.knn_clamp = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model config key `{key}`"))),
        }
        Ok(true)
    }

    /// Rebuilds a config from `to_kv` output (for example the block embedded
    /// in a checkpoint). The pairs must include `model.task`.
    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        if !pairs.iter().any(|(k, _)| k == "model.task") {
            return Err(Error::Config("config block is missing model.task".into()));
        }
        let mut cfg = ModelConfig::classify(2);
        for (k, v) in pairs {
            if !cfg.apply(k, v)? {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn edge_mode_name(m: EdgeMode) -> &'static str {
    match m {
        EdgeMode::Delta => "delta",
        EdgeMode::Concat => "concat",
    }
}

fn edge_mode_from_name(v: &str) -> Result<EdgeMode> {
    match v {
        "delta" => Ok(EdgeMode::Delta),
        "concat" => Ok(EdgeMode::Concat),
        _ => Err(Error::Config(format!("edge mode must be delta or concat, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn parse_flags(key: &str, value: &str) -> Result<Vec<bool>> {
    value.split(',').map(|p| parse_num(key, p.trim())).collect()
}

// ── Parameters ──────────────────────────────────────────────────────────────

/// Linear + layer norm, the unit both the shared MLP and head blocks repeat.
#[derive(Debug, Clone)]
pub struct MlpBlockParams<T> {
    pub weight: T,
    pub bias: T,
    pub norm: NormParams<T>,
}

impl<T> MlpBlockParams<T> {
    pub fn map_ref<U>(&self, f: &mut impl FnMut(&T) -> U) -> MlpBlockParams<U> {
        MlpBlockParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
            norm: self.norm.map_ref(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
        self.norm.visit(&format!("{prefix}.norm"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
    }
}

/// Every parameter of one model, generic over the leaf payload.
#[derive(Debug, Clone)]
pub struct CptModelParams<T> {
    pub layers: Vec<CptLayerParams<T>>,
    pub shared: MlpBlockParams<T>,
    pub head: Vec<MlpBlockParams<T>>,
    pub out_weight: T,
    pub out_bias: T,
}

/// Stored parameters (as opposed to one pass's tape variables).
pub type ModelParams<S> = CptModelParams<Tensor<S>>;

impl<T> CptModelParams<T> {
    pub fn map_ref<U>(&self, f: &mut impl FnMut(&T) -> U) -> CptModelParams<U> {
        CptModelParams {
            layers: self.layers.iter().map(|l| l.map_ref(f)).collect(),
            shared: self.shared.map_ref(f),
            head: self.head.iter().map(|b| b.map_ref(f)).collect(),
            out_weight: f(&self.out_weight),
            out_bias: f(&self.out_bias),
        }
    }

    /// Enumerates leaves in a stable order under stable dotted names.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layers.{i}"), f);
        }
        self.shared.visit("shared", f);
        for (j, block) in self.head.iter().enumerate() {
            block.visit(&format!("head.{j}"), f);
        }
        f("head.out.weight".into(), &self.out_weight);
        f("head.out.bias".into(), &self.out_bias);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("layers.{i}"), f);
        }
        self.shared.visit_mut("shared", f);
        for (j, block) in self.head.iter_mut().enumerate() {
            block.visit_mut(&format!("head.{j}"), f);
        }
        f("head.out.weight".into(), &mut self.out_weight);
        f("head.out.bias".into(), &mut self.out_bias);
    }
}

/// How a parameter tensor should be initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    /// Conv weight `[out, ...]`: fan-in is everything past the first axis.
    ConvWeight,
    /// Matmul weight `[in, out]`: fan-in is the first axis.
    LinearWeight,
    /// Starts at zero.
    Bias,
    /// Layer norm gain, starts at one.
    Gain,
}

impl<S: Elem> ModelParams<S> {
    /// Fresh parameters: weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// drawn in a fixed traversal order, biases zero, norm gains one. Draws
    /// happen in `f64`, so f32 and f64 models see the same stream.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(cfg, &mut |kind, shape| {
            let t = match kind {
                ParamKind::Bias => Tensor::zeros(shape),
                ParamKind::Gain => Tensor::full(shape, S::one()),
                ParamKind::ConvWeight | ParamKind::LinearWeight => {
                    let fan_in: usize = match kind {
                        ParamKind::ConvWeight => shape[1..].iter().product(),
                        _ => shape[0],
                    };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| S::from_f64(rng.random_range(-bound..bound)))
                }
            };
            Ok(t)
        })
    }

    /// All-zero parameters with the right tree shape; used as the template
    /// when loading checkpoints and counting parameters.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg, &mut |_, shape| Ok(Tensor::zeros(shape)))
    }

    fn build(
        cfg: &ModelConfig,
        f: &mut impl FnMut(ParamKind, &[usize]) -> Result<Tensor<S>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let norm = |f: &mut dyn FnMut(ParamKind, &[usize]) -> Result<Tensor<S>>,
                    d: usize|
         -> Result<NormParams<Tensor<S>>> {
            Ok(NormParams { gamma: f(ParamKind::Gain, &[d])?, beta: f(ParamKind::Bias, &[d])? })
        };
        let projection = |f: &mut dyn FnMut(ParamKind, &[usize]) -> Result<Tensor<S>>,
                          e: usize,
                          p: usize|
         -> Result<crate::layers::ProjectionParams<Tensor<S>>> {
            Ok(crate::layers::ProjectionParams {
                depthwise: f(ParamKind::ConvWeight, &[e, 1, p])?,
                pointwise: f(ParamKind::ConvWeight, &[e, e, 1])?,
            })
        };
        let attention = |f: &mut dyn FnMut(ParamKind, &[usize]) -> Result<Tensor<S>>,
                         e: usize,
                         p: usize|
         -> Result<crate::layers::AttentionParams<Tensor<S>>> {
            Ok(crate::layers::AttentionParams {
                query: projection(f, e, p)?,
                key: projection(f, e, p)?,
                value: projection(f, e, p)?,
                mix_weight: f(ParamKind::LinearWeight, &[e, e])?,
                mix_bias: f(ParamKind::Bias, &[e])?,
            })
        };
        let feed_forward = |f: &mut dyn FnMut(ParamKind, &[usize]) -> Result<Tensor<S>>,
                            e: usize|
         -> Result<crate::layers::FeedForwardParams<Tensor<S>>> {
            Ok(crate::layers::FeedForwardParams {
                w1: f(ParamKind::LinearWeight, &[e, 2 * e])?,
                b1: f(ParamKind::Bias, &[2 * e])?,
                w2: f(ParamKind::LinearWeight, &[2 * e, e])?,
                b2: f(ParamKind::Bias, &[e])?,
            })
        };
        let mlp_block = |f: &mut dyn FnMut(ParamKind, &[usize]) -> Result<Tensor<S>>,
                         d_in: usize,
                         d_out: usize|
         -> Result<MlpBlockParams<Tensor<S>>> {
            Ok(MlpBlockParams {
                weight: f(ParamKind::LinearWeight, &[d_in, d_out])?,
                bias: f(ParamKind::Bias, &[d_out])?,
                norm: norm(f, d_out)?,
            })
        };

        let mut layers = Vec::with_capacity(cfg.layer_dims.len());
        for lc in cfg.layer_configs() {
            let e = lc.dim;
            let embed_weight_shape = match cfg.graph_mode {
                GraphMode::None => vec![e, lc.in_channels, 1, 1],
                _ => vec![e, lc.edge_mode.edge_channels(lc.in_channels), 1, lc.embed_kernel],
            };
            let embed = crate::layers::PointEmbeddingParams {
                weight: f(ParamKind::ConvWeight, &embed_weight_shape)?,
                bias: f(ParamKind::Bias, &[e])?,
            };
            let interpoint = if lc.interpoint {
                Some(crate::layers::InterPointParams {
                    attn: attention(f, e, lc.proj_kernel)?,
                    norm3: norm(f, e)?,
                    ff: feed_forward(f, e)?,
                    norm4: norm(f, e)?,
                })
            } else {
                None
            };
            layers.push(CptLayerParams {
                embed,
                attn: attention(f, e, lc.proj_kernel)?,
                norm1: norm(f, e)?,
                ff: feed_forward(f, e)?,
                norm2: norm(f, e)?,
                interpoint,
            });
        }

        let shared = mlp_block(f, cfg.concat_dim(), cfg.shared_dim)?;
        let mut head = Vec::with_capacity(cfg.head_dims.len());
        let mut width = cfg.head_input_dim();
        for &d in &cfg.head_dims {
            head.push(mlp_block(f, width, d)?);
            width = d;
        }
        Ok(CptModelParams {
            layers,
            shared,
            head,
            out_weight: f(ParamKind::LinearWeight, &[width, cfg.task.outputs()])?,
            out_bias: f(ParamKind::Bias, &[cfg.task.outputs()])?,
        })
    }

    /// Total scalar count across all parameter tensors.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.numel());
        total
    }

    /// Registers every tensor on `tape`. With `requires_grad`, `backward`
    /// will leave a gradient on each leaf.
    pub fn to_vars(&self, tape: &Tape<S>, requires_grad: bool) -> CptModelParams<Var<S>> {
        self.map_ref(&mut |t| tape.leaf(t.clone(), requires_grad))
    }
}

/// Gradients left on parameter leaves after `backward`, keyed by visit name.
pub fn collect_grads<S: Elem>(vars: &CptModelParams<Var<S>>) -> BTreeMap<String, Tensor<S>> {
    let mut grads = BTreeMap::new();
    vars.visit(&mut |name, v| {
        if let Some(g) = v.grad() {
            grads.insert(name, g);
        }
    });
    grads
}

// ── Forward ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Enables dropout.
    pub train: bool,
    /// Makes parameter leaves grad-tracking.
    pub requires_grad: bool,
    /// Records every attention weight tensor in the trace.
    pub collect_attention: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions { train: false, requires_grad: false, collect_attention: false }
    }

    pub fn train() -> Self {
        ForwardOptions { train: true, requires_grad: true, collect_attention: false }
    }

    /// Eval-mode math with gradients, for gradient checks.
    pub fn grad() -> Self {
        ForwardOptions { requires_grad: true, ..Self::eval() }
    }
}

/// Everything one forward pass produces. Keeping the tape alive keeps
/// `logits.backward()` possible; `vars` is where gradients land.
pub struct ForwardOutput<S: Elem> {
    /// `[b, classes]` for classification, `[b, n, parts]` for segmentation.
    pub logits: Var<S>,
    pub vars: CptModelParams<Var<S>>,
    pub trace: ForwardTrace<S>,
    pub tape: Tape<S>,
}

impl<S: Elem> std::fmt::Debug for ForwardOutput<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardOutput").field("logits", &self.logits.shape()).finish_non_exhaustive()
    }
}

/// Runs the model on one batch.
pub fn forward<S: Elem>(
    cfg: &ModelConfig,
    params: &ModelParams<S>,
    batch: &PointBatch<S>,
    opts: ForwardOptions,
    rng: &mut impl Rng,
) -> Result<ForwardOutput<S>> {
    cfg.validate()?;
    let fshape = batch.features.shape().to_vec();
    if fshape.len() != 3 || fshape[2] != cfg.in_features {
        return Err(Error::shape(
            "forward",
            format!("batch features must be [b, n, {}], got {fshape:?}", cfg.in_features),
        ));
    }
    let (b, n) = (fshape[0], fshape[1]);
    let mut layer_cfgs = cfg.layer_configs();
    if cfg.graph_mode != GraphMode::None {
        let k_eff = if cfg.k >= n && cfg.knn_clamp { n.saturating_sub(1).max(1) } else { cfg.k };
        for lc in &mut layer_cfgs {
            lc.k = k_eff;
            lc.embed_kernel = lc.embed_kernel.min(k_eff);
        }
    }

    let tape = Tape::new();
    let vars = params.to_vars(&tape, opts.requires_grad);
    let mut trace =
        if opts.collect_attention { ForwardTrace::collecting() } else { ForwardTrace::new() };

    // [b, n, f] -> [b, f, n]: layers run channels-first.
    let x0 = tape.constant(batch.features.clone()).permute(&[0, 2, 1])?;
    let static_graph: Option<KnnGraph> = match cfg.graph_mode {
        GraphMode::Static => {
            let g = knn_graph(&x0.value(), layer_cfgs[0].k, None)?;
            trace.graph_builds += 1;
            Some(g)
        }
        _ => None,
    };

    let mut outs: Vec<Var<S>> = Vec::with_capacity(layer_cfgs.len());
    let mut cur = x0;
    for (lc, lp) in layer_cfgs.iter().zip(&vars.layers) {
        let source = match (&cfg.graph_mode, &static_graph) {
            (GraphMode::Dynamic, _) => GraphSource::Dynamic,
            (GraphMode::Static, Some(g)) => GraphSource::Static(g),
            _ => GraphSource::None,
        };
        cur = cpt_layer_forward(&cur, lp, lc, source, &mut trace)?;
        outs.push(cur.clone());
    }

    // Concatenate along channels, then go points-major for the MLP stack.
    let cat = concat(&outs, 1)?.permute(&[0, 2, 1])?; // [b, n, sum(e)]
    let shared = linear(&cat, &vars.shared.weight, &vars.shared.bias)?
        .layer_norm(&vars.shared.norm.gamma, &vars.shared.norm.beta, LAYER_NORM_EPS)?
        .relu()?;
    let global = shared.max_reduce(1)?; // [b, m]

    let mut h = match cfg.task {
        Task::Classify { .. } => global,
        Task::Segment { .. } => {
            let m = cfg.shared_dim;
            let broadcast = global.reshape(&[b, 1, m])?.repeat_axis(1, n)?;
            concat(&[cat, broadcast], 2)? // [b, n, sum(e) + m]
        }
    };
    for block in &vars.head {
        h = linear(&h, &block.weight, &block.bias)?
            .layer_norm(&block.norm.gamma, &block.norm.beta, LAYER_NORM_EPS)?
            .relu()?;
        if opts.train && cfg.dropout > 0.0 {
            h = h.dropout(cfg.dropout, rng)?;
        }
    }
    let logits = linear(&h, &vars.out_weight, &vars.out_bias)?;
    Ok(ForwardOutput { logits, vars, trace, tape })
}

/// [`forward`] for a classification config; logits are `[b, classes]`.
pub fn classify_forward<S: Elem>(
    cfg: &ModelConfig,
    params: &ModelParams<S>,
    batch: &PointBatch<S>,
    opts: ForwardOptions,
    rng: &mut impl Rng,
) -> Result<ForwardOutput<S>> {
    if !matches!(cfg.task, Task::Classify { .. }) {
        return Err(Error::Config("classify_forward needs a classification config".into()));
    }
    forward(cfg, params, batch, opts, rng)
}

/// [`forward`] for a segmentation config; logits are `[b, n, parts]`.
pub fn segment_forward<S: Elem>(
    cfg: &ModelConfig,
    params: &ModelParams<S>,
    batch: &PointBatch<S>,
    opts: ForwardOptions,
    rng: &mut impl Rng,
) -> Result<ForwardOutput<S>> {
    if !matches!(cfg.task, Task::Segment { .. }) {
        return Err(Error::Config("segment_forward needs a segmentation config".into()));
    }
    forward(cfg, params, batch, opts, rng)
}

/// Classification without any neighbourhood structure: the graph-free
/// baseline used by locality ablations. Builds zero graphs.
pub fn global_input_forward<S: Elem>(
    cfg: &ModelConfig,
    params: &ModelParams<S>,
    batch: &PointBatch<S>,
    opts: ForwardOptions,
    rng: &mut impl Rng,
) -> Result<ForwardOutput<S>> {
    if cfg.graph_mode != GraphMode::None {
        return Err(Error::Config("global_input_forward needs graph mode `none`".into()));
    }
    forward(cfg, params, batch, opts, rng)
}

// ── Checkpoints ─────────────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary layout (all integers little-endian):
///
/// ```text
/// magic "CPT1" | version u32 | config_len u32 | config utf-8
/// tensor_count u32
/// per tensor: name_len u16 | name | dtype u8 | ndim u8 | dims u32 x ndim
///             | offset u64 | nbytes u64
/// blob_len u64 | blob
/// ```
///
/// The config block is the model's `to_kv` text, so a checkpoint alone is
/// enough to rebuild the architecture it was saved from.
pub fn save_checkpoint<S: Elem>(
    path: &Path,
    cfg: &ModelConfig,
    params: &ModelParams<S>,
) -> Result<()> {
    let config_text = config::format_kv(&cfg.to_kv());
    let mut entries: Vec<(String, &Tensor<S>)> = Vec::new();
    params.visit(&mut |name, t| entries.push((name, t)));

    let mut blob: Vec<u8> = Vec::new();
    let mut table: Vec<u8> = Vec::new();
    for (name, t) in &entries {
        let offset = blob.len() as u64;
        for &v in t.data() {
            v.write_le_bytes(&mut blob);
        }
        table.extend_from_slice(&(name.len() as u16).to_le_bytes());
        table.extend_from_slice(name.as_bytes());
        table.push(S::DTYPE.tag());
        table.push(t.ndim() as u8);
        for &d in t.shape() {
            table.extend_from_slice(&(d as u32).to_le_bytes());
        }
        table.extend_from_slice(&offset.to_le_bytes());
        table.extend_from_slice(&(blob.len() as u64 - offset).to_le_bytes());
    }

    let mut out: Vec<u8> = Vec::with_capacity(blob.len() + table.len() + config_text.len() + 32);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&table);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { section }.into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, section: &'static str) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    fn u16(&mut self, section: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, section: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().expect("8 bytes")))
    }
}

struct RawCheckpoint<'a> {
    config_text: &'a str,
    entries: Vec<(String, Dtype, Vec<usize>, usize, usize)>,
    blob: &'a [u8],
}

fn parse_checkpoint(bytes: &[u8]) -> Result<RawCheckpoint<'_>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION }.into());
    }
    let clen = c.u32("config block")? as usize;
    let config_text = std::str::from_utf8(c.take(clen, "config block")?)
        .map_err(|_| CheckpointError::Header("config block is not utf-8".into()))?;
    let count = c.u32("tensor table")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = c.u16("tensor table")? as usize;
        let name = std::str::from_utf8(c.take(nlen, "tensor table")?)
            .map_err(|_| CheckpointError::Header("tensor name is not utf-8".into()))?
            .to_string();
        let tag = c.u8("tensor table")?;
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| CheckpointError::Header(format!("unknown dtype tag {tag}")))?;
        let ndim = c.u8("tensor table")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32("tensor table")? as usize);
        }
        let offset = c.u64("tensor table")? as usize;
        let nbytes = c.u64("tensor table")? as usize;
        entries.push((name, dtype, dims, offset, nbytes));
    }
    let blob_len = c.u64("tensor data")? as usize;
    let blob = c.take(blob_len, "tensor data")?;
    Ok(RawCheckpoint { config_text, entries, blob })
}

/// Reads just the architecture and storage dtype from a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<(ModelConfig, Dtype)> {
    let bytes = std::fs::read(path)?;
    let raw = parse_checkpoint(&bytes)?;
    let cfg = ModelConfig::from_kv(&config::parse_kv_text(raw.config_text, "checkpoint")?)?;
    let dtype = raw
        .entries
        .first()
        .map(|e| e.1)
        .ok_or_else(|| CheckpointError::Header("checkpoint holds no tensors".into()))?;
    Ok((cfg, dtype))
}

/// Loads parameters and validates them against `cfg`. Tensors are matched by
/// visit name; the first mismatch in visit order is reported.
pub fn load_checkpoint<S: Elem>(path: &Path, cfg: &ModelConfig) -> Result<ModelParams<S>> {
    let bytes = std::fs::read(path)?;
    let raw = parse_checkpoint(&bytes)?;
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, (name, ..)) in raw.entries.iter().enumerate() {
        if index.insert(name.as_str(), i).is_some() {
            return Err(CheckpointError::Header(format!("duplicate tensor `{name}`")).into());
        }
    }

    let mut params = ModelParams::<S>::zeros(cfg)?;
    let mut used = vec![false; raw.entries.len()];
    let mut failure: Option<Error> = None;
    params.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let Some(&i) = index.get(name.as_str()) else {
            failure = Some(CheckpointError::MissingTensor { name }.into());
            return;
        };
        used[i] = true;
        let (_, dtype, dims, offset, nbytes) = &raw.entries[i];
        if dims != t.shape() {
            failure = Some(
                CheckpointError::TensorShape {
                    name,
                    expected: t.shape().to_vec(),
                    found: dims.clone(),
                }
                .into(),
            );
            return;
        }
        if *dtype != S::DTYPE {
            failure = Some(
                CheckpointError::Dtype {
                    name,
                    expected: S::DTYPE.name(),
                    found: dtype.name(),
                }
                .into(),
            );
            return;
        }
        let width = S::DTYPE.byte_width();
        if *nbytes != t.numel() * width || offset + nbytes > raw.blob.len() {
            failure = Some(CheckpointError::Truncated { section: "tensor data" }.into());
            return;
        }
        for (dst, src) in
            t.data_mut().iter_mut().zip(raw.blob[*offset..offset + nbytes].chunks_exact(width))
        {
            *dst = S::read_le_bytes(src);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(i) = used.iter().position(|&u| !u) {
        return Err(CheckpointError::Header(format!("unexpected tensor `{}`", raw.entries[i].0)).into());
    }
    Ok(params)
}

// ── Tests ───────────────────────────────────────────────────────────────────
