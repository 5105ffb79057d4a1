//! Subcommand-specific config namespaces.
//!
//! The core crate owns `model.*` and `train.*`; the knob structs here cover
//! everything else a run needs (dataset generation, evaluation budgets,
//! ablation axes, benchmark grids, gradient-check sampling). Each follows the
//! same `to_kv` / `apply` contract as the core configs, so one resolver can
//! drive every namespace and resolved-config echoes round-trip exactly.

use cpt_core::data::{LabelKind, ShapeFamily};
use cpt_core::model::GraphMode;
use cpt_core::train::AblationSpec;
use cpt_core::{Error, Result};

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for `{key}`")))
}

/// Comma-separated numbers; the literal `none` encodes an empty list.
pub fn parse_nums<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn fmt_nums<T: std::fmt::Display>(items: &[T]) -> String {
    if items.is_empty() {
        return "none".to_string();
    }
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn label_kind_name(kind: LabelKind) -> &'static str {
    match kind {
        LabelKind::Classes => "classes",
        LabelKind::Parts => "parts",
    }
}

fn label_kind_from_name(key: &str, value: &str) -> Result<LabelKind> {
    match value {
        "classes" => Ok(LabelKind::Classes),
        "parts" => Ok(LabelKind::Parts),
        _ => Err(Error::Config(format!("`{key}` must be classes or parts, got {value:?}"))),
    }
}

// ── data.* ──────────────────────────────────────────────────────────────────

/// Synthetic dataset generation (the `gen-data` subcommand).
#[derive(Debug, Clone, PartialEq)]
pub struct GenKnobs {
    pub families: Vec<ShapeFamily>,
    pub per_family: usize,
    pub points: usize,
    pub sigma: f64,
    pub labels: LabelKind,
    pub seed: u64,
}

impl Default for GenKnobs {
    fn default() -> Self {
        GenKnobs {
            families: vec![ShapeFamily::Sphere, ShapeFamily::Cube, ShapeFamily::Torus],
            per_family: 30,
            points: 128,
            sigma: 0.02,
            labels: LabelKind::Classes,
            seed: 0,
        }
    }
}

impl GenKnobs {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("data.families must name at least one shape".into()));
        }
        for (i, f) in self.families.iter().enumerate() {
            if self.families[..i].contains(f) {
                return Err(Error::Config(format!("duplicate family `{}`", f.name())));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let families =
            self.families.iter().map(|f| f.name().to_string()).collect::<Vec<_>>().join(",");
        let kv = [
            ("families", families),
            ("per_family", self.per_family.to_string()),
            ("points", self.points.to_string()),
            ("sigma", self.sigma.to_string()),
            ("labels", label_kind_name(self.labels).to_string()),
            ("seed", self.seed.to_string()),
        ];
        kv.into_iter().map(|(k, v)| (format!("data.{k}"), v)).collect()
    }

    /// Applies one `data.*` assignment; `Ok(false)` for foreign keys.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("data.") else {
            return Ok(false);
        };
        match field {
            "families" => {
                self.families = value
                    .split(',')
                    .map(|p| ShapeFamily::from_name(p.trim()))
                    .collect::<Result<_>>()?
            }
            "per_family" => self.per_family = parse_num(key, value)?,
            "points" => self.points = parse_num(key, value)?,
            "sigma" => self.sigma = parse_num(key, value)?,
            "labels" => self.labels = label_kind_from_name(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown data config key `{key}`"))),
        }
        Ok(true)
    }
}

// ── eval.* ──────────────────────────────────────────────────────────────────

/// Evaluation settings (the `eval` subcommand). `points` holds the reduced
/// point budgets probed after the full-resolution pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalKnobs {
    pub points: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalKnobs {
    fn default() -> Self {
        EvalKnobs { points: Vec::new(), batch_size: 8, seed: 0 }
    }
}

impl EvalKnobs {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be at least 1".into()));
        }
        if self.points.contains(&0) {
            return Err(Error::Config("eval.points budgets must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("eval.points".to_string(), fmt_nums(&self.points)),
            ("eval.batch_size".to_string(), self.batch_size.to_string()),
            ("eval.seed".to_string(), self.seed.to_string()),
        ]
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("eval.") else {
            return Ok(false);
        };
        match field {
            "points" => self.points = parse_nums(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown eval config key `{key}`"))),
        }
        Ok(true)
    }
}

// ── ablate.* ────────────────────────────────────────────────────────────────

/// Ablation axes (the `ablate` subcommand), mirroring
/// [`cpt_core::train::AblationSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct AblateKnobs {
    pub graph_modes: Vec<GraphMode>,
    pub k_sweep: Vec<usize>,
    pub locality: bool,
    pub eval_keep: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblateKnobs {
    fn default() -> Self {
        let spec = AblationSpec::default();
        AblateKnobs {
            graph_modes: spec.graph_modes,
            k_sweep: spec.k_sweep,
            locality: spec.locality_baseline,
            eval_keep: spec.eval_keep,
            seeds: spec.seeds,
        }
    }
}

impl AblateKnobs {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds must list at least one seed".into()));
        }
        if self.k_sweep.contains(&0) {
            return Err(Error::Config("ablate.k_sweep entries must be at least 1".into()));
        }
        if self.eval_keep.contains(&0) {
            return Err(Error::Config("ablate.eval_keep budgets must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_spec(&self) -> AblationSpec {
        AblationSpec {
            graph_modes: self.graph_modes.clone(),
            k_sweep: self.k_sweep.clone(),
            locality_baseline: self.locality,
            eval_keep: self.eval_keep.clone(),
            seeds: self.seeds.clone(),
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let modes = if self.graph_modes.is_empty() {
            "none".to_string() // parses back as [GraphMode::None]; see `apply`
        } else {
            self.graph_modes.iter().map(|m| m.name().to_string()).collect::<Vec<_>>().join(",")
        };
        let kv = [
            ("graph_modes", modes),
            ("k_sweep", fmt_nums(&self.k_sweep)),
            ("locality", self.locality.to_string()),
            ("eval_keep", fmt_nums(&self.eval_keep)),
            ("seeds", fmt_nums(&self.seeds)),
        ];
        kv.into_iter().map(|(k, v)| (format!("ablate.{k}"), v)).collect()
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("ablate.") else {
            return Ok(false);
        };
        match field {
            // `none` here is the graph-free mode, not an empty list: the
            // graph axis always trains whatever modes are named.
            "graph_modes" => {
                self.graph_modes = value
                    .split(',')
                    .map(|p| GraphMode::from_name(p.trim()))
                    .collect::<Result<_>>()?
            }
            "k_sweep" => self.k_sweep = parse_nums(key, value)?,
            "locality" => self.locality = parse_num(key, value)?,
            "eval_keep" => self.eval_keep = parse_nums(key, value)?,
            "seeds" => self.seeds = parse_nums(key, value)?,
            _ => return Err(Error::Config(format!("unknown ablate config key `{key}`"))),
        }
        Ok(true)
    }
}

// ── bench.* ─────────────────────────────────────────────────────────────────

/// Neighbour-search benchmark grid (the `bench-knn` subcommand).
#[derive(Debug, Clone, PartialEq)]
pub struct BenchKnobs {
    pub sizes: Vec<usize>,
    pub ks: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchKnobs {
    fn default() -> Self {
        BenchKnobs { sizes: vec![256, 512, 1024, 2048], ks: vec![8, 16], seed: 0 }
    }
}

impl BenchKnobs {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.ks.is_empty() {
            return Err(Error::Config("bench.sizes and bench.ks must be non-empty".into()));
        }
        for (&n, &k) in self.sizes.iter().flat_map(|n| self.ks.iter().map(move |k| (n, k))) {
            if k >= n {
                return Err(Error::Config(format!("bench case k = {k} needs more than k points, got n = {n}")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("bench.sizes".to_string(), fmt_nums(&self.sizes)),
            ("bench.ks".to_string(), fmt_nums(&self.ks)),
            ("bench.seed".to_string(), self.seed.to_string()),
        ]
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("bench.") else {
            return Ok(false);
        };
        match field {
            "sizes" => self.sizes = parse_nums(key, value)?,
            "ks" => self.ks = parse_nums(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown bench config key `{key}`"))),
        }
        Ok(true)
    }
}

// ── gradcheck.* ─────────────────────────────────────────────────────────────

/// Finite-difference suite settings (the `gradcheck` subcommand).
#[derive(Debug, Clone, PartialEq)]
pub struct GradKnobs {
    /// Entries sampled per parameter tensor (clamped to the tensor size).
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradKnobs {
    fn default() -> Self {
        GradKnobs { samples: 6, seed: 0 }
    }
}

impl GradKnobs {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("gradcheck.samples must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("gradcheck.samples".to_string(), self.samples.to_string()),
            ("gradcheck.seed".to_string(), self.seed.to_string()),
        ]
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("gradcheck.") else {
            return Ok(false);
        };
        match field {
            "samples" => self.samples = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown gradcheck config key `{key}`"))),
        }
        Ok(true)
    }
}
