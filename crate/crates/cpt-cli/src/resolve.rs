//! Config resolution: defaults, then a config file, then `--set` overrides,
//! then the `--seed` flag. Every key lands in exactly one namespace; a key no
//! namespace consumes is an error, so typos never pass silently.

use std::path::Path;

use cpt_core::config::{format_kv, parse_kv_text};
use cpt_core::model::{ModelConfig, Task};
use cpt_core::train::TrainConfig;
use cpt_core::{Error, Result};

use crate::knobs::{AblateKnobs, BenchKnobs, EvalKnobs, GenKnobs, GradKnobs};

/// Every namespace a config file may address. Subcommands read the parts they
/// need and echo only those, so a single file can drive a whole pipeline
/// (generate, train, evaluate) without each step rejecting the others' keys.
#[derive(Debug, Clone)]
pub struct FullConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenKnobs,
    pub eval: EvalKnobs,
    pub ablate: AblateKnobs,
    pub bench: BenchKnobs,
    pub grad: GradKnobs,
    saw_task: bool,
    saw_layer_dims: bool,
    saw_interpoint: bool,
}

pub fn task_label(task: &Task) -> String {
    match *task {
        Task::Classify { classes } => format!("classify:{classes}"),
        Task::Segment { parts } => format!("segment:{parts}"),
    }
}

impl FullConfig {
    fn new(model: ModelConfig) -> Self {
        FullConfig {
            model,
            train: TrainConfig::default(),
            gen: GenKnobs::default(),
            eval: EvalKnobs::default(),
            ablate: AblateKnobs::default(),
            bench: BenchKnobs::default(),
            grad: GradKnobs::default(),
            saw_task: false,
            saw_layer_dims: false,
            saw_interpoint: false,
        }
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.task" => self.saw_task = true,
            "model.layer_dims" => self.saw_layer_dims = true,
            "model.interpoint" => self.saw_interpoint = true,
            _ => {}
        }
        let mut consumed = self.model.apply(key, value)?;
        if !consumed {
            consumed = self.train.apply(key, value)?;
        }
        if !consumed {
            consumed = self.gen.apply(key, value)?;
        }
        if !consumed {
            consumed = self.eval.apply(key, value)?;
        }
        if !consumed {
            consumed = self.ablate.apply(key, value)?;
        }
        if !consumed {
            consumed = self.bench.apply(key, value)?;
        }
        if !consumed {
            consumed = self.grad.apply(key, value)?;
        }
        if !consumed {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        Ok(())
    }

    /// Pins the task to what the dataset or checkpoint dictates, re-derives
    /// default interpoint flags when layer dims changed without them, and
    /// validates the result. Call once after all overrides are in.
    pub fn finish_model(&mut self, dictated: Option<Task>) -> Result<()> {
        if let Some(task) = dictated {
            if self.saw_task && self.model.task != task {
                return Err(Error::Config(format!(
                    "config sets model.task = {} but the dataset dictates {}; drop the key or point at matching data",
                    task_label(&self.model.task),
                    task_label(&task)
                )));
            }
            self.model.task = task;
        }
        // An explicit layer count without explicit flags gets the stock
        // per-task pattern instead of a stale default of the wrong length.
        if self.saw_layer_dims && !self.saw_interpoint {
            self.model.interpoint =
                ModelConfig::default_interpoint(&self.model.task, self.model.layer_dims.len());
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Builds the resolved config for one run. Precedence, lowest to highest:
/// defaults, the `--config` file, each `--set` in order, then `--seed`,
/// which overrides the seed of every namespace at once.
pub fn resolve(
    base_model: ModelConfig,
    config_file: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<FullConfig> {
    let file_pairs = match config_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            parse_kv_text(&text, &path.display().to_string())?
        }
        None => Vec::new(),
    };
    resolve_pairs(base_model, &file_pairs, sets, seed)
}

fn resolve_pairs(
    base_model: ModelConfig,
    file_pairs: &[(String, String)],
    sets: &[String],
    seed: Option<u64>,
) -> Result<FullConfig> {
    let mut full = FullConfig::new(base_model);
    for (k, v) in file_pairs {
        full.apply(k, v)?;
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set needs key=value, got {s:?}")))?;
        full.apply(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        full.train.seed = s;
        full.gen.seed = s;
        full.eval.seed = s;
        full.bench.seed = s;
        full.grad.seed = s;
    }
    Ok(full)
}

/// Writes the resolved namespaces a subcommand actually used, one file next
/// to the run's outputs. Reloading the file via `--config` reproduces the run.
pub fn write_echo(path: &Path, sections: &[Vec<(String, String)>]) -> Result<()> {
    let pairs: Vec<(String, String)> = sections.iter().flatten().cloned().collect();
    std::fs::write(path, format_kv(&pairs))?;
    Ok(())
}
