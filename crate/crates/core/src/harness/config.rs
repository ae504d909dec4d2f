//! JSON run configuration.

use super::HarnessError;
use crate::error::{Error, Result};
use crate::rim::RimConfig;
use crate::tasks::{AddingSpec, CopyingSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// A task plus the batch size and data seed used to draw from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskSpec {
    Adding(AddingSpec),
    Copying(CopyingSpec),
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Adding(s) => s.validate(),
            TaskSpec::Copying(s) => s.validate(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TaskSpec::Adding(_) => 2,
            TaskSpec::Copying(s) => s.input_width(),
        }
    }

    /// Readout width: a scalar for adding, one logit per class for copying.
    pub fn output_dim(&self) -> usize {
        match self {
            TaskSpec::Adding(_) => 1,
            TaskSpec::Copying(s) => s.n_symbols + 1,
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            TaskSpec::Adding(s) => s.batch,
            TaskSpec::Copying(s) => s.batch,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            TaskSpec::Adding(s) => s.seed,
            TaskSpec::Copying(s) => s.seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            TaskSpec::Adding(s) => s.seed = seed,
            TaskSpec::Copying(s) => s.seed = seed,
        }
        out
    }

    pub fn with_batch(&self, batch: usize) -> Self {
        let mut out = self.clone();
        match &mut out {
            TaskSpec::Adding(s) => s.batch = batch,
            TaskSpec::Copying(s) => s.batch = batch,
        }
        out
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TaskSpec::Adding(_) => "adding",
            TaskSpec::Copying(_) => "copying",
        }
    }

    /// Whether a model trained on `self` can be evaluated on `other`.
    pub fn compatible_with(&self, other: &TaskSpec) -> bool {
        self.kind() == other.kind() && self.input_dim() == other.input_dim() && self.output_dim() == other.output_dim()
    }
}

/// A named evaluation task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub name: String,
    pub task: TaskSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: defaults::lr() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Training task; its `batch` is the training batch size and its `seed`
    /// roots the per-step data seeds.
    pub task: TaskSpec,
    /// Network configuration. `input_dim` and `output_dim` may be omitted
    /// (or 0) and are then taken from the task.
    pub model: RimConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub eval: Vec<EvalSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "defaults::kmeans_iters")]
    pub kmeans_iters: usize,
}

mod defaults {
    use std::path::PathBuf;

    pub fn lr() -> f64 {
        0.001
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("runs/default")
    }
    pub fn kmeans_iters() -> usize {
        50
    }
}

impl TrainConfig {
    /// Fills task-derived model widths and checks every field.
    pub fn resolve(mut self) -> Result<Self> {
        self.task.validate()?;
        let (din, dout) = (self.task.input_dim(), self.task.output_dim());
        for (field, value, want) in [("input_dim", &mut self.model.input_dim, din), ("output_dim", &mut self.model.output_dim, dout)] {
            if *value == 0 {
                *value = want;
            } else if *value != want {
                return Err(Error::Config(format!("model {field} = {value} but the task needs {want}")));
            }
        }
        self.model.seed = self.seed;
        self.model.validate()?;
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip must be positive, got {}", self.grad_clip)));
        }
        if self.kmeans_iters == 0 {
            return Err(Error::Config("kmeans_iters must be positive".into()));
        }
        for e in &self.eval {
            e.task.validate()?;
            if !self.task.compatible_with(&e.task) {
                return Err(Error::Config(format!("eval spec {} is incompatible with the training task", e.name)));
            }
        }
        Ok(self)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(HarnessError::json("config"))?;
        Ok(cfg.resolve()?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(format!("reading config {}", path.display())))?;
        Self::from_json(&text)
    }
}
