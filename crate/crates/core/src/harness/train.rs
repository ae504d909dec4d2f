//! Training loop and evaluation.

use super::checkpoint::{Checkpoint, RngState};
use super::config::{TaskSpec, TrainConfig};
use super::HarnessError;
use crate::error::{Error, Result};
use crate::graph::{concat, Graph, Var};
use crate::optim::{clip_global_norm, Adam};
use crate::quantizer::{kmeans_init, perplexity, total_loss, usage_counts};
use crate::rim::{rollout_with, Discretize, RimConfig, RimParams, RimVars, RolloutOptions};
use crate::seed::derive;
use crate::tasks::{adding_batch, copying_batch, AddingBatch, CopyingBatch, CopyingSpec};
use crate::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: &str = "step,task_loss,codebook_loss,commitment_loss,total_loss,perplexity,grad_norm,lr";

/// Samples per evaluation forward pass.
const EVAL_CHUNK: usize = 32;

// Seed streams.
const STREAM_INIT: u64 = 1;
const STREAM_WARMUP: u64 = 2;
const STREAM_NOISE: u64 = 3;

#[derive(Debug, Clone)]
pub enum TaskBatch {
    Adding(AddingBatch),
    Copying(CopyingBatch, CopyingSpec),
}

impl TaskBatch {
    pub fn generate(spec: &TaskSpec) -> Result<Self> {
        Ok(match spec {
            TaskSpec::Adding(s) => TaskBatch::Adding(adding_batch(s)?),
            TaskSpec::Copying(s) => TaskBatch::Copying(copying_batch(s)?, s.clone()),
        })
    }

    pub fn inputs(&self) -> &Tensor {
        match self {
            TaskBatch::Adding(b) => &b.inputs,
            TaskBatch::Copying(b, _) => &b.inputs,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs().shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples `start..end` as a batch of their own.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self> {
        let slice = |t: &Tensor| -> Result<Tensor> {
            let per: usize = t.shape()[1..].iter().product();
            let mut shape = t.shape().to_vec();
            shape[0] = end - start;
            Tensor::new(&shape, t.data()[start * per..end * per].to_vec())
        };
        Ok(match self {
            TaskBatch::Adding(b) => {
                TaskBatch::Adding(AddingBatch { inputs: slice(&b.inputs)?, targets: slice(&b.targets)?, markers: b.markers[start..end].to_vec() })
            }
            TaskBatch::Copying(b, spec) => TaskBatch::Copying(
                CopyingBatch { inputs: slice(&b.inputs)?, targets: b.targets[start * b.length..end * b.length].to_vec(), length: b.length },
                spec.clone(),
            ),
        })
    }
}

/// Losses of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward<'g> {
    pub task: Var<'g>,
    pub codebook: Var<'g>,
    pub commitment: Var<'g>,
    pub total: Var<'g>,
    pub indices: Vec<usize>,
    /// Correct recall predictions (copying only).
    pub correct: usize,
    pub predictions: usize,
}

/// Builds the task loss plus auxiliary losses for one batch.
pub fn forward<'g>(graph: &'g Graph, vars: &RimVars<'g>, cfg: &RimConfig, batch: &TaskBatch, training: bool, noise_seed: u64) -> Result<Forward<'g>> {
    let seq = graph.constant(batch.inputs().clone())?;
    let b = batch.len();
    let (task, readout_steps, out, correct, predictions);
    match batch {
        TaskBatch::Adding(data) => {
            out = rollout_with(seq, vars, cfg, &RolloutOptions { training, noise_seed, ..Default::default() })?;
            let target = graph.constant(data.targets.clone())?;
            task = out.readout.sub(target)?.sq_l2()?.scale(1.0 / b as f64)?;
            correct = 0;
            predictions = 0;
        }
        TaskBatch::Copying(data, spec) => {
            readout_steps = spec.recall_positions().collect::<Vec<_>>();
            let opts = RolloutOptions { training, noise_seed, readout_steps: readout_steps.clone(), collect_messages: false };
            out = rollout_with(seq, vars, cfg, &opts)?;
            let classes = spec.n_symbols + 1;
            let mut terms = Vec::with_capacity(readout_steps.len());
            let mut hits = 0;
            for (logits, &t) in out.step_readouts.iter().zip(&readout_steps) {
                let mut onehot = vec![0.0; b * classes];
                for s in 0..b {
                    onehot[s * classes + data.targets[s * data.length + t]] = 1.0;
                }
                logits.with_value(|l| {
                    for (s, row) in l.rows().enumerate() {
                        let guess = row.iter().enumerate().fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
                        hits += usize::from(guess == data.targets[s * data.length + t]);
                    }
                });
                let onehot = graph.constant(Tensor::new(&[b, classes], onehot)?)?;
                terms.push(logits.log_softmax()?.mul(onehot)?.sum()?.reshape(&[1])?);
            }
            let count = b * readout_steps.len();
            task = concat(&terms, 0)?.sum()?.scale(-1.0 / count as f64)?;
            correct = hits;
            predictions = count;
        }
    }
    let total = total_loss(task, out.codebook_loss, out.commitment_loss, cfg.codebook_weight)?;
    Ok(Forward { task, codebook: out.codebook_loss, commitment: out.commitment_loss, total, indices: out.indices, correct, predictions })
}

/// Parameters before any training step.
pub fn init_params(cfg: &TrainConfig) -> Result<RimParams> {
    RimParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(derive(cfg.seed, STREAM_INIT)))
}

/// Replaces the codebook with K-means centroids of message segments
/// collected from one evaluation-mode forward pass with continuous
/// communication.
pub fn kmeans_warmup(params: &mut RimParams, cfg: &TrainConfig) -> Result<()> {
    if cfg.model.discretize == Discretize::None {
        return Ok(());
    }
    let spec = cfg.task.with_seed(derive(cfg.task.seed(), derive(cfg.seed, STREAM_WARMUP)));
    let batch = TaskBatch::generate(&spec)?;
    let continuous = RimConfig { discretize: Discretize::None, ..cfg.model.clone() };
    let graph = Graph::new();
    let vars = params.bind(&graph)?;
    let seq = graph.constant(batch.inputs().clone())?;
    let opts = RolloutOptions { collect_messages: true, ..Default::default() };
    let messages = rollout_with(seq, &vars, &continuous, &opts)?.messages.expect("collected");
    let d = cfg.model.segment_dim();
    let segments = messages.reshape(&[messages.numel() / d, d])?;
    params.codebook = Some(kmeans_init(&segments, cfg.model.codebook_size, derive(cfg.seed, STREAM_WARMUP), cfg.kmeans_iters)?);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub name: String,
    pub task: String,
    pub length: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

impl EvalRecord {
    /// MSE for adding, cross-entropy for copying.
    pub fn primary(&self) -> f64 {
        self.mse.or(self.cross_entropy).expect("one metric is always set")
    }
}

/// Evaluation-mode metrics of `params` on the batch described by `task`.
pub fn evaluate(params: &RimParams, model: &RimConfig, task: &TaskSpec, name: &str) -> Result<EvalRecord> {
    task.validate()?;
    if task.input_dim() != model.input_dim || task.output_dim() != model.output_dim {
        return Err(Error::Dimension(format!(
            "task needs input/output widths {}/{} but the model has {}/{}",
            task.input_dim(),
            task.output_dim(),
            model.input_dim,
            model.output_dim
        )));
    }
    let batch = TaskBatch::generate(task)?;
    let n = batch.len();
    let (mut loss_sum, mut correct, mut predictions) = (0.0, 0, 0);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = batch.rows(start, end)?;
        let graph = Graph::new();
        let vars = params.bind(&graph)?;
        let f = forward(&graph, &vars, model, &chunk, false, 0)?;
        let weight = match &chunk {
            TaskBatch::Adding(_) => (end - start) as f64,
            TaskBatch::Copying(..) => f.predictions as f64,
        };
        loss_sum += f.task.value().item() * weight;
        correct += f.correct;
        predictions += f.predictions;
    }
    let (length, mse, cross_entropy, accuracy) = match task {
        TaskSpec::Adding(s) => (s.length, Some(loss_sum / n as f64), None, None),
        TaskSpec::Copying(s) => (s.length(), None, Some(loss_sum / predictions as f64), Some(correct as f64 / predictions as f64)),
    };
    Ok(EvalRecord { name: name.to_string(), task: task.kind().into(), length, batch: n, seed: task.seed(), mse, cross_entropy, accuracy })
}

/// Evaluates a checkpoint on `task`.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, task: &TaskSpec, name: &str) -> Result<EvalRecord, HarnessError> {
    if !ckpt.config.task.compatible_with(task) {
        return Err(Error::Dimension(format!("task {} is incompatible with the checkpoint's {} model", task.kind(), ckpt.config.task.kind())).into());
    }
    Ok(evaluate(&ckpt.params()?, &ckpt.config.model, task, name)?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    /// Evaluations of the saved (f32-rounded) checkpoint.
    pub evals: Vec<EvalRecord>,
    /// Task loss per step.
    pub task_losses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct Diagnostic<'a> {
    step: usize,
    error: String,
    last_metrics_row: Option<&'a str>,
    config: &'a TrainConfig,
}

fn fmt_row(step: usize, f: &Forward<'_>, ppl: Option<f64>, grad_norm: f64, lr: f64) -> String {
    let mut row = String::new();
    let v = |x: Var<'_>| x.value().item();
    write!(row, "{step},{},{},{},{},", v(f.task), v(f.codebook), v(f.commitment), v(f.total)).unwrap();
    if let Some(p) = ppl {
        write!(row, "{p}").unwrap();
    }
    write!(row, ",{grad_norm},{lr}").unwrap();
    row
}

/// Runs training as configured, writing `metrics.csv`, `checkpoint.bin`,
/// optional `checkpoint-<step>.bin` files and `eval.json` into the output
/// directory.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, HarnessError> {
    let cfg = cfg.clone().resolve()?;
    let out_dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(HarnessError::io(format!("creating {}", out_dir.display())))?;
    let metrics_path = out_dir.join("metrics.csv");
    let file = std::fs::File::create(&metrics_path).map_err(HarnessError::io(format!("creating {}", metrics_path.display())))?;
    let mut metrics = std::io::BufWriter::new(file);
    let io_err = || HarnessError::io(format!("writing {}", metrics_path.display()));
    writeln!(metrics, "{METRICS_HEADER}").map_err(io_err())?;

    let mut params = init_params(&cfg)?;
    let steps = cfg.total_steps();
    if steps > 0 {
        kmeans_warmup(&mut params, &cfg)?;
    }
    let mut adam = Adam::new(cfg.adam.lr);
    let mut task_losses = Vec::with_capacity(steps);
    let mut last_row: Option<String> = None;

    for step in 0..steps {
        let result = (|| -> Result<(String, f64)> {
            let batch = TaskBatch::generate(&cfg.task.with_seed(derive(cfg.task.seed(), step as u64)))?;
            let graph = Graph::new();
            let vars = params.bind(&graph)?;
            let f = forward(&graph, &vars, &cfg.model, &batch, true, derive(derive(cfg.seed, STREAM_NOISE), step as u64))?;
            let grads = graph.backward(f.total)?;
            let mut grads: Vec<Tensor> = vars.all().into_iter().map(|v| grads.wrt(v)).collect();
            let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
            if !grad_norm.is_finite() {
                return Err(Error::Numeric("gradient".into()));
            }
            let ppl = params.codebook.as_ref().map(|cb| perplexity(&usage_counts(&f.indices, cb.size()))).transpose()?;
            adam.step(&mut params.tensors_mut(), &grads);
            Ok((fmt_row(step, &f, ppl, grad_norm, cfg.adam.lr), f.task.value().item()))
        })();
        match result {
            Ok((row, loss)) => {
                writeln!(metrics, "{row}").map_err(io_err())?;
                task_losses.push(loss);
                last_row = Some(row);
            }
            Err(Error::Numeric(what)) => {
                metrics.flush().map_err(io_err())?;
                let dump = out_dir.join("diagnostic.json");
                let diag = Diagnostic { step, error: format!("non-finite value from {what}"), last_metrics_row: last_row.as_deref(), config: &cfg };
                let text = serde_json::to_string_pretty(&diag).map_err(HarnessError::json("diagnostic"))?;
                std::fs::write(&dump, text).map_err(HarnessError::io(format!("writing {}", dump.display())))?;
                return Err(HarnessError::NonFinite { step, dump: dump.display().to_string() });
            }
            Err(e) => return Err(e.into()),
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < steps {
            let ckpt = Checkpoint::new(cfg.clone(), &params, RngState { seed: cfg.seed, step: step as u64 + 1 });
            ckpt.save(&out_dir.join(format!("checkpoint-{}.bin", step + 1)))?;
        }
    }
    metrics.flush().map_err(io_err())?;

    let checkpoint = Checkpoint::new(cfg.clone(), &params, RngState { seed: cfg.seed, step: steps as u64 });
    let checkpoint_path = out_dir.join("checkpoint.bin");
    checkpoint.save(&checkpoint_path)?;
    let saved = checkpoint.params()?;
    let evals = cfg.eval.iter().map(|e| evaluate(&saved, &cfg.model, &e.task, &e.name)).collect::<Result<Vec<_>>>()?;
    let eval_path = out_dir.join("eval.json");
    let text = serde_json::to_string_pretty(&evals).map_err(HarnessError::json("eval records"))?;
    std::fs::write(&eval_path, text).map_err(HarnessError::io(format!("writing {}", eval_path.display())))?;
    Ok(TrainOutcome { checkpoint, checkpoint_path, metrics_path, evals, task_losses })
}
