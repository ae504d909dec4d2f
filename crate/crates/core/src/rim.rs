//! RIM-style modular recurrent network with discretized communication.
//!
//! Each step:
//!
//! 1. every module attends over `{x_t, null}` with a query from its state;
//!    the `K` modules putting the most attention mass on `x_t` are active;
//! 2. active modules run their own LSTM cell on the attended input,
//!    inactive modules copy hidden and cell state unchanged;
//! 3. every module reads a message `h_i` by soft attention over all
//!    updated states;
//! 4. `z_i = ẑ_i + q(h_i)` where `q` is the identity, the vector quantizer
//!    or the Gumbel-Softmax quantizer.
//!
//! All tensors carry a leading batch dimension. States are `[B, M, H]`.

use crate::error::{Error, Result};
use crate::graph::{concat, Graph, Var};
use crate::quantizer::{gumbel_quantize, quantize, Codebook, GumbelConfig};
use crate::seed::derive;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretize {
    None,
    Vq,
    Gumbel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RimConfig {
    /// Number of modules.
    #[serde(rename = "M")]
    pub modules: usize,
    /// Modules updated per step.
    #[serde(rename = "K")]
    pub active: usize,
    pub hidden: usize,
    /// Zero means "take it from the task".
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default)]
    pub output_dim: usize,
    #[serde(default = "defaults::key_dim")]
    pub key_dim: usize,
    /// Width of the attended input fed to each LSTM.
    #[serde(default = "defaults::input_value_dim")]
    pub input_value_dim: usize,
    /// Codebook size.
    #[serde(rename = "L", default = "defaults::codebook_size")]
    pub codebook_size: usize,
    /// Segments per message.
    #[serde(rename = "G", default = "defaults::segments")]
    pub segments: usize,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::codebook_weight")]
    pub codebook_weight: f64,
    pub discretize: Discretize,
    #[serde(default = "defaults::gumbel_temperature")]
    pub gumbel_temperature: f64,
    #[serde(default = "defaults::gumbel_hard")]
    pub gumbel_hard: bool,
    #[serde(rename = "dropout_p", default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn key_dim() -> usize {
        16
    }
    pub fn input_value_dim() -> usize {
        8
    }
    pub fn codebook_size() -> usize {
        16
    }
    pub fn segments() -> usize {
        4
    }
    pub fn beta() -> f64 {
        0.25
    }
    pub fn codebook_weight() -> f64 {
        0.25
    }
    pub fn gumbel_temperature() -> f64 {
        1.0
    }
    pub fn gumbel_hard() -> bool {
        true
    }
}

impl RimConfig {
    /// Six modules, four active, 300-wide LSTM units, dropout 0.5 and a
    /// codebook loss weight of 0.25, the full-size RIM setting.
    pub fn reference(input_dim: usize, output_dim: usize, segments: usize) -> Self {
        Self {
            modules: 6,
            active: 4,
            hidden: 300,
            input_dim,
            output_dim,
            key_dim: 64,
            input_value_dim: 64,
            codebook_size: 16,
            segments,
            beta: 0.25,
            codebook_weight: 0.25,
            discretize: Discretize::Vq,
            gumbel_temperature: 1.0,
            gumbel_hard: true,
            dropout: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.modules == 0 || self.active == 0 || self.active > self.modules {
            return fail(format!("need 1 <= K <= M, got K = {}, M = {}", self.active, self.modules));
        }
        if self.hidden == 0 || self.input_dim == 0 || self.output_dim == 0 || self.key_dim == 0 || self.input_value_dim == 0 {
            return fail("all layer widths must be positive".into());
        }
        if self.discretize != Discretize::None {
            if self.segments == 0 || !self.hidden.is_multiple_of(self.segments) {
                return fail(format!("hidden {} is not divisible by G = {}", self.hidden, self.segments));
            }
            if self.codebook_size == 0 {
                return fail("codebook size L must be positive".into());
            }
        }
        if !(self.beta >= 0.0 && self.codebook_weight >= 0.0) {
            return fail("beta and codebook_weight must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout));
        }
        if self.discretize == Discretize::Gumbel && !(self.gumbel_temperature > 0.0) {
            return fail("gumbel_temperature must be positive".into());
        }
        Ok(())
    }

    pub fn segment_dim(&self) -> usize {
        self.hidden / self.segments
    }
}

/// Trainable parameters of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct RimParams {
    /// Per module `[input_value_dim + hidden + 1, 4·hidden]`; the last row is
    /// the bias. Gate order: input, forget, cell, output.
    pub lstm: Vec<Tensor>,
    pub input_query: Tensor,
    pub input_key: Tensor,
    pub input_value: Tensor,
    pub comm_query: Tensor,
    pub comm_key: Tensor,
    pub comm_value: Tensor,
    /// `[M·hidden + 1, output_dim]`; the last row is the bias.
    pub readout: Tensor,
    pub codebook: Option<Codebook>,
}

/// Scale on the communication value projection at init. Inactive modules add
/// the residual message to a copied state, so an expansive map compounds
/// over long sequences.
pub const COMM_VALUE_GAIN: f64 = 0.1;

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[rows, cols], (6.0 / (rows + cols) as f64).sqrt(), rng)
}

impl RimParams {
    pub fn init<R: Rng + ?Sized>(cfg: &RimConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (h, dv, dk) = (cfg.hidden, cfg.input_value_dim, cfg.key_dim);
        let lstm = (0..cfg.modules)
            .map(|_| {
                let mut w = xavier(dv + h + 1, 4 * h, rng);
                let bias = &mut w.data_mut()[(dv + h) * 4 * h..];
                bias.iter_mut().for_each(|b| *b = 0.0);
                bias[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
                w
            })
            .collect();
        let mut readout = xavier(cfg.modules * h + 1, cfg.output_dim, rng);
        let n = readout.numel();
        readout.data_mut()[n - cfg.output_dim..].iter_mut().for_each(|b| *b = 0.0);
        Ok(Self {
            lstm,
            input_query: xavier(h, dk, rng),
            input_key: xavier(cfg.input_dim, dk, rng),
            input_value: xavier(cfg.input_dim, dv, rng),
            comm_query: xavier(h, dk, rng),
            comm_key: xavier(h, dk, rng),
            comm_value: {
                let mut v = xavier(h, h, rng);
                v.data_mut().iter_mut().for_each(|x| *x *= COMM_VALUE_GAIN);
                v
            },
            readout,
            codebook: match cfg.discretize {
                Discretize::None => None,
                _ => Some(Codebook::random(cfg.codebook_size, cfg.segment_dim(), 0.1, rng)),
            },
        })
    }

    /// Parameters in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.lstm.iter().enumerate().map(|(i, t)| (format!("lstm.{i}"), t)).collect();
        out.extend([
            ("input.query".to_string(), &self.input_query),
            ("input.key".to_string(), &self.input_key),
            ("input.value".to_string(), &self.input_value),
            ("comm.query".to_string(), &self.comm_query),
            ("comm.key".to_string(), &self.comm_key),
            ("comm.value".to_string(), &self.comm_value),
            ("readout".to_string(), &self.readout),
        ]);
        if let Some(cb) = &self.codebook {
            out.push(("codebook".to_string(), cb.vectors()));
        }
        out
    }

    /// Same order as [`RimParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.lstm.iter_mut().collect();
        out.extend([
            &mut self.input_query,
            &mut self.input_key,
            &mut self.input_value,
            &mut self.comm_query,
            &mut self.comm_key,
            &mut self.comm_value,
            &mut self.readout,
        ]);
        if let Some(cb) = &mut self.codebook {
            out.push(cb.vectors_mut());
        }
        out
    }

    /// Rebuilds parameters from named arrays, checking every shape against
    /// a freshly initialised template.
    pub fn from_named(cfg: &RimConfig, arrays: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = Self::init(cfg, &mut rng)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if arrays.len() != names.len() {
            return Err(Error::Dimension(format!("expected {} parameter arrays, found {}", names.len(), arrays.len())));
        }
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = arrays.get(name).ok_or_else(|| Error::Dimension(format!("missing parameter array {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Dimension(format!("array {name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        if let Some(cb) = &params.codebook {
            Codebook::new(cb.vectors().clone())?;
        }
        Ok(params)
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Result<RimVars<'g>> {
        Ok(RimVars {
            lstm: self.lstm.iter().map(|t| graph.param(t.clone())).collect::<Result<_>>()?,
            input_query: graph.param(self.input_query.clone())?,
            input_key: graph.param(self.input_key.clone())?,
            input_value: graph.param(self.input_value.clone())?,
            comm_query: graph.param(self.comm_query.clone())?,
            comm_key: graph.param(self.comm_key.clone())?,
            comm_value: graph.param(self.comm_value.clone())?,
            readout: graph.param(self.readout.clone())?,
            codebook: self.codebook.as_ref().map(|cb| graph.param(cb.vectors().clone())).transpose()?,
        })
    }
}

/// [`RimParams`] bound into a graph.
#[derive(Debug, Clone)]
pub struct RimVars<'g> {
    pub lstm: Vec<Var<'g>>,
    pub input_query: Var<'g>,
    pub input_key: Var<'g>,
    pub input_value: Var<'g>,
    pub comm_query: Var<'g>,
    pub comm_key: Var<'g>,
    pub comm_value: Var<'g>,
    pub readout: Var<'g>,
    pub codebook: Option<Var<'g>>,
}

impl<'g> RimVars<'g> {
    /// Same order as [`RimParams::named`].
    pub fn all(&self) -> Vec<Var<'g>> {
        let mut out = self.lstm.clone();
        out.extend([self.input_query, self.input_key, self.input_value, self.comm_query, self.comm_key, self.comm_value, self.readout]);
        out.extend(self.codebook);
        out
    }
}

/// Hidden and cell states, each `[B, M, hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct RimState<'g> {
    pub z: Var<'g>,
    pub c: Var<'g>,
    pub step: usize,
}

impl<'g> RimState<'g> {
    pub fn zeros(graph: &'g Graph, batch: usize, cfg: &RimConfig) -> Result<Self> {
        let shape = [batch, cfg.modules, cfg.hidden];
        Ok(Self { z: graph.constant(Tensor::zeros(&shape))?, c: graph.constant(Tensor::zeros(&shape))?, step: 0 })
    }

    pub fn batch(&self) -> usize {
        self.z.shape()[0]
    }
}

/// `softmax(Q Kᵀ / √d) V` for rank-2 operands or batched rank-3 operands.
pub fn soft_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
    let d = *q.shape().last().expect("attention query has no dimensions");
    q.matmul(k.transpose()?)?.scale(1.0 / (d as f64).sqrt())?.softmax()?.matmul(v)
}

/// Input attention of every module, per batch row.
#[derive(Debug, Clone)]
pub struct InputAttention<'g> {
    /// Active module indices for each batch row, sorted ascending.
    pub selected: Vec<Vec<usize>>,
    /// Attention mass on the real input, `[B·M]` row-major.
    pub mass: Vec<f64>,
    /// `[B, M, input_value_dim]`.
    pub attended: Var<'g>,
}

/// Ranks modules by `mass` (descending, lower index first on ties) and
/// keeps the first `k`.
pub fn top_k(mass: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

pub fn input_attention_topk<'g>(z: Var<'g>, x: Var<'g>, vars: &RimVars<'g>, cfg: &RimConfig) -> Result<InputAttention<'g>> {
    let graph = z.graph();
    let batch = z.shape()[0];
    let (m, dk, dv) = (cfg.modules, cfg.key_dim, cfg.input_value_dim);
    let query = z.matmul(vars.input_query)?;
    let key = x.matmul(vars.input_key)?.reshape(&[batch, dk, 1])?;
    let scores = query.matmul(key)?.scale(1.0 / (dk as f64).sqrt())?;
    // The null token is the zero vector, so its key, value and score are 0.
    let null = graph.constant(Tensor::zeros(&[batch, m, 1]))?;
    let weights = concat(&[scores, null], 2)?.softmax()?;
    let on_input = weights.slice(2, 0, 1)?;
    let value = x.matmul(vars.input_value)?.reshape(&[batch, 1, dv])?;
    let attended = on_input.matmul(value)?;

    let mass = on_input.value().into_data();
    let flat = graph.pin_indices(|| mass.chunks(m).flat_map(|row| top_k(row, cfg.active)).collect());
    let selected = flat.chunks(cfg.active).map(<[usize]>::to_vec).collect();
    Ok(InputAttention { selected, mass, attended })
}

/// Per-step outputs besides the new state.
#[derive(Debug, Clone)]
pub struct StepOutput<'g> {
    pub state: RimState<'g>,
    /// Batch-mean codebook loss of this step, summed over modules.
    pub codebook_loss: Var<'g>,
    /// Batch-mean commitment loss of this step (β included).
    pub commitment_loss: Var<'g>,
    /// Code indices, row-major over (batch, module, segment). Empty without
    /// quantization.
    pub indices: Vec<usize>,
    /// Communication messages `h`, `[B, M, hidden]`, before quantization.
    pub messages: Var<'g>,
    pub selected: Vec<Vec<usize>>,
}

fn lstm_cell<'g>(input: Var<'g>, z: Var<'g>, c: Var<'g>, weights: Var<'g>, hidden: usize) -> Result<(Var<'g>, Var<'g>)> {
    let graph = input.graph();
    let batch = input.shape()[0];
    let ones = graph.constant(Tensor::full(&[batch, 1], 1.0))?;
    let gates = concat(&[input, z, ones], 1)?.matmul(weights)?;
    let i = gates.slice(1, 0, hidden)?.sigmoid()?;
    let f = gates.slice(1, hidden, hidden)?.sigmoid()?;
    let g = gates.slice(1, 2 * hidden, hidden)?.tanh()?;
    let o = gates.slice(1, 3 * hidden, hidden)?.sigmoid()?;
    let c_next = f.mul(c)?.add(i.mul(g)?)?;
    let z_next = o.mul(c_next.tanh()?)?;
    Ok((z_next, c_next))
}

/// One recurrent step. `noise_seed` drives dropout and Gumbel noise and is
/// only consulted when `training`.
pub fn rim_step<'g>(state: RimState<'g>, x: Var<'g>, vars: &RimVars<'g>, cfg: &RimConfig, training: bool, noise_seed: u64) -> Result<StepOutput<'g>> {
    let graph = x.graph();
    let batch = state.batch();
    let (m, h) = (cfg.modules, cfg.hidden);
    let step_seed = derive(noise_seed, state.step as u64);

    let attn = input_attention_topk(state.z, x, vars, cfg)?;
    let mut attended = attn.attended;
    if training && cfg.dropout > 0.0 {
        attended = attended.dropout(cfg.dropout, derive(step_seed, 1))?;
    }

    let mut z_parts = Vec::with_capacity(m);
    let mut c_parts = Vec::with_capacity(m);
    for module in 0..m {
        let take = |t: Var<'g>, width: usize| t.slice(1, module, 1).and_then(|s| s.reshape(&[batch, width]));
        let (z_i, c_i) = (take(state.z, h)?, take(state.c, h)?);
        let (z_new, c_new) = lstm_cell(take(attended, cfg.input_value_dim)?, z_i, c_i, vars.lstm[module], h)?;
        let mut mask = vec![0.0; batch * h];
        for (b, sel) in attn.selected.iter().enumerate() {
            if sel.contains(&module) {
                mask[b * h..(b + 1) * h].iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let keep = graph.constant(Tensor::new(&[batch, h], mask.iter().map(|v| 1.0 - v).collect())?)?;
        let mask = graph.constant(Tensor::new(&[batch, h], mask)?)?;
        let blend = |new: Var<'g>, old: Var<'g>| -> Result<Var<'g>> { mask.mul(new)?.add(keep.mul(old)?)?.reshape(&[batch, 1, h]) };
        z_parts.push(blend(z_new, z_i)?);
        c_parts.push(blend(c_new, c_i)?);
    }
    let z_hat = concat(&z_parts, 1)?;
    let c_hat = concat(&c_parts, 1)?;

    let messages = soft_attention(z_hat.matmul(vars.comm_query)?, z_hat.matmul(vars.comm_key)?, z_hat.matmul(vars.comm_value)?)?;
    let zero = || graph.constant(Tensor::scalar(0.0));
    let (residual, codebook_loss, commitment_loss, indices) = match cfg.discretize {
        Discretize::None => (messages, zero()?, zero()?, Vec::new()),
        Discretize::Vq | Discretize::Gumbel => {
            let codebook = vars.codebook.ok_or_else(|| Error::Config("quantized communication without a codebook".into()))?;
            let rows = messages.reshape(&[batch * m, h])?;
            let q = if cfg.discretize == Discretize::Vq {
                quantize(rows, codebook, cfg.segments, cfg.beta, training)?
            } else {
                let gcfg = GumbelConfig { temperature: cfg.gumbel_temperature, hard: cfg.gumbel_hard, seed: derive(step_seed, 2) };
                gumbel_quantize(rows, codebook, cfg.segments, &gcfg, training)?
            };
            let per_sample = 1.0 / batch as f64;
            (q.quantized.reshape(&[batch, m, h])?, q.codebook_loss.scale(per_sample)?, q.commitment_loss.scale(per_sample)?, q.indices)
        }
    };
    Ok(StepOutput {
        state: RimState { z: z_hat.add(residual)?, c: c_hat, step: state.step + 1 },
        codebook_loss,
        commitment_loss,
        indices,
        messages,
        selected: attn.selected,
    })
}

/// Linear readout of the concatenated module states.
pub fn readout<'g>(z: Var<'g>, vars: &RimVars<'g>) -> Result<Var<'g>> {
    let shape = z.shape();
    let batch = shape[0];
    let flat = z.reshape(&[batch, shape[1] * shape[2]])?;
    let ones = z.graph().constant(Tensor::full(&[batch, 1], 1.0))?;
    concat(&[flat, ones], 1)?.matmul(vars.readout)
}

#[derive(Debug, Clone)]
pub struct Rollout<'g> {
    /// Readout of the final state, `[B, output_dim]`.
    pub readout: Var<'g>,
    /// Readouts at the requested intermediate steps, in request order.
    pub step_readouts: Vec<Var<'g>>,
    pub codebook_loss: Var<'g>,
    pub commitment_loss: Var<'g>,
    pub indices: Vec<usize>,
    pub final_state: RimState<'g>,
    /// Pre-quantization messages of every step, `[B·M·T, hidden]` row-major,
    /// when collection was requested.
    pub messages: Option<Tensor>,
}

/// Options for [`rollout_with`].
#[derive(Debug, Clone, Default)]
pub struct RolloutOptions {
    pub training: bool,
    pub noise_seed: u64,
    /// Time steps (0-based) whose post-step state is read out.
    pub readout_steps: Vec<usize>,
    pub collect_messages: bool,
}

/// Runs the network over `seq` (`[B, T, input_dim]`) from zero state.
pub fn rollout<'g>(seq: Var<'g>, vars: &RimVars<'g>, cfg: &RimConfig, training: bool) -> Result<Rollout<'g>> {
    rollout_with(seq, vars, cfg, &RolloutOptions { training, ..RolloutOptions::default() })
}

pub fn rollout_with<'g>(seq: Var<'g>, vars: &RimVars<'g>, cfg: &RimConfig, opts: &RolloutOptions) -> Result<Rollout<'g>> {
    let graph = seq.graph();
    let shape = seq.shape();
    let [batch, steps, width] = shape[..] else {
        return Err(Error::Dimension(format!("sequence must be [B, T, input_dim], got {shape:?}")));
    };
    if steps == 0 || width != cfg.input_dim {
        return Err(Error::Dimension(format!("sequence {shape:?} does not match input_dim {}", cfg.input_dim)));
    }
    let mut state = RimState::zeros(graph, batch, cfg)?;
    let mut codebook_losses = Vec::with_capacity(steps);
    let mut commitment_losses = Vec::with_capacity(steps);
    let mut indices = Vec::new();
    let mut step_readouts = Vec::with_capacity(opts.readout_steps.len());
    let mut wanted: Vec<(usize, usize)> = opts.readout_steps.iter().copied().enumerate().map(|(i, t)| (t, i)).collect();
    wanted.sort_unstable();
    let mut slots: Vec<Option<Var<'g>>> = vec![None; opts.readout_steps.len()];
    let mut messages = opts.collect_messages.then(Vec::new);
    for t in 0..steps {
        let x = seq.slice(1, t, 1)?.reshape(&[batch, width])?;
        let out = rim_step(state, x, vars, cfg, opts.training, opts.noise_seed)?;
        codebook_losses.push(out.codebook_loss);
        commitment_losses.push(out.commitment_loss);
        indices.extend(out.indices);
        if let Some(buf) = messages.as_mut() {
            out.messages.with_value(|h| buf.extend_from_slice(h.data()));
        }
        state = out.state;
        for &(_, slot) in wanted.iter().filter(|(s, _)| *s == t) {
            slots[slot] = Some(readout(state.z, vars)?);
        }
    }
    for (slot, t) in slots.iter_mut().zip(&opts.readout_steps) {
        step_readouts.push(slot.take().ok_or_else(|| Error::Dimension(format!("readout step {t} beyond sequence length {steps}")))?);
    }
    let sum = |parts: Vec<Var<'g>>| -> Result<Var<'g>> { concat(&parts.iter().map(|p| p.reshape(&[1])).collect::<Result<Vec<_>>>()?, 0)?.sum() };
    let messages = match messages {
        Some(buf) => {
            let rows = buf.len() / cfg.hidden;
            Some(Tensor::new(&[rows, cfg.hidden], buf)?)
        }
        None => None,
    };
    Ok(Rollout {
        readout: readout(state.z, vars)?,
        step_readouts,
        codebook_loss: sum(codebook_losses)?,
        commitment_loss: sum(commitment_losses)?,
        indices,
        final_state: state,
        messages,
    })
}
