//! Segment-wise vector quantization of communication vectors.
//!
//! A message `h` of width `m` is cut into `G` segments of width `m / G`.
//! Each segment is replaced by its nearest codebook vector (squared
//! Euclidean distance, ties to the lowest index). The codebook is shared
//! by all segments, so the quantized message takes one of at most `L^G`
//! values.
//!
//! Two auxiliary losses train the pair:
//!
//! - codebook loss `Σ ||sg(s_i) - e_{o_i}||²` moves selected codes only;
//! - commitment loss `β Σ ||s_i - sg(e_{o_i})||²` moves the encoder only.
//!
//! The task loss reaches `h` through a straight-through estimator and never
//! reaches the codebook.

use crate::error::{dim_err, Error, Result};
use crate::graph::{gather_rows, sq_dist, stop_gradient, straight_through, Var};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `L` code vectors of width `dim`, stored as an `[L, dim]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vectors: Tensor,
}

impl Codebook {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 {
            return Err(dim_err!("codebook must be [L, dim], got {:?}", vectors.shape()));
        }
        if !vectors.is_finite() {
            return Err(Error::Numeric("codebook".into()));
        }
        Ok(Self { vectors })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn random<R: Rng + ?Sized>(size: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        Self { vectors: Tensor::normal(&[size, dim], std, rng) }
    }

    /// Number of code vectors `L`.
    pub fn size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Tensor {
        &mut self.vectors
    }

    pub fn code(&self, index: usize) -> &[f64] {
        self.vectors.row(index)
    }
}

/// Output of [`quantize`] and [`gumbel_quantize`].
#[derive(Debug, Clone)]
pub struct QuantizationResult<'g> {
    /// Same shape as the input message.
    pub quantized: Var<'g>,
    /// One code index per segment, row-major over (row, segment).
    pub indices: Vec<usize>,
    pub codebook_loss: Var<'g>,
    /// Already multiplied by β.
    pub commitment_loss: Var<'g>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub hard: bool,
    pub seed: u64,
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("Gumbel temperature must be positive, got {}", self.temperature)))
        }
    }
}

/// Squared Euclidean distance.
pub fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest code to `segment`, lowest index on ties.
pub fn nearest_code(segment: &[f64], codebook: &Tensor) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (j, code) in codebook.rows().enumerate() {
        let d = sq_distance(segment, code);
        if d < best_dist {
            best = j;
            best_dist = d;
        }
    }
    best
}

/// Nearest-code index for every `dim`-wide chunk of `data`.
pub fn nearest_codes(data: &[f64], codebook: &Tensor) -> Vec<usize> {
    let dim = codebook.shape()[1];
    data.chunks(dim).map(|s| nearest_code(s, codebook)).collect()
}

/// Checks `h`'s width against `G` and the codebook and returns
/// `(rows, width)`. A rank-1 `h` is a single row.
fn message_layout(h_shape: &[usize], codebook_shape: &[usize], segments: usize) -> Result<(usize, usize)> {
    let (rows, width) = match h_shape {
        [m] => (1, *m),
        [r, m] => (*r, *m),
        _ => return Err(dim_err!("message must be [m] or [rows, m], got {h_shape:?}")),
    };
    if segments == 0 || width % segments != 0 {
        return Err(Error::Config(format!("message width {width} is not divisible by G = {segments}")));
    }
    if codebook_shape.len() != 2 || width / segments != codebook_shape[1] {
        return Err(dim_err!("segment width {} does not match codebook shape {codebook_shape:?}", width / segments));
    }
    Ok((rows, width))
}

/// Quantizes `h` (shape `[m]` or `[rows, m]`) with a codebook bound as a
/// graph variable of shape `[L, m / G]`.
pub fn quantize<'g>(h: Var<'g>, codebook: Var<'g>, segments: usize, beta: f64, training: bool) -> Result<QuantizationResult<'g>> {
    let h_shape = h.shape();
    let (rows, width) = message_layout(&h_shape, &codebook.shape(), segments)?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be nonnegative, got {beta}")));
    }
    let dim = width / segments;
    let graph = h.graph();
    let segs = h.reshape(&[rows * segments, dim])?;
    let indices = graph.pin_indices(|| segs.with_value(|s| codebook.with_value(|e| nearest_codes(s.data(), e))));
    let codes = gather_rows(codebook, &indices)?;

    let codebook_loss = stop_gradient(segs)?.sub(codes)?.sq_l2()?;
    let commitment_loss = segs.sub(stop_gradient(codes)?)?.sq_l2()?.scale(beta)?;
    let quantized = if training { straight_through(codes, segs)? } else { stop_gradient(codes)? };
    Ok(QuantizationResult { quantized: quantized.reshape(&h_shape)?, indices, codebook_loss, commitment_loss })
}

/// Standard Gumbel noise, one value per entry.
pub fn gumbel_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            // open interval (0, 1)
            let u: f64 = rng.random::<f64>().clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Gumbel-Softmax alternative to [`quantize`].
///
/// Per segment the logits are negative squared distances to every code.
/// With `training` the logits are perturbed by seeded Gumbel noise; without
/// it the selection is the noise-free argmax. Losses are reported as zero.
pub fn gumbel_quantize<'g>(h: Var<'g>, codebook: Var<'g>, segments: usize, cfg: &GumbelConfig, training: bool) -> Result<QuantizationResult<'g>> {
    cfg.validate()?;
    let h_shape = h.shape();
    let (rows, width) = message_layout(&h_shape, &codebook.shape(), segments)?;
    let graph = h.graph();
    let n = rows * segments;
    let size = codebook.shape()[0];
    let segs = h.reshape(&[n, width / segments])?;
    let mut logits = sq_dist(segs, codebook)?.scale(-1.0)?;
    if training {
        let noise = graph.constant(Tensor::new(&[n, size], gumbel_noise(n * size, cfg.seed))?)?;
        logits = logits.add(noise)?;
    }
    let weights = logits.scale(1.0 / cfg.temperature)?.softmax()?;
    let soft = weights.matmul(codebook)?;
    let indices = graph
        .pin_indices(|| weights.with_value(|w| w.rows().map(|r| r.iter().enumerate().fold(0, |best, (j, v)| if *v > r[best] { j } else { best })).collect()));
    let out = if cfg.hard { straight_through(gather_rows(codebook, &indices)?, soft)? } else { soft };
    let zero = || graph.constant(Tensor::scalar(0.0));
    Ok(QuantizationResult { quantized: out.reshape(&h_shape)?, indices, codebook_loss: zero()?, commitment_loss: zero()? })
}

/// `task + weight · (codebook + commitment)`.
pub fn total_loss<'g>(task: Var<'g>, codebook_loss: Var<'g>, commitment_loss: Var<'g>, codebook_weight: f64) -> Result<Var<'g>> {
    if !(codebook_weight >= 0.0 && codebook_weight.is_finite()) {
        return Err(Error::Config(format!("codebook weight must be nonnegative, got {codebook_weight}")));
    }
    task.add(codebook_loss.add(commitment_loss)?.scale(codebook_weight)?)
}

/// Exponential of the entropy of the code-usage distribution.
pub fn perplexity(index_counts: &[u64]) -> Result<f64> {
    let total: u64 = index_counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract("perplexity of all-zero usage counts".into()));
    }
    let entropy: f64 = index_counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// Histogram of code indices.
pub fn usage_counts(indices: &[usize], size: usize) -> Vec<u64> {
    let mut counts = vec![0u64; size];
    for &i in indices {
        counts[i] += 1;
    }
    counts
}

/// Result of Lloyd's algorithm.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Tensor,
    /// Within-cluster sum of squares measured after each assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd's algorithm from `L` distinct samples chosen under `seed`.
///
/// Stops when assignments stop changing or after `max_iters` rounds. An
/// empty cluster is moved onto the sample farthest from its own centroid.
pub fn kmeans(samples: &Tensor, clusters: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if samples.rank() != 2 {
        return Err(dim_err!("k-means samples must be [n, dim], got {:?}", samples.shape()));
    }
    let (n, dim) = (samples.shape()[0], samples.shape()[1]);
    if clusters == 0 || max_iters == 0 {
        return Err(Error::Config("k-means needs at least one cluster and one iteration".into()));
    }
    if n < clusters {
        return Err(Error::InsufficientData(format!("{n} samples for {clusters} clusters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = sample(&mut rng, n, clusters);
    let mut centroids: Vec<f64> = init.iter().flat_map(|i| samples.row(i).to_vec()).collect();
    let mut assignment: Vec<usize> = vec![usize::MAX; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        let table = Tensor::new(&[clusters, dim], centroids.clone())?;
        let mut changed = false;
        let mut sse = 0.0;
        let mut dists = vec![0.0; n];
        for (i, row) in samples.rows().enumerate() {
            let a = nearest_code(row, &table);
            dists[i] = sq_distance(row, table.row(a));
            sse += dists[i];
            if assignment[i] != a {
                assignment[i] = a;
                changed = true;
            }
        }
        sse_history.push(sse);
        if !changed {
            break;
        }

        let mut sums = vec![0.0; clusters * dim];
        let mut counts = vec![0usize; clusters];
        for (row, &a) in samples.rows().zip(&assignment) {
            counts[a] += 1;
            sums[a * dim..(a + 1) * dim].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        for c in 0..clusters {
            if counts[c] > 0 {
                for k in 0..dim {
                    centroids[c * dim + k] = sums[c * dim + k] / counts[c] as f64;
                }
            }
        }
        for c in 0..clusters {
            if counts[c] == 0 {
                let far = (0..n).fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                centroids[c * dim..(c + 1) * dim].copy_from_slice(samples.row(far));
                dists[far] = 0.0;
            }
        }
    }
    Ok(KMeans { centroids: Tensor::new(&[clusters, dim], centroids)?, sse_history, iterations })
}

/// Codebook initialised by K-means on `samples` (`[n, dim]`).
pub fn kmeans_init(samples: &Tensor, size: usize, seed: u64, max_iters: usize) -> Result<Codebook> {
    Codebook::new(kmeans(samples, size, seed, max_iters)?.centroids)
}
