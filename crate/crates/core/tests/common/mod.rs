//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use dvnc::graph::{stop_gradient, straight_through};
use dvnc::harness::train::{forward, TaskBatch};
use dvnc::quantizer::quantize;
use dvnc::rim::{Discretize, RimConfig, RimParams};
use dvnc::tasks::{adding_batch, AddingSpec};
use dvnc::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MODES: [Discretize; 3] = [Discretize::None, Discretize::Vq, Discretize::Gumbel];

pub fn tiny_config(mode: Discretize, seed: u64) -> RimConfig {
    RimConfig {
        modules: 2,
        active: 1,
        hidden: 4,
        input_dim: 2,
        output_dim: 1,
        key_dim: 3,
        input_value_dim: 3,
        codebook_size: 4,
        segments: 2,
        beta: 0.25,
        codebook_weight: 0.5,
        discretize: mode,
        gumbel_temperature: 0.7,
        gumbel_hard: seed.is_multiple_of(2),
        dropout: if seed.is_multiple_of(3) { 0.25 } else { 0.0 },
        seed,
    }
}

/// Parameters with larger-than-default spread so every path carries signal.
pub fn tiny_params(cfg: &RimConfig, seed: u64) -> RimParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = RimParams::init(cfg, &mut rng).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Denominator floor of the relative error, for entries whose gradient is
/// essentially zero.
pub const FD_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of the total training loss against
/// central differences evaluated on replayed graphs.
pub fn finite_difference_check(mode: Discretize, seed: u64) -> FdReport {
    let cfg = tiny_config(mode, seed);
    let params = tiny_params(&cfg, seed);
    let batch = TaskBatch::Adding(adding_batch(&AddingSpec { length: 3, max_value: 1.0, batch: 2, seed }).unwrap());
    let noise = seed.wrapping_mul(31) + 7;

    let graph = Graph::recording();
    let vars = params.bind(&graph).unwrap();
    let f = forward(&graph, &vars, &cfg, &batch, true, noise).unwrap();
    let grads = graph.backward(f.total).unwrap();
    let analytic: Vec<Tensor> = vars.all().into_iter().map(|v| grads.wrt(v)).collect();
    let pins = graph.take_pins();

    let eval = |p: &RimParams| -> f64 {
        let g = Graph::replaying(pins.clone());
        let v = p.bind(&g).unwrap();
        forward(&g, &v, &cfg, &batch, true, noise).unwrap().total.value().item()
    };
    assert!((eval(&params) - f.total.value().item()).abs() < 1e-12, "replay must reproduce the recorded loss");

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let mut plus = params.clone();
            plus.tensors_mut()[t].data_mut()[j] += eps;
            let mut minus = params.clone();
            minus.tensors_mut()[t].data_mut()[j] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = grad.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
            checked += 1;
        }
    }
    FdReport { max_rel_error: worst, checked }
}

/// Nearest code per segment by exhaustive search, lowest index on ties,
/// plus the codebook and commitment losses.
pub fn brute_force_quantize(h: &[f64], codebook: &[f64], dim: usize, beta: f64) -> (Vec<usize>, f64, f64) {
    let codes = codebook.len() / dim;
    let mut indices = Vec::new();
    let mut sq = 0.0;
    for seg in h.chunks(dim) {
        let mut best = (f64::INFINITY, 0);
        for k in 0..codes {
            let e = &codebook[k * dim..(k + 1) * dim];
            let d: f64 = seg.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        indices.push(best.1);
        sq += best.0;
    }
    (indices, sq, beta * sq)
}

/// Random `(h, codebook)` instance: `rows × (G·dim)` messages and an
/// `L × dim` codebook, with occasional duplicated codes to exercise ties.
pub struct QuantCase {
    pub rows: usize,
    pub segments: usize,
    pub dim: usize,
    pub codes: usize,
    pub h: Vec<f64>,
    pub codebook: Vec<f64>,
    pub beta: f64,
}

pub fn random_quant_case(seed: u64) -> QuantCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segments = rng.random_range(1..=4);
    let dim = rng.random_range(1..=8 / segments);
    let codes = rng.random_range(1..=16);
    let rows = rng.random_range(1..=6);
    let mut codebook: Vec<f64> = (0..codes * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    if codes > 1 && rng.random_bool(0.3) {
        let (a, b) = (rng.random_range(0..codes), rng.random_range(0..codes));
        let dup = codebook[a * dim..(a + 1) * dim].to_vec();
        codebook[b * dim..(b + 1) * dim].copy_from_slice(&dup);
    }
    let mut h: Vec<f64> = (0..rows * segments * dim).map(|_| rng.random_range(-2.5..2.5)).collect();
    if rng.random_bool(0.2) {
        let k = rng.random_range(0..codes);
        h[..dim].copy_from_slice(&codebook[k * dim..(k + 1) * dim]);
    }
    QuantCase { rows, segments, dim, codes, h, codebook, beta: rng.random_range(0.0..1.0) }
}

/// Library quantizer vs exhaustive search on one case.
pub fn quantizer_matches_oracle(case: &QuantCase) -> Result<(), String> {
    let graph = Graph::new();
    let h = graph.param(Tensor::new(&[case.rows, case.segments * case.dim], case.h.clone()).unwrap()).unwrap();
    let e = graph.param(Tensor::new(&[case.codes, case.dim], case.codebook.clone()).unwrap()).unwrap();
    let q = quantize(h, e, case.segments, case.beta, true).map_err(|e| e.to_string())?;
    let (indices, cb, commit) = brute_force_quantize(&case.h, &case.codebook, case.dim, case.beta);
    if q.indices != indices {
        return Err(format!("indices {:?} vs oracle {:?}", q.indices, indices));
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    let (got_cb, got_commit) = (q.codebook_loss.value().item(), q.commitment_loss.value().item());
    if !close(got_cb, cb) || !close(got_commit, commit) {
        return Err(format!("losses ({got_cb}, {got_commit}) vs oracle ({cb}, {commit})"));
    }
    let snapped: Vec<f64> = indices.iter().flat_map(|&k| case.codebook[k * case.dim..(k + 1) * case.dim].to_vec()).collect();
    if q.quantized.value().data() != snapped.as_slice() {
        return Err("quantized values differ from the selected codes".into());
    }
    Ok(())
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// One random composite exercising the straight-through and stop-gradient
/// contracts. Every comparison is exact.
pub fn gradient_contracts_hold(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, k) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    let x0 = random_tensor(&mut rng, &[n, d]);
    let w0 = random_tensor(&mut rng, &[d, d]);
    let u0 = random_tensor(&mut rng, &[d, d]);
    let c0 = random_tensor(&mut rng, &[n, d]);
    let fail = |what: &str| Err(format!("seed {seed}: {what}"));

    // Straight-through: value of the forward branch, gradient of the carrier.
    let g = Graph::new();
    let (x, w, u, c) = (g.param(x0.clone()).unwrap(), g.param(w0.clone()).unwrap(), g.param(u0.clone()).unwrap(), g.constant(c0.clone()).unwrap());
    let fwd = x.matmul(w).unwrap().tanh().unwrap();
    let carrier = x.matmul(u).unwrap().sigmoid().unwrap();
    let y = straight_through(fwd, carrier).unwrap();
    if y.value() != fwd.value() {
        return fail("straight-through value differs from its forward branch");
    }
    let grads = g.backward(y.mul(c).unwrap().sum().unwrap()).unwrap();
    let ref_graph = Graph::new();
    let (rx, ru, rc) = (ref_graph.param(x0.clone()).unwrap(), ref_graph.param(u0.clone()).unwrap(), ref_graph.constant(c0.clone()).unwrap());
    let ref_loss = rx.matmul(ru).unwrap().sigmoid().unwrap().mul(rc).unwrap().sum().unwrap();
    let ref_grads = ref_graph.backward(ref_loss).unwrap();
    if grads.wrt(x) != ref_grads.wrt(rx) || grads.wrt(u) != ref_grads.wrt(ru) {
        return fail("straight-through gradient differs from the carrier's");
    }
    if grads.reached(w) || grads.wrt(w).data().iter().any(|&v| v != 0.0) {
        return fail("gradient leaked into the forward branch");
    }

    // Stop-gradient: a product with a blocked factor.
    let g = Graph::new();
    let (x, w, u) = (g.param(x0.clone()).unwrap(), g.param(w0.clone()).unwrap(), g.param(u0.clone()).unwrap());
    let blocked = stop_gradient(x.matmul(w).unwrap().tanh().unwrap()).unwrap();
    let loss = blocked.mul(x.matmul(u).unwrap()).unwrap().sum().unwrap();
    let grads = g.backward(loss).unwrap();
    if grads.wrt(w).data().iter().any(|&v| v != 0.0) {
        return fail("gradient leaked through stop_gradient");
    }
    let ref_graph = Graph::new();
    let (rx, ru) = (ref_graph.param(x0.clone()).unwrap(), ref_graph.param(u0.clone()).unwrap());
    let frozen = ref_graph.constant(blocked.value()).unwrap();
    let ref_grads = ref_graph.backward(frozen.mul(rx.matmul(ru).unwrap()).unwrap().sum().unwrap()).unwrap();
    if grads.wrt(x) != ref_grads.wrt(rx) || grads.wrt(u) != ref_grads.wrt(ru) {
        return fail("stop_gradient changed the unblocked gradient");
    }

    // Quantizer: the task term never reaches the codebook.
    let g = Graph::new();
    let h = g.param(random_tensor(&mut rng, &[n, d])).unwrap();
    let e = g.param(random_tensor(&mut rng, &[k, d])).unwrap();
    let q = quantize(h, e, 1, 0.25, true).unwrap();
    let target = g.constant(random_tensor(&mut rng, &[n, d])).unwrap();
    let task = q.quantized.sub(target).unwrap().sq_l2().unwrap();
    let task_grads = g.backward(task).unwrap();
    if task_grads.wrt(e).data().iter().any(|&v| v != 0.0) {
        return fail("task loss reached the codebook");
    }
    if !task_grads.reached(h) {
        return fail("task loss did not reach the sender");
    }
    let commit_grads = g.backward(q.commitment_loss).unwrap();
    if commit_grads.wrt(e).data().iter().any(|&v| v != 0.0) {
        return fail("commitment loss reached the codebook");
    }
    let cb_grads = g.backward(q.codebook_loss).unwrap();
    if cb_grads.wrt(h).data().iter().any(|&v| v != 0.0) {
        return fail("codebook loss reached the sender");
    }
    Ok(())
}
