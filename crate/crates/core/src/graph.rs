//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles that
//! belong to it. Build a fresh graph for every forward pass, call
//! [`Graph::backward`] on a scalar root, and read gradients out of the
//! returned [`Gradients`].
//!
//! Non-differentiable decisions made during a forward pass (nearest-code
//! indices, top-K masks, stop-gradient values, straight-through offsets) go
//! through [`Graph::pin`]. A recording graph keeps them, and a replaying
//! graph substitutes them, which turns a forward pass into the smooth
//! surrogate whose true derivative is what `backward` computes. Finite
//! difference checks use that surrogate.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Softmax(usize),
    LogSoftmax(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    SqL2(usize),
    Dropout { input: usize, mask: Vec<f64> },
    StopGradient,
    StraightThrough { carrier: usize },
    GatherRows { table: usize, indices: Vec<usize> },
    SqDist(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Values captured by a recording graph, in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pins(Vec<Vec<f64>>);

impl Pins {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Default)]
enum PinMode {
    #[default]
    Off,
    Record(Vec<Vec<f64>>),
    Replay {
        pins: Vec<Vec<f64>>,
        cursor: usize,
    },
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    pins: RefCell<PinMode>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records every pinned value.
    pub fn recording() -> Self {
        Self { pins: RefCell::new(PinMode::Record(Vec::new())), ..Self::default() }
    }

    /// A graph that replays pinned values captured by a recording graph.
    pub fn replaying(pins: Pins) -> Self {
        Self { pins: RefCell::new(PinMode::Replay { pins: pins.0, cursor: 0 }), ..Self::default() }
    }

    /// Takes the values recorded so far.
    pub fn take_pins(&self) -> Pins {
        match &mut *self.pins.borrow_mut() {
            PinMode::Record(v) => Pins(std::mem::take(v)),
            _ => Pins::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Routes a non-differentiable value through the pin mechanism.
    ///
    /// When replaying, `fresh` is not called and the recorded value is
    /// returned instead.
    pub fn pin(&self, fresh: impl FnOnce() -> Vec<f64>) -> Vec<f64> {
        let mut mode = self.pins.borrow_mut();
        match &mut *mode {
            PinMode::Off => fresh(),
            PinMode::Record(v) => {
                let value = fresh();
                v.push(value.clone());
                value
            }
            PinMode::Replay { pins, cursor } => {
                let value = pins.get(*cursor).cloned().expect("replay graph ran out of pinned values; forward pass diverged from recording");
                *cursor += 1;
                value
            }
        }
    }

    /// Pins a list of indices.
    pub fn pin_indices(&self, fresh: impl FnOnce() -> Vec<usize>) -> Vec<usize> {
        self.pin(|| fresh().into_iter().map(|i| i as f64).collect()).into_iter().map(|v| v as usize).collect()
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::Numeric("leaf input".into()));
        }
        Ok(self.push_node(value, Op::Leaf, requires_grad))
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn push(&self, name: &str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::Numeric(name.into()));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_node(value, op, requires_grad))
    }

    fn check_owner(&self, v: &Var<'_>) {
        assert!(std::ptr::eq(self, v.graph), "Var belongs to a different graph");
    }

    /// Reverse-mode sweep from a one-element root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_owner(&root);
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::Contract(format!("backward root must be scalar, got shape {:?}", nodes[root.id].value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads.into_iter().enumerate().map(|(i, g)| if nodes[i].requires_grad { g } else { None }).collect();
        Ok(Gradients { grads, shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, contrib: impl FnOnce(&mut [f64]), len: usize) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    contrib(slot);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let needs = |i: usize| nodes[i].requires_grad;
    let len = |i: usize| nodes[i].value.numel();
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::Add(a, b) => {
            for &i in [a, b] {
                if needs(i) {
                    accumulate(grads, i, |s| add_into(s, g), len(i));
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, |s| add_into(s, g), len(*a));
            }
            if needs(*b) {
                accumulate(grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g), len(*b));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let bv = val(*b);
                accumulate(grads, *a, |s| s.iter_mut().zip(g.iter().zip(bv)).for_each(|(s, (g, b))| *s += g * b), len(*a));
            }
            if needs(*b) {
                let av = val(*a);
                accumulate(grads, *b, |s| s.iter_mut().zip(g.iter().zip(av)).for_each(|(s, (g, a))| *s += g * a), len(*b));
            }
        }
        Op::Scale(a, f) => {
            accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += f * g), len(*a));
        }
        Op::Matmul(a, b) => {
            let sa = nodes[*a].value.shape();
            let sb = nodes[*b].value.shape();
            let (batch, n, k) = mat_dims(sa);
            let m = *sb.last().unwrap();
            let shared = sb.len() == 2;
            if needs(*a) {
                let bv = val(*b);
                accumulate(
                    grads,
                    *a,
                    |s| {
                        for t in 0..batch {
                            let bo = if shared { 0 } else { t * k * m };
                            // dA = dC · Bᵀ
                            gemm_nt(&mut s[t * n * k..(t + 1) * n * k], &g[t * n * m..(t + 1) * n * m], &bv[bo..bo + k * m], n, m, k);
                        }
                    },
                    len(*a),
                );
            }
            if needs(*b) {
                let av = val(*a);
                accumulate(
                    grads,
                    *b,
                    |s| {
                        for t in 0..batch {
                            let bo = if shared { 0 } else { t * k * m };
                            // dB = Aᵀ · dC
                            gemm_tn(&mut s[bo..bo + k * m], &av[t * n * k..(t + 1) * n * k], &g[t * n * m..(t + 1) * n * m], k, n, m);
                        }
                    },
                    len(*b),
                );
            }
        }
        Op::Transpose(a) => {
            let (batch, r, c) = mat_dims(nodes[*a].value.shape());
            accumulate(
                grads,
                *a,
                |s| {
                    // output is [c, r]; gradient maps back to [r, c]
                    for t in 0..batch {
                        let base = t * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                s[base + i * c + j] += g[base + j * r + i];
                            }
                        }
                    }
                },
                len(*a),
            );
        }
        Op::Reshape(a) => accumulate(grads, *a, |s| add_into(s, g), len(*a)),
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let out_chunk = out_shape[*axis] * inner;
            let mut offset = 0;
            for &i in inputs {
                let chunk = nodes[i].value.shape()[*axis] * inner;
                if needs(i) {
                    accumulate(
                        grads,
                        i,
                        |s| {
                            for o in 0..outer {
                                add_into(&mut s[o * chunk..(o + 1) * chunk], &g[o * out_chunk + offset..o * out_chunk + offset + chunk]);
                            }
                        },
                        len(i),
                    );
                }
                offset += chunk;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = nodes[*input].value.shape();
            let out_shape = node.value.shape();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let in_chunk = in_shape[*axis] * inner;
            let out_chunk = out_shape[*axis] * inner;
            accumulate(
                grads,
                *input,
                |s| {
                    for o in 0..outer {
                        let dst = o * in_chunk + start * inner;
                        add_into(&mut s[dst..dst + out_chunk], &g[o * out_chunk..(o + 1) * out_chunk]);
                    }
                },
                len(*input),
            );
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let cols = *node.value.shape().last().unwrap();
            accumulate(
                grads,
                *a,
                |s| {
                    for ((s, y), g) in s.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                        for j in 0..cols {
                            s[j] += y[j] * (g[j] - dot);
                        }
                    }
                },
                len(*a),
            );
        }
        Op::LogSoftmax(a) => {
            let y = node.value.data();
            let cols = *node.value.shape().last().unwrap();
            accumulate(
                grads,
                *a,
                |s| {
                    for ((s, y), g) in s.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let total: f64 = g.iter().sum();
                        for j in 0..cols {
                            s[j] += g[j] - y[j].exp() * total;
                        }
                    }
                },
                len(*a),
            );
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accumulate(grads, *a, |s| s.iter_mut().zip(y.iter().zip(g)).for_each(|(s, (y, g))| *s += g * y * (1.0 - y)), len(*a));
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            accumulate(grads, *a, |s| s.iter_mut().zip(y.iter().zip(g)).for_each(|(s, (y, g))| *s += g * (1.0 - y * y)), len(*a));
        }
        Op::Relu(a) => {
            let x = val(*a);
            accumulate(
                grads,
                *a,
                |s| {
                    s.iter_mut().zip(x.iter().zip(g)).for_each(|(s, (x, g))| {
                        if *x > 0.0 {
                            *s += g
                        }
                    })
                },
                len(*a),
            );
        }
        Op::Sum(a) => accumulate(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0]), len(*a)),
        Op::Mean(a) => {
            let n = len(*a) as f64;
            accumulate(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0] / n), len(*a));
        }
        Op::SqL2(a) => {
            let x = val(*a);
            accumulate(grads, *a, |s| s.iter_mut().zip(x).for_each(|(s, x)| *s += 2.0 * x * g[0]), len(*a));
        }
        Op::Dropout { input, mask } => {
            accumulate(grads, *input, |s| s.iter_mut().zip(mask.iter().zip(g)).for_each(|(s, (m, g))| *s += m * g), len(*input));
        }
        Op::StraightThrough { carrier } => {
            if needs(*carrier) {
                accumulate(grads, *carrier, |s| add_into(s, g), len(*carrier));
            }
        }
        Op::GatherRows { table, indices } => {
            let d = nodes[*table].value.shape()[1];
            accumulate(
                grads,
                *table,
                |s| {
                    for (r, &idx) in indices.iter().enumerate() {
                        add_into(&mut s[idx * d..(idx + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                },
                len(*table),
            );
        }
        Op::SqDist(a, b) => {
            let sv = val(*a);
            let ev = val(*b);
            let d = nodes[*a].value.shape()[1];
            let l = nodes[*b].value.shape()[0];
            let n = nodes[*a].value.shape()[0];
            if needs(*a) {
                accumulate(
                    grads,
                    *a,
                    |s| {
                        for i in 0..n {
                            for j in 0..l {
                                let w = 2.0 * g[i * l + j];
                                for c in 0..d {
                                    s[i * d + c] += w * (sv[i * d + c] - ev[j * d + c]);
                                }
                            }
                        }
                    },
                    len(*a),
                );
            }
            if needs(*b) {
                accumulate(
                    grads,
                    *b,
                    |s| {
                        for i in 0..n {
                            for j in 0..l {
                                let w = 2.0 * g[i * l + j];
                                for c in 0..d {
                                    s[j * d + c] -= w * (sv[i * d + c] - ev[j * d + c]);
                                }
                            }
                        }
                    },
                    len(*b),
                );
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// (batch, rows, cols) view of a rank-2 or rank-3 shape.
fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [r, c] => (1, *r, *c),
        [b, r, c] => (*b, *r, *c),
        _ => unreachable!("matrix op on rank {}", shape.len()),
    }
}

/// out[n,m] += a[n,k] · b[k,m]
fn gemm_nn(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            row.iter_mut().zip(brow).for_each(|(o, b)| *o += aip * b);
        }
    }
}

/// out[n,m] += a[n,k] · b[m,k]ᵀ
fn gemm_nt(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k,m] += a[n,k]ᵀ · b[n,m]
fn gemm_tn(out: &mut [f64], a: &[f64], b: &[f64], k: usize, n: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            out[p * m..(p + 1) * m].iter_mut().zip(brow).for_each(|(o, b)| *o += aip * b);
        }
    }
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`. Nodes that do not
    /// require grad, or that the root does not depend on, get zeros.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = &self.shapes[var.id];
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient reached `var`.
    pub fn reached(&self, var: Var<'_>) -> bool {
        self.grads.get(var.id).is_some_and(Option::is_some)
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Runs `f` on this node's value without cloning it.
    pub fn with_value<T>(&self, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    fn same_graph(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.graph, other.graph), "Vars belong to different graphs");
    }

    fn elementwise(self, other: Var<'g>, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'g>> {
        self.same_graph(&other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(dim_err!("{name}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(a.shape(), data)?
        };
        self.graph.push(name, value, op, &[self.id, other.id])
    }

    fn unary(self, name: &str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'g>> {
        let value = self.with_value(|x| Tensor::new(x.shape(), x.data().iter().map(|v| f(*v)).collect()))?;
        self.graph.push(name, value, op, &[self.id])
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Scalar times tensor.
    pub fn scale(self, factor: f64) -> Result<Var<'g>> {
        self.unary("scale", |v| v * factor, Op::Scale(self.id, factor))
    }

    /// `[n,k]·[k,m]`, batched `[b,n,k]·[b,k,m]`, or `[b,n,k]·[k,m]` with a
    /// shared right operand.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (sa, sb) = (a.shape(), b.shape());
            let ok_rank = matches!((sa.len(), sb.len()), (2, 2) | (3, 3) | (3, 2));
            if !ok_rank {
                return Err(dim_err!("matmul: unsupported ranks {sa:?} x {sb:?}"));
            }
            let (batch, n, k) = mat_dims(sa);
            let (kb, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            if k != kb || (sb.len() == 3 && sb[0] != batch) {
                return Err(dim_err!("matmul: shapes {sa:?} x {sb:?} do not conform"));
            }
            let mut out = vec![0.0; batch * n * m];
            for t in 0..batch {
                let bo = if sb.len() == 2 { 0 } else { t * k * m };
                gemm_nn(&mut out[t * n * m..(t + 1) * n * m], &a.data()[t * n * k..(t + 1) * n * k], &b.data()[bo..bo + k * m], n, k, m);
            }
            let shape: Vec<usize> = if sa.len() == 2 { vec![n, m] } else { vec![batch, n, m] };
            Tensor::new(&shape, out)?
        };
        self.graph.push("matmul", value, Op::Matmul(self.id, other.id), &[self.id, other.id])
    }

    /// Swaps the last two dimensions of a rank-2 or rank-3 tensor.
    pub fn transpose(self) -> Result<Var<'g>> {
        let value = self.with_value(|x| {
            if !(2..=3).contains(&x.rank()) {
                return Err(dim_err!("transpose: rank {} unsupported", x.rank()));
            }
            let (batch, r, c) = mat_dims(x.shape());
            let mut out = vec![0.0; x.numel()];
            for t in 0..batch {
                let base = t * r * c;
                for i in 0..r {
                    for j in 0..c {
                        out[base + j * r + i] = x.data()[base + i * c + j];
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            let n = shape.len();
            shape.swap(n - 2, n - 1);
            Tensor::new(&shape, out)
        })?;
        self.graph.push("transpose", value, Op::Transpose(self.id), &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.with_value(|x| x.reshape(shape))?;
        self.graph.push("reshape", value, Op::Reshape(self.id), &[self.id])
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let value = self.with_value(|x| {
            let shape = x.shape();
            if axis >= shape.len() || len == 0 || start + len > shape[axis] {
                return Err(dim_err!("slice: axis {axis} range {start}..{} out of bounds for {shape:?}", start + len));
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let chunk = shape[axis] * inner;
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = o * chunk + start * inner;
                out.extend_from_slice(&x.data()[src..src + len * inner]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            Tensor::new(&out_shape, out)
        })?;
        self.graph.push("slice", value, Op::Slice { input: self.id, axis, start }, &[self.id])
    }

    pub fn softmax(self) -> Result<Var<'g>> {
        let value = self.with_value(|x| {
            let cols = *x.shape().last().ok_or_else(|| dim_err!("softmax on scalar"))?;
            Tensor::new(x.shape(), softmax_rows(x.data(), cols))
        })?;
        self.graph.push("softmax", value, Op::Softmax(self.id), &[self.id])
    }

    pub fn log_softmax(self) -> Result<Var<'g>> {
        let value = self.with_value(|x| {
            let cols = *x.shape().last().ok_or_else(|| dim_err!("log_softmax on scalar"))?;
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks(cols) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            Tensor::new(x.shape(), out)
        })?;
        self.graph.push("log_softmax", value, Op::LogSoftmax(self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        self.unary("tanh", f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary("relu", |v| v.max(0.0), Op::Relu(self.id))
    }

    fn reduce(self, name: &str, f: impl Fn(&[f64]) -> f64, op: Op) -> Result<Var<'g>> {
        let value = self.with_value(|x| Tensor::scalar(f(x.data())));
        self.graph.push(name, value, op, &[self.id])
    }

    pub fn sum(self) -> Result<Var<'g>> {
        self.reduce("sum", |d| d.iter().sum(), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        self.reduce("mean", |d| d.iter().sum::<f64>() / d.len() as f64, Op::Mean(self.id))
    }

    /// Sum of squares.
    pub fn sq_l2(self) -> Result<Var<'g>> {
        self.reduce("sq_l2", |d| d.iter().map(|v| v * v).sum(), Op::SqL2(self.id))
    }

    /// Inverted dropout: each entry is zeroed with probability `p` and the
    /// survivors are scaled by `1/(1-p)`. The mask is a pure function of
    /// `seed`. `p == 0` is the identity.
    pub fn dropout(self, p: f64, seed: u64) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(self);
        }
        let n = self.with_value(Tensor::numel);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let value = self.with_value(|x| Tensor::new(x.shape(), x.data().iter().zip(&mask).map(|(v, m)| v * m).collect()))?;
        self.graph.push("dropout", value, Op::Dropout { input: self.id, mask }, &[self.id])
    }
}

/// Concatenation along `axis`; all other dimensions must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
    let graph = first.graph;
    let value = {
        let nodes = graph.nodes.borrow();
        let shapes: Vec<&[usize]> = parts
            .iter()
            .map(|p| {
                first.same_graph(p);
                nodes[p.id].value.shape()
            })
            .collect();
        let base = shapes[0];
        if axis >= base.len() {
            return Err(dim_err!("concat: axis {axis} out of range for {base:?}"));
        }
        for s in &shapes {
            let ok = s.len() == base.len() && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(dim_err!("concat: shape {s:?} incompatible with {base:?} on axis {axis}"));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total_axis: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (p, s) in parts.iter().zip(&shapes) {
                let chunk = s[axis] * inner;
                out.extend_from_slice(&nodes[p.id].value.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total_axis;
        Tensor::new(&shape, out)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    graph.push("concat", value, Op::Concat { inputs: ids.clone(), axis }, &ids)
}

/// Identity on values, zero gradient.
pub fn stop_gradient(x: Var<'_>) -> Result<Var<'_>> {
    let graph = x.graph;
    let pinned = graph.pin(|| x.with_value(|v| v.data().to_vec()));
    let value = Tensor::new(&x.shape(), pinned)?;
    Ok(graph.push_node(value, Op::StopGradient, false))
}

/// Value of `forward_value`, gradient routed entirely to `grad_carrier`.
///
/// Equivalent to `grad_carrier + stop_gradient(forward_value - grad_carrier)`.
pub fn straight_through<'g>(forward_value: Var<'g>, grad_carrier: Var<'g>) -> Result<Var<'g>> {
    forward_value.same_graph(&grad_carrier);
    let graph = forward_value.graph;
    let value = {
        let nodes = graph.nodes.borrow();
        let (f, c) = (&nodes[forward_value.id].value, &nodes[grad_carrier.id].value);
        if f.shape() != c.shape() {
            return Err(dim_err!("straight_through: shapes {:?} and {:?} differ", f.shape(), c.shape()));
        }
        let offset = graph.pin(|| f.data().iter().zip(c.data()).map(|(f, c)| f - c).collect());
        if matches!(*graph.pins.borrow(), PinMode::Replay { .. }) {
            Tensor::new(c.shape(), c.data().iter().zip(&offset).map(|(c, o)| c + o).collect())?
        } else {
            f.clone()
        }
    };
    let op = Op::StraightThrough { carrier: grad_carrier.id };
    graph.push("straight_through", value, op, &[grad_carrier.id])
}

/// Rows of a `[rows, d]` table selected by `indices`, giving `[indices.len(), d]`.
pub fn gather_rows<'g>(table: Var<'g>, indices: &[usize]) -> Result<Var<'g>> {
    let value = table.with_value(|t| {
        if t.rank() != 2 {
            return Err(dim_err!("gather_rows: table must be rank 2, got {:?}", t.shape()));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(dim_err!("gather_rows: index {i} out of range for {rows} rows"));
            }
            out.extend_from_slice(t.row(i));
        }
        Tensor::new(&[indices.len(), d], out)
    })?;
    let op = Op::GatherRows { table: table.id, indices: indices.to_vec() };
    table.graph.push("gather_rows", value, op, &[table.id])
}

/// Pairwise squared Euclidean distances between rows: `[n,d] x [l,d] -> [n,l]`.
pub fn sq_dist<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    a.same_graph(&b);
    let value = {
        let nodes = a.graph.nodes.borrow();
        let (x, e) = (&nodes[a.id].value, &nodes[b.id].value);
        if x.rank() != 2 || e.rank() != 2 || x.shape()[1] != e.shape()[1] {
            return Err(dim_err!("sq_dist: shapes {:?} and {:?} do not conform", x.shape(), e.shape()));
        }
        let mut out = Vec::with_capacity(x.shape()[0] * e.shape()[0]);
        for r in x.rows() {
            for c in e.rows() {
                out.push(r.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum());
            }
        }
        Tensor::new(&[x.shape()[0], e.shape()[0]], out)?
    };
    a.graph.push("sq_dist", value, Op::SqDist(a.id, b.id), &[a.id, b.id])
}
