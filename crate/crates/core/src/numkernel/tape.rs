//! Eager expression graph with reverse-mode differentiation.
//!
//! Ops evaluate as they are recorded; the tape is replayed in reverse for
//! gradients. The op set is closed and small so the finite-difference oracle
//! in [`super::fdcheck`] can cover it exhaustively. Tapes are append-only and
//! acyclic by construction (an op may only reference earlier nodes).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::tensor::Tensor;
use super::{KernelError, ParamSet};

static GRAPH_COUNTER: AtomicU32 = AtomicU32::new(1);

/// Handle to a value on a specific graph's tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId {
    graph: u32,
    idx: u32,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(ValueId, ValueId),
    Add(ValueId, ValueId),
    AddRow(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    AddScalar(ValueId),
    Tanh(ValueId),
    Sigmoid(ValueId),
    Relu(ValueId),
    Exp(ValueId),
    Abs(ValueId),
    Clamp(ValueId, f64, f64),
    SumAll(ValueId),
    MeanAll(ValueId),
    ConcatCols(Vec<ValueId>),
    SliceCols(ValueId, usize, usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    params: Vec<(String, ValueId)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: GRAPH_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<ValueId, KernelError> {
        value.validate_finite(op_name(&op))?;
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { op, value });
        Ok(ValueId { graph: self.id, idx })
    }

    fn node(&self, id: ValueId) -> Result<&Node, KernelError> {
        if id.graph != self.id || id.idx as usize >= self.nodes.len() {
            return Err(KernelError::NotOnTape);
        }
        Ok(&self.nodes[id.idx as usize])
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.idx as usize].value
    }

    /// Record an input leaf (activations, samples, conditioning).
    pub fn input(&mut self, t: Tensor) -> Result<ValueId, KernelError> {
        self.push(Op::Leaf, t)
    }

    /// Record a named parameter leaf; its gradient is retrievable by name.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<ValueId, KernelError> {
        let t = params.get(name)?.clone();
        let id = self.push(Op::Leaf, t)?;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, KernelError> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, KernelError> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), value)
    }

    /// Broadcast add of a row vector `[n]` onto every row of `[m, n]`.
    pub fn add_row(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, KernelError> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape().len() != 2 || tb.shape().len() != 1 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("add_row", ta, tb));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = ta.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push(Op::AddRow(a, b), value)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, KernelError> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, KernelError> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId, KernelError> {
        let value = self.map(a, |x| c * x)?;
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_scalar(&mut self, a: ValueId, c: f64) -> Result<ValueId, KernelError> {
        let value = self.map(a, |x| x + c)?;
        self.push(Op::AddScalar(a), value)
    }

    pub fn tanh(&mut self, a: ValueId) -> Result<ValueId, KernelError> {
        let value = self.map(a, f64::tanh)?;
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId, KernelError> {
        let value = self.map(a, sigmoid)?;
        self.push(Op::Sigmoid(a), value)
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId, KernelError> {
        let value = self.map(a, |x| x.max(0.0))?;
        self.push(Op::Relu(a), value)
    }

    pub fn exp(&mut self, a: ValueId) -> Result<ValueId, KernelError> {
        let value = self.map(a, f64::exp)?;
        self.push(Op::Exp(a), value)
    }

    pub fn abs(&mut self, a: ValueId) -> Result<ValueId, KernelError> {
        let value = self.map(a, f64::abs)?;
        self.push(Op::Abs(a), value)
    }

    pub fn clamp(&mut self, a: ValueId, lo: f64, hi: f64) -> Result<ValueId, KernelError> {
        let value = self.map(a, |x| x.clamp(lo, hi))?;
        self.push(Op::Clamp(a, lo, hi), value)
    }

    pub fn sum_all(&mut self, a: ValueId) -> Result<ValueId, KernelError> {
        let s: f64 = self.node(a)?.value.data().iter().sum();
        let value = Tensor::scalar(s)?;
        self.push(Op::SumAll(a), value)
    }

    pub fn mean_all(&mut self, a: ValueId) -> Result<ValueId, KernelError> {
        let t = &self.node(a)?.value;
        let s: f64 = t.data().iter().sum();
        let value = Tensor::scalar(s / t.numel() as f64)?;
        self.push(Op::MeanAll(a), value)
    }

    /// Concatenate along the trailing axis. Inputs must share every other dim.
    pub fn concat_cols(&mut self, ids: &[ValueId]) -> Result<ValueId, KernelError> {
        if ids.is_empty() {
            return Err(KernelError::ShapeMismatch {
                context: "concat_cols",
                expected: "at least one input".into(),
                got: "0".into(),
            });
        }
        let rank = self.node(ids[0])?.value.shape().len();
        let rows = self.node(ids[0])?.value.rows();
        let mut total = 0usize;
        for &id in ids {
            let t = &self.node(id)?.value;
            if t.shape().len() != rank || t.rows() != rows {
                return Err(KernelError::ShapeMismatch {
                    context: "concat_cols",
                    expected: format!("rank {rank}, {rows} rows"),
                    got: format!("{:?}", t.shape()),
                });
            }
            total += t.cols();
        }
        let mut out = vec![0.0; rows * total];
        let mut col = 0usize;
        for &id in ids {
            let t = &self.nodes[id.idx as usize].value;
            let n = t.cols();
            for i in 0..rows {
                out[i * total + col..i * total + col + n]
                    .copy_from_slice(&t.data()[i * n..(i + 1) * n]);
            }
            col += n;
        }
        let value = if rank == 1 {
            Tensor::vector(out)?
        } else {
            Tensor::matrix(rows, total, out)?
        };
        self.push(Op::ConcatCols(ids.to_vec()), value)
    }

    /// Slice `len` trailing-axis entries starting at `start`.
    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId, KernelError> {
        let t = &self.node(a)?.value;
        let (rows, cols) = (t.rows(), t.cols());
        if start + len > cols {
            return Err(KernelError::ShapeMismatch {
                context: "slice_cols",
                expected: format!("start+len <= {cols}"),
                got: format!("{}", start + len),
            });
        }
        let rank = t.shape().len();
        let mut out = vec![0.0; rows * len];
        for i in 0..rows {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&t.data()[i * cols + start..i * cols + start + len]);
        }
        let value = if rank == 1 {
            Tensor::vector(out)?
        } else {
            Tensor::matrix(rows, len, out)?
        };
        self.push(Op::SliceCols(a, start, len), value)
    }

    // ── composite conveniences ───────────────────────────────────────────

    /// Row-sum of squared differences, averaged over rows: mean_i ‖a_i − b_i‖².
    pub fn mse_rowsum(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, KernelError> {
        let rows = self.node(a)?.value.rows() as f64;
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let s = self.sum_all(sq)?;
        self.scale(s, 1.0 / rows)
    }

    /// Mean absolute difference over all entries.
    pub fn mae_all(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, KernelError> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d)?;
        self.mean_all(ad)
    }

    // ── reverse pass ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Gradients for any leaf or
    /// intermediate are then available from the returned [`Backward`].
    pub fn backward(&self, root: ValueId) -> Result<Backward, KernelError> {
        self.sweep(root, None)
    }

    /// Reverse sweep restricted to the ancestors of `wrt`: adjoints are only
    /// propagated along paths that can reach a requested leaf, skipping e.g.
    /// weight-gradient matmuls when only an input gradient is wanted.
    pub fn backward_wrt(&self, root: ValueId, wrt: &[ValueId]) -> Result<Backward, KernelError> {
        let mut needed = vec![false; self.nodes.len()];
        for id in wrt {
            if id.graph != self.id || id.idx as usize >= self.nodes.len() {
                return Err(KernelError::NotOnTape);
            }
            needed[id.idx as usize] = true;
        }
        // a node's adjoint matters iff one of its inputs (transitively) is
        // wanted; inputs always precede the node on the tape
        for idx in 0..self.nodes.len() {
            if needed[idx] {
                continue;
            }
            needed[idx] = self.inputs_of(idx).iter().any(|i| needed[i.idx as usize]);
        }
        self.sweep(root, Some(needed))
    }

    fn inputs_of(&self, idx: usize) -> Vec<ValueId> {
        match &self.nodes[idx].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::Clamp(a, _, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SliceCols(a, _, _) => vec![*a],
            Op::ConcatCols(ids) => ids.clone(),
        }
    }

    fn sweep(&self, root: ValueId, needed: Option<Vec<bool>>) -> Result<Backward, KernelError> {
        let root_node = self.node(root)?;
        if root_node.value.numel() != 1 {
            return Err(KernelError::NonScalarRoot { shape: root_node.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.idx as usize] = Some(vec![1.0]);

        for idx in (0..=root.idx as usize).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads, needed.as_deref());
            grads[idx] = Some(g);
        }
        Ok(Backward { graph: self.id, grads })
    }

    fn accumulate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        needed: Option<&[bool]>,
    ) {
        let node = &self.nodes[idx];
        let wanted = |id: ValueId| needed.map_or(true, |n| n[id.idx as usize]);
        let mut add_to = |id: ValueId, contrib: Vec<f64>| {
            let slot = &mut grads[id.idx as usize];
            match slot {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.idx as usize].value;
                let tb = &self.nodes[b.idx as usize].value;
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wanted(*a) {
                    add_to(*a, matmul_nt(g, tb.data(), m, n, k));
                }
                if wanted(*b) {
                    add_to(*b, matmul_tn(ta.data(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                if wanted(*a) {
                    add_to(*a, g.to_vec());
                }
                if wanted(*b) {
                    add_to(*b, g.to_vec());
                }
            }
            Op::AddRow(a, b) => {
                if wanted(*a) {
                    add_to(*a, g.to_vec());
                }
                if wanted(*b) {
                    let ta = &self.nodes[a.idx as usize].value;
                    let (m, n) = (ta.shape()[0], ta.shape()[1]);
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    add_to(*b, db);
                }
            }
            Op::Sub(a, b) => {
                if wanted(*a) {
                    add_to(*a, g.to_vec());
                }
                if wanted(*b) {
                    add_to(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let ta = &self.nodes[a.idx as usize].value;
                let tb = &self.nodes[b.idx as usize].value;
                if wanted(*a) {
                    add_to(*a, g.iter().zip(tb.data()).map(|(gv, bv)| gv * bv).collect());
                }
                if wanted(*b) {
                    add_to(*b, g.iter().zip(ta.data()).map(|(gv, av)| gv * av).collect());
                }
            }
            Op::Scale(a, c) => {
                if wanted(*a) {
                    add_to(*a, g.iter().map(|v| v * c).collect())
                }
            }
            Op::AddScalar(a) => {
                if wanted(*a) {
                    add_to(*a, g.to_vec())
                }
            }
            Op::Tanh(a) => {
                if wanted(*a) {
                    let y = node.value.data();
                    add_to(*a, g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect());
                }
            }
            Op::Sigmoid(a) => {
                if wanted(*a) {
                    let y = node.value.data();
                    add_to(*a, g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect());
                }
            }
            Op::Relu(a) => {
                if wanted(*a) {
                    let x = self.nodes[a.idx as usize].value.data();
                    add_to(
                        *a,
                        g.iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect(),
                    );
                }
            }
            Op::Exp(a) => {
                if wanted(*a) {
                    let y = node.value.data();
                    add_to(*a, g.iter().zip(y).map(|(gv, yv)| gv * yv).collect());
                }
            }
            Op::Abs(a) => {
                if wanted(*a) {
                    let x = self.nodes[a.idx as usize].value.data();
                    add_to(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(gv, xv)| match xv.partial_cmp(&0.0) {
                                Some(std::cmp::Ordering::Greater) => *gv,
                                Some(std::cmp::Ordering::Less) => -*gv,
                                _ => 0.0,
                            })
                            .collect(),
                    );
                }
            }
            Op::Clamp(a, lo, hi) => {
                if wanted(*a) {
                    let x = self.nodes[a.idx as usize].value.data();
                    add_to(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(gv, xv)| if *xv > *lo && *xv < *hi { *gv } else { 0.0 })
                            .collect(),
                    );
                }
            }
            Op::SumAll(a) => {
                if wanted(*a) {
                    let n = self.nodes[a.idx as usize].value.numel();
                    add_to(*a, vec![g[0]; n]);
                }
            }
            Op::MeanAll(a) => {
                if wanted(*a) {
                    let n = self.nodes[a.idx as usize].value.numel();
                    add_to(*a, vec![g[0] / n as f64; n]);
                }
            }
            Op::ConcatCols(ids) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut col = 0usize;
                for id in ids {
                    let n = self.nodes[id.idx as usize].value.cols();
                    if wanted(*id) {
                        let mut part = vec![0.0; rows * n];
                        for i in 0..rows {
                            part[i * n..(i + 1) * n]
                                .copy_from_slice(&g[i * total + col..i * total + col + n]);
                        }
                        add_to(*id, part);
                    }
                    col += n;
                }
            }
            Op::SliceCols(a, start, len) => {
                if wanted(*a) {
                    let ta = &self.nodes[a.idx as usize].value;
                    let (rows, cols) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        da[i * cols + start..i * cols + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    add_to(*a, da);
                }
            }
        }
    }

    /// Gradients of every registered parameter leaf, keyed by name.
    pub fn param_grads(&self, bw: &Backward) -> Result<BTreeMap<String, Tensor>, KernelError> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let g = bw.grad_of(self, *id)?;
            match out.entry(name.clone()) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    // same param used at several graph sites: gradients add
                    let acc = e.get_mut();
                    let summed: Vec<f64> =
                        acc.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
                    *acc = Tensor::new(acc.shape().to_vec(), summed)?;
                }
            }
        }
        Ok(out)
    }

    fn zip(
        &self,
        ctx: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, KernelError> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(ctx, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: ValueId, f: impl Fn(f64) -> f64) -> Result<Tensor, KernelError> {
        let ta = &self.node(a)?.value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }
}

/// Result of a reverse sweep. Holds per-node adjoints.
pub struct Backward {
    graph: u32,
    grads: Vec<Option<Vec<f64>>>,
}

impl Backward {
    /// Gradient of the swept root w.r.t. `id` (zeros if `id` did not
    /// influence the root).
    pub fn grad_of(&self, graph: &Graph, id: ValueId) -> Result<Tensor, KernelError> {
        if id.graph != self.graph || id.graph != graph.id {
            return Err(KernelError::NotOnTape);
        }
        let shape = graph.nodes[id.idx as usize].value.shape().to_vec();
        match &self.grads[id.idx as usize] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Ok(Tensor::zeros(shape)),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(context: &'static str, a: &Tensor, b: &Tensor) -> KernelError {
    KernelError::ShapeMismatch {
        context,
        expected: format!("compatible with {:?}", a.shape()),
        got: format!("{:?}", b.shape()),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Relu(..) => "relu",
        Op::Exp(..) => "exp",
        Op::Abs(..) => "abs",
        Op::Clamp(..) => "clamp",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
    }
}

/// Work threshold above which matmuls fan out across rows. Row-parallel
/// execution keeps each output row's accumulation order fixed, so results
/// stay bit-identical to the serial path.
const PAR_FLOP_THRESHOLD: usize = 1 << 20;

fn mm_row(a_row: &[f64], b: &[f64], k: usize, n: usize, c_row: &mut [f64]) {
    for (l, &aval) in a_row.iter().enumerate().take(k) {
        if aval == 0.0 {
            continue;
        }
        let brow = &b[l * n..(l + 1) * n];
        for j in 0..n {
            c_row[j] += aval * brow[j];
        }
    }
}

/// C = A·B with A `[m,k]`, B `[k,n]`, row-major.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        use rayon::prelude::*;
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| {
            mm_row(&a[i * k..(i + 1) * k], b, k, n, crow);
        });
    } else {
        for i in 0..m {
            mm_row(&a[i * k..(i + 1) * k], b, k, n, &mut c[i * n..(i + 1) * n]);
        }
    }
    c
}

/// C = A·Bᵀ with A `[m,n]`, B `[k,n]` → C `[m,k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    let row = |i: usize, crow: &mut [f64]| {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            crow[j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        use rayon::prelude::*;
        c.par_chunks_mut(k).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for i in 0..m {
            row(i, &mut c[i * k..(i + 1) * k]);
        }
    }
    c
}

/// C = Aᵀ·B with A `[m,k]`, B `[m,n]` → C `[k,n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    let row = |l: usize, crow: &mut [f64]| {
        for i in 0..m {
            let aval = a[i * k + l];
            if aval == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aval * brow[j];
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        use rayon::prelude::*;
        c.par_chunks_mut(n).enumerate().for_each(|(l, crow)| row(l, crow));
    } else {
        for l in 0..k {
            row(l, &mut c[l * n..(l + 1) * n]);
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>) -> Tensor {
        Tensor::vector(v).unwrap()
    }

    #[test]
    fn elementwise_square_forward() {
        let mut g = Graph::new();
        let x = g.input(t(vec![3.0])).unwrap();
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let a = g.input(Tensor::matrix(2, 2, vec![1.5, -2.0, 0.25, 7.0]).unwrap()).unwrap();
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y).data(), g.value(a).data());
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.input(t(vec![0.0])).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn grad_of_square_is_two_x() {
        let mut g = Graph::new();
        let x = g.input(t(vec![3.0])).unwrap();
        let y = g.mul(x, x).unwrap();
        let bw = g.backward(y).unwrap();
        assert_eq!(bw.grad_of(&g, x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn grad_of_unused_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.input(t(vec![3.0])).unwrap();
        let c = g.input(t(vec![11.0])).unwrap();
        let y = g.mul(x, x).unwrap();
        let bw = g.backward(y).unwrap();
        assert_eq!(bw.grad_of(&g, c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(KernelError::NonScalarRoot { .. })));
    }

    #[test]
    fn foreign_handle_is_not_on_tape() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let x1 = g1.input(t(vec![1.0])).unwrap();
        let _x2 = g2.input(t(vec![1.0])).unwrap();
        assert!(matches!(g2.matmul(x1, x1), Err(KernelError::NotOnTape)));
    }

    #[test]
    fn forward_is_pure_and_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let x = g.input(Tensor::matrix(2, 3, vec![0.1, -0.7, 2.0, 0.33, 1.25, -0.5]).unwrap()).unwrap();
            let w = g.input(Tensor::matrix(3, 2, vec![1.0, 0.5, -0.25, 0.75, 2.0, -1.0]).unwrap()).unwrap();
            let h = g.matmul(x, w).unwrap();
            let y = g.tanh(h).unwrap();
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shared_param_gradients_accumulate() {
        // y = w·x + w·x = 2wx  ⇒ dy/dw = 2x
        let mut params = ParamSet::new();
        params.insert("w", t(vec![1.5])).unwrap();
        let mut g = Graph::new();
        let w1 = g.param(&params, "w").unwrap();
        let w2 = g.param(&params, "w").unwrap();
        let x = g.input(t(vec![4.0])).unwrap();
        let p1 = g.mul(w1, x).unwrap();
        let p2 = g.mul(w2, x).unwrap();
        let y = g.add(p1, p2).unwrap();
        let y = g.sum_all(y).unwrap();
        let bw = g.backward(y).unwrap();
        let grads = g.param_grads(&bw).unwrap();
        assert_eq!(grads["w"].data(), &[8.0]);
    }

    #[test]
    fn concat_slice_round_trip_grad() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = g.input(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap()).unwrap();
        let cat = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.slice_cols(cat, 2, 1).unwrap();
        let s = g.sum_all(back).unwrap();
        let bw = g.backward(s).unwrap();
        assert_eq!(bw.grad_of(&g, b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(bw.grad_of(&g, a).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn parallel_matmul_is_bit_identical_to_serial() {
        // sizes above the fan-out threshold
        let (m, k, n) = (80, 130, 128);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 1000) as f64 - 500.0) / 250.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 53 % 997) as f64 - 498.0) / 300.0).collect();
        let fast = matmul_raw(&a, &b, m, k, n);
        let mut slow = vec![0.0; m * n];
        for i in 0..m {
            mm_row(&a[i * k..(i + 1) * k], &b, k, n, &mut slow[i * n..(i + 1) * n]);
        }
        assert_eq!(
            fast.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            slow.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        // d(f+g)/dx == df/dx + dg/dx for f = x², g = tanh(x)
        let grad_of = |build: &dyn Fn(&mut Graph, ValueId) -> ValueId, x0: f64| {
            let mut g = Graph::new();
            let x = g.input(t(vec![x0])).unwrap();
            let y = build(&mut g, x);
            let y = g.sum_all(y).unwrap();
            let bw = g.backward(y).unwrap();
            bw.grad_of(&g, x).unwrap().data()[0]
        };
        let f = |g: &mut Graph, x: ValueId| g.mul(x, x).unwrap();
        let h = |g: &mut Graph, x: ValueId| g.tanh(x).unwrap();
        let fh = |g: &mut Graph, x: ValueId| {
            let a = g.mul(x, x).unwrap();
            let b = g.tanh(x).unwrap();
            g.add(a, b).unwrap()
        };
        for &x0 in &[0.3, -1.2, 2.0] {
            let lhs = grad_of(&fh, x0);
            let rhs = grad_of(&f, x0) + grad_of(&h, x0);
            assert!((lhs - rhs).abs() < 1e-14);
        }
    }
}
