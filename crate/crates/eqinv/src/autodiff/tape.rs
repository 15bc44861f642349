//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass as a topologically ordered node list
//! and is rebuilt for every step. [`Tape::backward`] walks the list once in
//! reverse, accumulating adjoints; gradients land in the `grad` buffer of
//! every tensor that requires them and stay there until the caller resets
//! them, so separate sub-losses can be attributed explicitly.

use std::cell::RefCell;
use std::collections::HashMap;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{EqInvError, Result};

/// Inputs above this are clamped inside `exp` so forward values stay finite.
const EXP_MAX: f64 = 709.0;
/// Inputs below this are clamped inside `log` so forward values stay finite.
const LOG_MIN: f64 = f64::MIN_POSITIVE;
/// Added to every row norm before division in `l2_normalize_rows`.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    MatMulNN { m: usize, k: usize, n: usize },
    MatMulNT { m: usize, k: usize, n: usize },
    MatVec { m: usize, n: usize },
    Add,
    Sub,
    Mul,
    AddRowBroadcast,
    MulRowBroadcast,
    MulColBroadcast,
    Scale(f64),
    Offset,
    MulScalar,
    SubScalar,
    Exp,
    Log,
    Relu,
    Sum,
    Mean,
    Variance,
    L2NormalizeRows,
    SelectRows { indices: Vec<usize> },
    Row { index: usize },
    VecElement { index: usize },
    ConcatVecs { lens: Vec<usize> },
    ConcatRows { rows: Vec<usize> },
    StackScalars,
    LogSumExp,
    SoftmaxCrossEntropy { labels: Vec<usize> },
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
    /// Forward intermediates reused by backward (norms, probabilities, ...).
    saved: Vec<f64>,
}

/// Records one forward computation; see the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn shape_err(what: &str, detail: String) -> EqInvError {
    EqInvError::Shape(format!("{what}: {detail}"))
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn out(&self, data: Vec<f64>, shape: &[usize], inputs: &[&Tensor]) -> Tensor {
        let needs = inputs.iter().any(|t| t.needs_grad());
        Tensor::from_vec(data, shape).unwrap().requires_grad(needs)
    }

    fn record(&self, op: Op, inputs: &[&Tensor], output: &Tensor, saved: Vec<f64>) {
        if output.needs_grad() {
            self.nodes.borrow_mut().push(Node {
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                output: output.clone(),
                saved,
            });
        }
    }

    fn want_rank2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
        let shape = t.shape();
        match shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(shape_err(what, format!("expected rank-2, got {other:?}"))),
        }
    }

    fn want_rank1(t: &Tensor, what: &str) -> Result<usize> {
        let shape = t.shape();
        match shape.as_slice() {
            [n] => Ok(*n),
            other => Err(shape_err(what, format!("expected rank-1, got {other:?}"))),
        }
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// `a[m×k] · b[k×n] -> [m×n]`
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = Self::want_rank2(a, "matmul lhs")?;
        let (k2, n) = Self::want_rank2(b, "matmul rhs")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut data = vec![0.0; m * n];
        kernels::mm_nn(&a.data(), &b.data(), m, k, n, &mut data);
        let out = self.out(data, &[m, n], &[a, b]);
        self.record(Op::MatMulNN { m, k, n }, &[a, b], &out, vec![]);
        Ok(out)
    }

    /// `a[m×k] · b[n×k]ᵀ -> [m×n]`; used where weights are stored row-major
    /// per output unit.
    pub fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = Self::want_rank2(a, "matmul_nt lhs")?;
        let (n, k2) = Self::want_rank2(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("inner dims {k} vs {k2}")));
        }
        let mut data = vec![0.0; m * n];
        kernels::mm_nt(&a.data(), &b.data(), m, k, n, &mut data);
        let out = self.out(data, &[m, n], &[a, b]);
        self.record(Op::MatMulNT { m, k, n }, &[a, b], &out, vec![]);
        Ok(out)
    }

    /// `a[m×n] · v[n] -> [m]`
    pub fn matvec(&self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (m, n) = Self::want_rank2(a, "matvec lhs")?;
        let vn = Self::want_rank1(v, "matvec rhs")?;
        if n != vn {
            return Err(shape_err("matvec", format!("dims {n} vs {vn}")));
        }
        let mut data = vec![0.0; m];
        kernels::matvec(&a.data(), &v.data(), m, n, &mut data);
        let out = self.out(data, &[m], &[a, v]);
        self.record(Op::MatVec { m, n }, &[a, v], &out, vec![]);
        Ok(out)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(shape_err(what, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape(a, b, "add")?;
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        let out = self.out(data, &a.shape(), &[a, b]);
        self.record(Op::Add, &[a, b], &out, vec![]);
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape(a, b, "sub")?;
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
        let out = self.out(data, &a.shape(), &[a, b]);
        self.record(Op::Sub, &[a, b], &out, vec![]);
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape(a, b, "mul")?;
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        let out = self.out(data, &a.shape(), &[a, b]);
        self.record(Op::Mul, &[a, b], &out, vec![]);
        Ok(out)
    }

    /// `x[R×C] + v[C]` per row.
    pub fn add_row_broadcast(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (r, c) = Self::want_rank2(x, "add_row_broadcast lhs")?;
        let vc = Self::want_rank1(v, "add_row_broadcast rhs")?;
        if c != vc {
            return Err(shape_err("add_row_broadcast", format!("cols {c} vs {vc}")));
        }
        let vd = v.data();
        let data = x
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(vd.iter()).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        drop(vd);
        let out = self.out(data, &[r, c], &[x, v]);
        self.record(Op::AddRowBroadcast, &[x, v], &out, vec![]);
        Ok(out)
    }

    /// `x[R×C] ∘ v[C]` per row; the mask application primitive.
    pub fn mul_row_broadcast(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (r, c) = Self::want_rank2(x, "mul_row_broadcast lhs")?;
        let vc = Self::want_rank1(v, "mul_row_broadcast rhs")?;
        if c != vc {
            return Err(shape_err("mul_row_broadcast", format!("cols {c} vs {vc}")));
        }
        let vd = v.data();
        let data = x
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(vd.iter()).map(|(a, b)| a * b).collect::<Vec<_>>())
            .collect();
        drop(vd);
        let out = self.out(data, &[r, c], &[x, v]);
        self.record(Op::MulRowBroadcast, &[x, v], &out, vec![]);
        Ok(out)
    }

    /// `x[R×C]` with row i scaled by `u[i]`.
    pub fn mul_col_broadcast(&self, x: &Tensor, u: &Tensor) -> Result<Tensor> {
        let (r, c) = Self::want_rank2(x, "mul_col_broadcast lhs")?;
        let ur = Self::want_rank1(u, "mul_col_broadcast rhs")?;
        if r != ur {
            return Err(shape_err("mul_col_broadcast", format!("rows {r} vs {ur}")));
        }
        let ud = u.data();
        let data = x
            .data()
            .chunks_exact(c)
            .zip(ud.iter())
            .flat_map(|(row, ui)| row.iter().map(|a| a * ui).collect::<Vec<_>>())
            .collect();
        drop(ud);
        let out = self.out(data, &[r, c], &[x, u]);
        self.record(Op::MulColBroadcast, &[x, u], &out, vec![]);
        Ok(out)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        let data = x.data().iter().map(|v| v * c).collect();
        let out = self.out(data, &x.shape(), &[x]);
        self.record(Op::Scale(c), &[x], &out, vec![]);
        Ok(out)
    }

    /// Add a constant to every element.
    pub fn offset(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        let data = x.data().iter().map(|v| v + c).collect();
        let out = self.out(data, &x.shape(), &[x]);
        self.record(Op::Offset, &[x], &out, vec![]);
        Ok(out)
    }

    /// `x * s` where `s` is a single-element tensor broadcast over `x`.
    pub fn mul_scalar(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(shape_err("mul_scalar", format!("scalar has {} elements", s.numel())));
        }
        let sv = s.item();
        let data = x.data().iter().map(|v| v * sv).collect();
        let out = self.out(data, &x.shape(), &[x, s]);
        self.record(Op::MulScalar, &[x, s], &out, vec![]);
        Ok(out)
    }

    /// `x - s` where `s` is a single-element tensor broadcast over `x`.
    pub fn sub_scalar(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(shape_err("sub_scalar", format!("scalar has {} elements", s.numel())));
        }
        let sv = s.item();
        let data = x.data().iter().map(|v| v - sv).collect();
        let out = self.out(data, &x.shape(), &[x, s]);
        self.record(Op::SubScalar, &[x, s], &out, vec![]);
        Ok(out)
    }

    /// Elementwise exponential; inputs above 709 are clamped so the result
    /// stays finite (clamped coordinates get zero gradient).
    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|v| v.min(EXP_MAX).exp()).collect();
        let out = self.out(data, &x.shape(), &[x]);
        self.record(Op::Exp, &[x], &out, vec![]);
        Ok(out)
    }

    /// Elementwise natural log; inputs below the smallest positive normal
    /// are clamped so the result stays finite (clamped coordinates get zero
    /// gradient).
    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|v| v.max(LOG_MIN).ln()).collect();
        let out = self.out(data, &x.shape(), &[x]);
        self.record(Op::Log, &[x], &out, vec![]);
        Ok(out)
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|v| v.max(0.0)).collect();
        let out = self.out(data, &x.shape(), &[x]);
        self.record(Op::Relu, &[x], &out, vec![]);
        Ok(out)
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let total: f64 = x.data().iter().sum();
        let out = self.out(vec![total], &[1], &[x]);
        self.record(Op::Sum, &[x], &out, vec![]);
        Ok(out)
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        if x.numel() == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let total: f64 = x.data().iter().sum();
        let out = self.out(vec![total / x.numel() as f64], &[1], &[x]);
        self.record(Op::Mean, &[x], &out, vec![]);
        Ok(out)
    }

    /// Population variance over all elements (divide by count).
    pub fn variance(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel();
        if n == 0 {
            return Err(shape_err("variance", "empty tensor".into()));
        }
        let data = x.data();
        let mean: f64 = data.iter().sum::<f64>() / n as f64;
        let var: f64 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        drop(data);
        let out = self.out(vec![var], &[1], &[x]);
        self.record(Op::Variance, &[x], &out, vec![]);
        Ok(out)
    }

    /// Numerically stable log(Σ exp(x)) over a rank-1 tensor.
    pub fn log_sum_exp(&self, x: &Tensor) -> Result<Tensor> {
        let n = Self::want_rank1(x, "log_sum_exp")?;
        if n == 0 {
            return Err(shape_err("log_sum_exp", "empty tensor".into()));
        }
        let data = x.data();
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        drop(data);
        let out = self.out(vec![lse], &[1], &[x]);
        self.record(Op::LogSumExp, &[x], &out, vec![lse]);
        Ok(out)
    }

    // ── Shape / indexing ────────────────────────────────────────────────

    /// Rows of `x` in unit-norm form; every row norm gets +1e-12 before the
    /// division so zero rows map to zero.
    pub fn l2_normalize_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = Self::want_rank2(x, "l2_normalize_rows")?;
        let data = x.data();
        let mut out_data = vec![0.0; r * c];
        let mut norms = Vec::with_capacity(r);
        for (row, out_row) in data.chunks_exact(c).zip(out_data.chunks_exact_mut(c)) {
            let raw = kernels::dot(row, row).sqrt();
            norms.push(raw);
            let inv = 1.0 / (raw + NORM_EPS);
            for (o, v) in out_row.iter_mut().zip(row) {
                *o = v * inv;
            }
        }
        drop(data);
        let out = self.out(out_data, &[r, c], &[x]);
        self.record(Op::L2NormalizeRows, &[x], &out, norms);
        Ok(out)
    }

    /// Gather rows by index (duplicates allowed; gradients scatter-add).
    pub fn select_rows(&self, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = Self::want_rank2(x, "select_rows")?;
        for &i in indices {
            if i >= r {
                return Err(shape_err("select_rows", format!("index {i} out of {r} rows")));
            }
        }
        let data = x.data();
        let mut out_data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out_data.extend_from_slice(&data[i * c..(i + 1) * c]);
        }
        drop(data);
        let out = self.out(out_data, &[indices.len(), c], &[x]);
        self.record(Op::SelectRows { indices: indices.to_vec() }, &[x], &out, vec![]);
        Ok(out)
    }

    /// Single row of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        let (r, c) = Self::want_rank2(x, "row")?;
        if index >= r {
            return Err(shape_err("row", format!("index {index} out of {r} rows")));
        }
        let data = x.data()[index * c..(index + 1) * c].to_vec();
        let out = self.out(data, &[c], &[x]);
        self.record(Op::Row { index }, &[x], &out, vec![]);
        Ok(out)
    }

    /// Single element of a rank-1 tensor as a `[1]` tensor.
    pub fn vec_element(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        let n = Self::want_rank1(x, "vec_element")?;
        if index >= n {
            return Err(shape_err("vec_element", format!("index {index} out of {n}")));
        }
        let data = vec![x.data()[index]];
        let out = self.out(data, &[1], &[x]);
        self.record(Op::VecElement { index }, &[x], &out, vec![]);
        Ok(out)
    }

    /// Concatenate rank-1 tensors end to end.
    pub fn concat_vecs(&self, xs: &[&Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(shape_err("concat_vecs", "no inputs".into()));
        }
        let mut lens = Vec::with_capacity(xs.len());
        let mut data = Vec::new();
        for x in xs {
            lens.push(Self::want_rank1(x, "concat_vecs")?);
            data.extend_from_slice(&x.data());
        }
        let total = data.len();
        let out = self.out(data, &[total], xs);
        self.record(Op::ConcatVecs { lens }, xs, &out, vec![]);
        Ok(out)
    }

    /// Stack rank-2 tensors with equal column counts.
    pub fn concat_rows(&self, xs: &[&Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let (_, cols) = Self::want_rank2(xs[0], "concat_rows")?;
        let mut rows = Vec::with_capacity(xs.len());
        let mut data = Vec::new();
        for x in xs {
            let (r, c) = Self::want_rank2(x, "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("cols {c} vs {cols}")));
            }
            rows.push(r);
            data.extend_from_slice(&x.data());
        }
        let total_rows = rows.iter().sum();
        let out = self.out(data, &[total_rows, cols], xs);
        self.record(Op::ConcatRows { rows }, xs, &out, vec![]);
        Ok(out)
    }

    /// Stack single-element tensors into a rank-1 tensor.
    pub fn stack_scalars(&self, xs: &[&Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(shape_err("stack_scalars", "no inputs".into()));
        }
        let mut data = Vec::with_capacity(xs.len());
        for x in xs {
            if x.numel() != 1 {
                return Err(shape_err("stack_scalars", format!("input has {} elements", x.numel())));
            }
            data.push(x.item());
        }
        let out = self.out(data, &[xs.len()], xs);
        self.record(Op::StackScalars, xs, &out, vec![]);
        Ok(out)
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// Mean over the batch of −log softmax(logits)[label], via the
    /// log-sum-exp trick.
    pub fn softmax_cross_entropy(&self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (b, c) = Self::want_rank2(logits, "softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        for &y in labels {
            if y >= c {
                return Err(shape_err(
                    "softmax_cross_entropy",
                    format!("label {y} out of range for {c} classes"),
                ));
            }
        }
        let data = logits.data();
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (i, (row, p_row)) in data.chunks_exact(c).zip(probs.chunks_exact_mut(c)).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for (p, v) in p_row.iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            total += lse - row[labels[i]];
        }
        drop(data);
        let out = self.out(vec![total / b as f64], &[1], &[logits]);
        self.record(Op::SoftmaxCrossEntropy { labels: labels.to_vec() }, &[logits], &out, probs);
        Ok(out)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Adjoints of every tensor that
    /// requires gradients are ADDED to its `grad` buffer; resetting between
    /// steps is the caller's job.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(EqInvError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut adjoints: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut handles: HashMap<usize, Tensor> = HashMap::new();
        adjoints.insert(loss.id(), vec![1.0]);
        handles.insert(loss.id(), loss.clone());

        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            // All consumers of this output were already visited, so its
            // adjoint is complete; take it and flush it to the tensor.
            let Some(gout) = adjoints.remove(&node.output.id()) else {
                continue;
            };
            handles.remove(&node.output.id());
            if node.output.needs_grad() {
                node.output.accumulate_grad(&gout);
            }
            Self::propagate(node, &gout, &mut adjoints, &mut handles);
        }
        drop(nodes);

        // Whatever is left belongs to leaves.
        for (id, adj) in adjoints {
            if let Some(t) = handles.get(&id) {
                if t.needs_grad() {
                    t.accumulate_grad(&adj);
                }
            }
        }
        Ok(())
    }

    fn propagate(
        node: &Node,
        gout: &[f64],
        adjoints: &mut HashMap<usize, Vec<f64>>,
        handles: &mut HashMap<usize, Tensor>,
    ) {
        // Sends `contrib` into the adjoint buffer of input slot `slot`.
        let mut send = |slot: usize, contrib: &dyn Fn(&mut [f64])| {
            let t = &node.inputs[slot];
            if !t.needs_grad() {
                return;
            }
            let entry = adjoints.entry(t.id()).or_insert_with(|| vec![0.0; t.numel()]);
            contrib(entry);
            handles.entry(t.id()).or_insert_with(|| t.clone());
        };
        match &node.op {
            Op::MatMulNN { m, k, n } => {
                let (a, b) = (&node.inputs[0], &node.inputs[1]);
                send(0, &|acc: &mut [f64]| kernels::mm_nt(gout, &b.data(), *m, *n, *k, acc));
                send(1, &|acc: &mut [f64]| kernels::mm_tn(&a.data(), gout, *m, *k, *n, acc));
            }
            Op::MatMulNT { m, k, n } => {
                let (a, b) = (&node.inputs[0], &node.inputs[1]);
                send(0, &|acc: &mut [f64]| kernels::mm_nn(gout, &b.data(), *m, *n, *k, acc));
                send(1, &|acc: &mut [f64]| kernels::mm_tn(gout, &a.data(), *m, *n, *k, acc));
            }
            Op::MatVec { m, n } => {
                let (a, v) = (&node.inputs[0], &node.inputs[1]);
                send(0, &|acc: &mut [f64]| {
                    let vd = v.data();
                    for (acc_row, g) in acc.chunks_exact_mut(*n).zip(gout) {
                        kernels::axpy(*g, &vd, acc_row);
                    }
                });
                send(1, &|acc: &mut [f64]| {
                    let ad = a.data();
                    debug_assert_eq!(ad.len(), m * n);
                    for (a_row, g) in ad.chunks_exact(*n).zip(gout) {
                        kernels::axpy(*g, a_row, acc);
                    }
                });
            }
            Op::Add => {
                send(0, &|acc: &mut [f64]| kernels::axpy(1.0, gout, acc));
                send(1, &|acc: &mut [f64]| kernels::axpy(1.0, gout, acc));
            }
            Op::Sub => {
                send(0, &|acc: &mut [f64]| kernels::axpy(1.0, gout, acc));
                send(1, &|acc: &mut [f64]| kernels::axpy(-1.0, gout, acc));
            }
            Op::Mul => {
                let (a, b) = (&node.inputs[0], &node.inputs[1]);
                send(0, &|acc: &mut [f64]| {
                    for ((acc_i, g), bv) in acc.iter_mut().zip(gout).zip(b.data().iter()) {
                        *acc_i += g * bv;
                    }
                });
                send(1, &|acc: &mut [f64]| {
                    for ((acc_i, g), av) in acc.iter_mut().zip(gout).zip(a.data().iter()) {
                        *acc_i += g * av;
                    }
                });
            }
            Op::AddRowBroadcast => {
                let cols = node.inputs[1].numel();
                send(0, &|acc: &mut [f64]| kernels::axpy(1.0, gout, acc));
                send(1, &|acc: &mut [f64]| {
                    for g_row in gout.chunks_exact(cols) {
                        kernels::axpy(1.0, g_row, acc);
                    }
                });
            }
            Op::MulRowBroadcast => {
                let (x, v) = (&node.inputs[0], &node.inputs[1]);
                let cols = v.numel();
                send(0, &|acc: &mut [f64]| {
                    let vd = v.data();
                    for (acc_row, g_row) in acc.chunks_exact_mut(cols).zip(gout.chunks_exact(cols)) {
                        for ((a, g), vj) in acc_row.iter_mut().zip(g_row).zip(vd.iter()) {
                            *a += g * vj;
                        }
                    }
                });
                send(1, &|acc: &mut [f64]| {
                    let xd = x.data();
                    for (x_row, g_row) in xd.chunks_exact(cols).zip(gout.chunks_exact(cols)) {
                        for ((a, g), xj) in acc.iter_mut().zip(g_row).zip(x_row) {
                            *a += g * xj;
                        }
                    }
                });
            }
            Op::MulColBroadcast => {
                let (x, u) = (&node.inputs[0], &node.inputs[1]);
                let rows = u.numel();
                let cols = x.numel() / rows;
                send(0, &|acc: &mut [f64]| {
                    let ud = u.data();
                    for ((acc_row, g_row), ui) in
                        acc.chunks_exact_mut(cols).zip(gout.chunks_exact(cols)).zip(ud.iter())
                    {
                        kernels::axpy(*ui, g_row, acc_row);
                    }
                });
                send(1, &|acc: &mut [f64]| {
                    let xd = x.data();
                    for ((a, x_row), g_row) in
                        acc.iter_mut().zip(xd.chunks_exact(cols)).zip(gout.chunks_exact(cols))
                    {
                        *a += kernels::dot(x_row, g_row);
                    }
                });
            }
            Op::Scale(c) => {
                send(0, &|acc: &mut [f64]| kernels::axpy(*c, gout, acc));
            }
            Op::Offset => {
                send(0, &|acc: &mut [f64]| kernels::axpy(1.0, gout, acc));
            }
            Op::MulScalar => {
                let (x, s) = (&node.inputs[0], &node.inputs[1]);
                send(0, &|acc: &mut [f64]| kernels::axpy(s.item(), gout, acc));
                send(1, &|acc: &mut [f64]| acc[0] += kernels::dot(gout, &x.data()));
            }
            Op::SubScalar => {
                send(0, &|acc: &mut [f64]| kernels::axpy(1.0, gout, acc));
                send(1, &|acc: &mut [f64]| acc[0] -= gout.iter().sum::<f64>());
            }
            Op::Exp => {
                let x = &node.inputs[0];
                let out = &node.output;
                send(0, &|acc: &mut [f64]| {
                    let xd = x.data();
                    let od = out.data();
                    for (((a, g), xv), ov) in acc.iter_mut().zip(gout).zip(xd.iter()).zip(od.iter()) {
                        if *xv <= EXP_MAX {
                            *a += g * ov;
                        }
                    }
                });
            }
            Op::Log => {
                let x = &node.inputs[0];
                send(0, &|acc: &mut [f64]| {
                    let xd = x.data();
                    for ((a, g), xv) in acc.iter_mut().zip(gout).zip(xd.iter()) {
                        if *xv >= LOG_MIN {
                            *a += g / xv;
                        }
                    }
                });
            }
            Op::Relu => {
                let x = &node.inputs[0];
                send(0, &|acc: &mut [f64]| {
                    let xd = x.data();
                    for ((a, g), xv) in acc.iter_mut().zip(gout).zip(xd.iter()) {
                        if *xv > 0.0 {
                            *a += g;
                        }
                    }
                });
            }
            Op::Sum => {
                send(0, &|acc: &mut [f64]| {
                    for a in acc.iter_mut() {
                        *a += gout[0];
                    }
                });
            }
            Op::Mean => {
                let n = node.inputs[0].numel() as f64;
                send(0, &|acc: &mut [f64]| {
                    let g = gout[0] / n;
                    for a in acc.iter_mut() {
                        *a += g;
                    }
                });
            }
            Op::Variance => {
                let x = &node.inputs[0];
                let n = x.numel() as f64;
                send(0, &|acc: &mut [f64]| {
                    let xd = x.data();
                    let mean = xd.iter().sum::<f64>() / n;
                    let g = 2.0 * gout[0] / n;
                    for (a, xv) in acc.iter_mut().zip(xd.iter()) {
                        *a += g * (xv - mean);
                    }
                });
            }
            Op::L2NormalizeRows => {
                let x = &node.inputs[0];
                let cols = x.cols();
                send(0, &|acc: &mut [f64]| {
                    let xd = x.data();
                    for (((acc_row, g_row), x_row), raw) in acc
                        .chunks_exact_mut(cols)
                        .zip(gout.chunks_exact(cols))
                        .zip(xd.chunks_exact(cols))
                        .zip(node.saved.iter())
                    {
                        let norm = raw + NORM_EPS;
                        let inv = 1.0 / norm;
                        kernels::axpy(inv, g_row, acc_row);
                        if *raw > 0.0 {
                            let coef = -kernels::dot(g_row, x_row) / (raw * norm * norm);
                            kernels::axpy(coef, x_row, acc_row);
                        }
                    }
                });
            }
            Op::SelectRows { indices } => {
                let cols = node.inputs[0].cols();
                send(0, &|acc: &mut [f64]| {
                    for (&i, g_row) in indices.iter().zip(gout.chunks_exact(cols)) {
                        kernels::axpy(1.0, g_row, &mut acc[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::Row { index } => {
                let cols = node.inputs[0].cols();
                send(0, &|acc: &mut [f64]| {
                    kernels::axpy(1.0, gout, &mut acc[index * cols..(index + 1) * cols]);
                });
            }
            Op::VecElement { index } => {
                send(0, &|acc: &mut [f64]| acc[*index] += gout[0]);
            }
            Op::ConcatVecs { lens } => {
                let mut offset = 0;
                for (slot, len) in lens.iter().enumerate() {
                    let piece = &gout[offset..offset + len];
                    send(slot, &|acc: &mut [f64]| kernels::axpy(1.0, piece, acc));
                    offset += len;
                }
            }
            Op::ConcatRows { rows } => {
                let cols = node.output.cols();
                let mut offset = 0;
                for (slot, r) in rows.iter().enumerate() {
                    let piece = &gout[offset..offset + r * cols];
                    send(slot, &|acc: &mut [f64]| kernels::axpy(1.0, piece, acc));
                    offset += r * cols;
                }
            }
            Op::StackScalars => {
                for (slot, g) in gout.iter().enumerate() {
                    send(slot, &|acc: &mut [f64]| acc[0] += g);
                }
            }
            Op::LogSumExp => {
                let x = &node.inputs[0];
                let lse = node.saved[0];
                send(0, &|acc: &mut [f64]| {
                    let xd = x.data();
                    for (a, xv) in acc.iter_mut().zip(xd.iter()) {
                        *a += gout[0] * (xv - lse).exp();
                    }
                });
            }
            Op::SoftmaxCrossEntropy { labels } => {
                let b = labels.len();
                let cols = node.inputs[0].cols();
                send(0, &|acc: &mut [f64]| {
                    let g = gout[0] / b as f64;
                    for ((acc_row, p_row), &y) in
                        acc.chunks_exact_mut(cols).zip(node.saved.chunks_exact(cols)).zip(labels)
                    {
                        for (j, (a, p)) in acc_row.iter_mut().zip(p_row).enumerate() {
                            let delta = if j == y { 1.0 } else { 0.0 };
                            *a += g * (p - delta);
                        }
                    }
                });
            }
        }
    }
}
