//! Define-by-run computation tape with reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive application in topological order (an
//! op can only reference earlier nodes) and replays them in reverse to
//! accumulate gradients. Tapes are rebuilt every training step, which is what
//! lets masking change the graph shape from step to step.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Scale { a: usize, factor: f64 },
    Softmax { a: usize, axis: usize },
    LayerNorm { a: usize, gain: usize, bias: usize, eps: f64 },
    BatchNorm { a: usize, gain: usize, bias: usize, eps: f64, mean: Vec<f64>, var: Vec<f64> },
    Gelu { a: usize },
    Abs { a: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    AssembleRows { sources: Vec<(usize, usize)> },
    SliceCols { a: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { a: usize, b: usize },
    Transpose { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    dims: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications; inputs of a node always precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

#[inline]
fn rows_cols(dims: &[usize]) -> (usize, usize) {
    match dims.len() {
        1 => (1, dims[0]),
        2 => (dims[0], dims[1]),
        _ => panic!("rank > 2 unsupported: {dims:?}"),
    }
}

/// C[m,n] += A[m,k] * B[k,n]
fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// C[m,k] += A[m,n] * B^T where B is [k,n]
fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            crow[l] += s;
        }
    }
}

/// C[k,n] += A^T * B where A is [m,k], B is [m,n]
fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let crow = &mut c[l * n..(l + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let phi = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    phi + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> ValueId {
        self.nodes.push(Node { dims, data, op, requires_grad });
        self.grads.push(None);
        ValueId(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; gradient tracking follows the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(t.dims().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Registers untracked constant data.
    pub fn constant(&mut self, dims: &[usize], data: Vec<f64>) -> Result<ValueId> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} imply {} elements but data has {}",
                dims,
                numel,
                data.len()
            )));
        }
        Ok(self.push(dims.to_vec(), data, Op::Leaf, false))
    }

    pub fn dims(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Gradient of a node after [`Tape::backward`]; `None` if it was never
    /// reached (untracked nodes, or tracked nodes when backward has not run).
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── forward primitives ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = rows_cols(self.dims(a));
        let (k2, n) = rows_cols(self.dims(b));
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: lhs {:?} vs rhs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let mut data = vec![0.0; m * n];
        matmul_acc(&mut data, self.value(a), self.value(b), m, k, n);
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(vec![m, n], data, Op::MatMul { a: a.0, b: b.0 }, rg))
    }

    fn elementwise(
        &mut self,
        a: ValueId,
        b: ValueId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<ValueId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "{name} needs equal shapes: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(self.dims(a).to_vec(), data, op, rg))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Adds a length-n row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: ValueId, row: ValueId) -> Result<ValueId> {
        let (m, n) = rows_cols(self.dims(a));
        if self.dims(row).iter().product::<usize>() != n {
            return Err(Error::Shape(format!(
                "add_row: matrix {:?} vs row {:?}",
                self.dims(a),
                self.dims(row)
            )));
        }
        let rowv = self.value(row).to_vec();
        let mut data = self.value(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rowv[j];
            }
        }
        let rg = self.needs_grad(&[a.0, row.0]);
        Ok(self.push(self.dims(a).to_vec(), data, Op::AddRow { a: a.0, row: row.0 }, rg))
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> ValueId {
        let data = self.value(a).iter().map(|&x| x * factor).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.dims(a).to_vec(), data, Op::Scale { a: a.0, factor }, rg)
    }

    /// Numerically stable softmax along `axis` (0 or 1 for matrices).
    pub fn softmax(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        let dims = self.dims(a).to_vec();
        let rank = dims.len();
        if axis >= rank {
            return Err(Error::Parameter(format!("softmax axis {axis} out of range for {dims:?}")));
        }
        if self.value(a).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let (m, n) = rows_cols(&dims);
        let src = self.value(a);
        let mut data = vec![0.0; m * n];
        let row_major = rank == 1 || axis == rank - 1;
        let (slices, len) = if row_major { (m, n) } else { (n, m) };
        for s in 0..slices {
            let idx = |t: usize| if row_major { s * n + t } else { t * n + s };
            let mut max = f64::NEG_INFINITY;
            for t in 0..len {
                max = max.max(src[idx(t)]);
            }
            let mut sum = 0.0;
            for t in 0..len {
                let e = (src[idx(t)] - max).exp();
                data[idx(t)] = e;
                sum += e;
            }
            for t in 0..len {
                data[idx(t)] /= sum;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(dims, data, Op::Softmax { a: a.0, axis }, rg))
    }

    /// Per-row normalization over the last dimension, then affine.
    pub fn layer_norm(&mut self, a: ValueId, gain: ValueId, bias: ValueId, eps: f64) -> Result<ValueId> {
        let (m, n) = rows_cols(self.dims(a));
        if self.dims(gain).iter().product::<usize>() != n
            || self.dims(bias).iter().product::<usize>() != n
        {
            return Err(Error::Shape(format!(
                "layer_norm: input {:?} needs gain/bias of length {n}, got {:?}/{:?}",
                self.dims(a),
                self.dims(gain),
                self.dims(bias)
            )));
        }
        let src = self.value(a);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.needs_grad(&[a.0, gain.0, bias.0]);
        Ok(self.push(
            self.dims(a).to_vec(),
            data,
            Op::LayerNorm { a: a.0, gain: gain.0, bias: bias.0, eps },
            rg,
        ))
    }

    /// Per-column (batch-axis) normalization with batch statistics, then
    /// affine. Returns the output; the batch statistics are retrievable via
    /// [`Tape::batch_stats`] for running-average updates.
    pub fn batch_norm(&mut self, a: ValueId, gain: ValueId, bias: ValueId, eps: f64) -> Result<ValueId> {
        let (m, n) = rows_cols(self.dims(a));
        if self.dims(gain).iter().product::<usize>() != n
            || self.dims(bias).iter().product::<usize>() != n
        {
            return Err(Error::Shape(format!(
                "batch_norm: input {:?} needs gain/bias of length {n}, got {:?}/{:?}",
                self.dims(a),
                self.dims(gain),
                self.dims(bias)
            )));
        }
        let src = self.value(a);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut mean = vec![0.0; n];
        let mut var = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for i in 0..m {
                s += src[i * n + j];
            }
            mean[j] = s / m as f64;
            let mut v = 0.0;
            for i in 0..m {
                let d = src[i * n + j] - mean[j];
                v += d * d;
            }
            var[j] = v / m as f64;
        }
        let mut data = vec![0.0; m * n];
        for j in 0..n {
            let inv = 1.0 / (var[j] + eps).sqrt();
            for i in 0..m {
                data[i * n + j] = (src[i * n + j] - mean[j]) * inv * g[j] + b[j];
            }
        }
        let rg = self.needs_grad(&[a.0, gain.0, bias.0]);
        Ok(self.push(
            self.dims(a).to_vec(),
            data,
            Op::BatchNorm { a: a.0, gain: gain.0, bias: bias.0, eps, mean, var },
            rg,
        ))
    }

    /// Batch mean and (population) variance recorded by a `batch_norm` node.
    pub fn batch_stats(&self, id: ValueId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let data = self.value(a).iter().map(|&x| gelu_scalar(x)).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.dims(a).to_vec(), data, Op::Gelu { a: a.0 }, rg)
    }

    pub fn abs(&mut self, a: ValueId) -> ValueId {
        let data = self.value(a).iter().map(|&x| x.abs()).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(self.dims(a).to_vec(), data, Op::Abs { a: a.0 }, rg)
    }

    /// Output row i = input row idx[i]; indices may repeat.
    pub fn gather_rows(&mut self, a: ValueId, idx: &[usize]) -> Result<ValueId> {
        let (m, n) = rows_cols(self.dims(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!(
                "gather_rows index {bad} out of range for {:?}",
                self.dims(a)
            )));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![idx.len(), n], data, Op::GatherRows { a: a.0, idx: idx.to_vec() }, rg))
    }

    /// Output row i = row `sources[i].1` of node `sources[i].0`. All sources
    /// must share a column count; the same source row may appear repeatedly
    /// (gradients accumulate).
    pub fn assemble_rows(&mut self, sources: &[(ValueId, usize)]) -> Result<ValueId> {
        if sources.is_empty() {
            return Err(Error::Shape("assemble_rows needs at least one row".into()));
        }
        let n = rows_cols(self.dims(sources[0].0)).1;
        let mut data = Vec::with_capacity(sources.len() * n);
        for &(src, row) in sources {
            let (m, nc) = rows_cols(self.dims(src));
            if nc != n {
                return Err(Error::Shape(format!(
                    "assemble_rows column mismatch: {n} vs {nc}"
                )));
            }
            if row >= m {
                return Err(Error::Shape(format!(
                    "assemble_rows row {row} out of range for {:?}",
                    self.dims(src)
                )));
            }
            data.extend_from_slice(&self.value(src)[row * n..(row + 1) * n]);
        }
        let rg = self.needs_grad(&sources.iter().map(|s| s.0 .0).collect::<Vec<_>>());
        let op = Op::AssembleRows { sources: sources.iter().map(|&(v, r)| (v.0, r)).collect() };
        Ok(self.push(vec![sources.len(), n], data, op, rg))
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (m, n) = rows_cols(self.dims(a));
        if start + len > n {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} out of range for {:?}",
                start + len,
                self.dims(a)
            )));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![m, len], data, Op::SliceCols { a: a.0, start, len }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols needs at least one part".into()));
        }
        let m = rows_cols(self.dims(parts[0])).0;
        let widths: Vec<usize> = parts.iter().map(|&p| rows_cols(self.dims(p)).1).collect();
        for &p in parts {
            if rows_cols(self.dims(p)).0 != m {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {:?} vs {m} rows",
                    self.dims(p)
                )));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p);
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let rg = self.needs_grad(&parts.iter().map(|p| p.0).collect::<Vec<_>>());
        let op = Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() };
        Ok(self.push(vec![m, total], data, op, rg))
    }

    pub fn concat_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ma, na) = rows_cols(self.dims(a));
        let (mb, nb) = rows_cols(self.dims(b));
        if na != nb {
            return Err(Error::Shape(format!(
                "concat_rows column mismatch: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let mut data = self.value(a).to_vec();
        data.extend_from_slice(self.value(b));
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(vec![ma + mb, na], data, Op::ConcatRows { a: a.0, b: b.0 }, rg))
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let (m, n) = rows_cols(self.dims(a));
        let src = self.value(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![n, m], data, Op::Transpose { a: a.0 }, rg)
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s = self.value(a).iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], Op::SumAll { a: a.0 }, rg)
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let n = self.value(a).len();
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![1], vec![s], Op::MeanAll { a: a.0 }, rg)
    }

    /// Mean cross-entropy between row logits and integer labels, fused with
    /// log-softmax for stability.
    pub fn cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let (m, n) = rows_cols(self.dims(logits));
        if labels.len() != m {
            return Err(Error::Shape(format!(
                "cross_entropy: {m} logit rows vs {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Parameter(format!("label {bad} out of range for {n} classes")));
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                probs[i * n + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        loss /= m as f64;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse-accumulates gradients from a scalar `root` into every tracked
    /// node. Running twice without [`Tape::reset_gradients`] is an error.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got dims {:?}",
                self.nodes[root.0].dims
            )));
        }
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; call reset_gradients first".into(),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        // Tracked leaves that the root never reached still report zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.data.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    pub fn reset_gradients(&mut self) {
        self.grads = vec![None; self.nodes.len()];
        self.backward_done = false;
    }

    fn acc<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        nodes: &[Node],
        idx: usize,
    ) -> Option<&'a mut [f64]> {
        if !nodes[idx].requires_grad {
            return None;
        }
        Some(grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].data.len()]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = rows_cols(&nodes[*a].dims);
                let n = rows_cols(&nodes[*b].dims).1;
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    matmul_nt_acc(ga, g, &nodes[*b].data, m, n, k);
                }
                if let Some(gb) = Self::acc(grads, nodes, *b) {
                    matmul_tn_acc(gb, &nodes[*a].data, g, m, k, n);
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gb) = Self::acc(grads, nodes, *b) {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gb) = Self::acc(grads, nodes, *b) {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(&nodes[*b].data) {
                        *x += y * bv;
                    }
                }
                if let Some(gb) = Self::acc(grads, nodes, *b) {
                    for ((x, &y), &av) in gb.iter_mut().zip(g).zip(&nodes[*a].data) {
                        *x += y * av;
                    }
                }
            }
            Op::AddRow { a, row } => {
                let (m, n) = rows_cols(&nodes[*a].dims);
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gr) = Self::acc(grads, nodes, *row) {
                    for i in 0..m {
                        for j in 0..n {
                            gr[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y * factor;
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let dims = &nodes[i].dims;
                let rank = dims.len();
                let (m, n) = rows_cols(dims);
                let y = &nodes[i].data;
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    let row_major = rank == 1 || *axis == rank - 1;
                    let (slices, len) = if row_major { (m, n) } else { (n, m) };
                    for s in 0..slices {
                        let idx = |t: usize| if row_major { s * n + t } else { t * n + s };
                        let mut dot = 0.0;
                        for t in 0..len {
                            dot += g[idx(t)] * y[idx(t)];
                        }
                        for t in 0..len {
                            ga[idx(t)] += y[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, gain, bias, eps } => {
                let (m, n) = rows_cols(&nodes[*a].dims);
                let x = &nodes[*a].data;
                let gv = &nodes[*gain].data;
                for r in 0..m {
                    let row = &x[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    if let Some(gb) = Self::acc(grads, nodes, *bias) {
                        for j in 0..n {
                            gb[j] += grow[j];
                        }
                    }
                    if let Some(gg) = Self::acc(grads, nodes, *gain) {
                        for j in 0..n {
                            gg[j] += grow[j] * xhat[j];
                        }
                    }
                    if let Some(ga) = Self::acc(grads, nodes, *a) {
                        let dxhat: Vec<f64> = (0..n).map(|j| grow[j] * gv[j]).collect();
                        let mean_dx = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dxx =
                            dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<f64>() / n as f64;
                        for j in 0..n {
                            ga[r * n + j] += inv * (dxhat[j] - mean_dx - xhat[j] * mean_dxx);
                        }
                    }
                }
            }
            Op::BatchNorm { a, gain, bias, eps, mean, var } => {
                let (m, n) = rows_cols(&nodes[*a].dims);
                let x = &nodes[*a].data;
                let gv = &nodes[*gain].data;
                for j in 0..n {
                    let inv = 1.0 / (var[j] + eps).sqrt();
                    let xhat: Vec<f64> = (0..m).map(|r| (x[r * n + j] - mean[j]) * inv).collect();
                    if let Some(gb) = Self::acc(grads, nodes, *bias) {
                        for r in 0..m {
                            gb[j] += g[r * n + j];
                        }
                    }
                    if let Some(gg) = Self::acc(grads, nodes, *gain) {
                        for r in 0..m {
                            gg[j] += g[r * n + j] * xhat[r];
                        }
                    }
                    if let Some(ga) = Self::acc(grads, nodes, *a) {
                        let dxhat: Vec<f64> = (0..m).map(|r| g[r * n + j] * gv[j]).collect();
                        let mean_dx = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dxx =
                            dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<f64>() / m as f64;
                        for r in 0..m {
                            ga[r * n + j] += inv * (dxhat[r] - mean_dx - xhat[r] * mean_dxx);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for ((x, &y), &xv) in ga.iter_mut().zip(g).zip(&nodes[*a].data) {
                        *x += y * gelu_grad_scalar(xv);
                    }
                }
            }
            Op::Abs { a } => {
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for ((x, &y), &xv) in ga.iter_mut().zip(g).zip(&nodes[*a].data) {
                        *x += y * xv.signum() * if xv == 0.0 { 0.0 } else { 1.0 };
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let n = rows_cols(&nodes[*a].dims).1;
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for (out_row, &src_row) in idx.iter().enumerate() {
                        for j in 0..n {
                            ga[src_row * n + j] += g[out_row * n + j];
                        }
                    }
                }
            }
            Op::AssembleRows { sources } => {
                let n = rows_cols(&nodes[i].dims).1;
                for (out_row, &(src, row)) in sources.iter().enumerate() {
                    if let Some(gs) = Self::acc(grads, nodes, src) {
                        for j in 0..n {
                            gs[row * n + j] += g[out_row * n + j];
                        }
                    }
                }
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = rows_cols(&nodes[*a].dims);
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for r in 0..m {
                        for j in 0..*len {
                            ga[r * n + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let m = rows_cols(&nodes[i].dims).0;
                let total = rows_cols(&nodes[i].dims).1;
                let mut offset = 0;
                for &p in parts {
                    let w = rows_cols(&nodes[p].dims).1;
                    if let Some(gp) = Self::acc(grads, nodes, p) {
                        for r in 0..m {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { a, b } => {
                let na = nodes[*a].data.len();
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for (x, &y) in ga.iter_mut().zip(&g[..na]) {
                        *x += y;
                    }
                }
                if let Some(gb) = Self::acc(grads, nodes, *b) {
                    for (x, &y) in gb.iter_mut().zip(&g[na..]) {
                        *x += y;
                    }
                }
            }
            Op::Transpose { a } => {
                let (m, n) = rows_cols(&nodes[*a].dims);
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for r in 0..m {
                        for j in 0..n {
                            ga[r * n + j] += g[j * m + r];
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::MeanAll { a } => {
                let n = nodes[*a].data.len() as f64;
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0] / n;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (m, n) = rows_cols(&nodes[*logits].dims);
                if let Some(gl) = Self::acc(grads, nodes, *logits) {
                    let scale = g[0] / m as f64;
                    for r in 0..m {
                        for j in 0..n {
                            let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                            gl[r * n + j] += scale * (probs[r * n + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, dims: &[usize], data: &[f64]) -> ValueId {
        let t = Tensor::new(dims.to_vec(), data.to_vec()).unwrap().with_grad();
        tape.leaf(&t)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = leaf(&mut tape, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut tape, &[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1, 2], &[1.0, 2.0]);
        let b = leaf(&mut tape, &[2, 1], &[3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_dimension_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut tape, &[2, 2], &[0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::KeyedRng::from_key(11, &[1]);
        let a: Vec<f64> = (0..5 * 7).map(|_| rng.uniform() * 4.0 - 2.0).collect();
        let b: Vec<f64> = (0..7 * 3).map(|_| rng.uniform() * 4.0 - 2.0).collect();
        let mut tape = Tape::new();
        let av = leaf(&mut tape, &[5, 7], &a);
        let bv = leaf(&mut tape, &[7, 3], &b);
        let c = tape.matmul(av, bv).unwrap();
        // independent naive triple loop
        let mut expect = vec![0.0; 5 * 3];
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for l in 0..7 {
                    s += a[i * 7 + l] * b[l * 3 + j];
                }
                expect[i * 3 + j] = s;
            }
        }
        for (x, y) in tape.value(c).iter().zip(&expect) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_input() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[0.0, 0.0, 0.0]);
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_analytic_two_point() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[0.0, 2.0_f64.ln()]);
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y)[0] - 1.0 / 3.0).abs() <= 1e-15);
        assert!((tape.value(y)[1] - 2.0 / 3.0).abs() <= 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = crate::rng::KeyedRng::from_key(5, &[2]);
        let x: Vec<f64> = (0..8).map(|_| rng.uniform() * 4.0 - 2.0).collect();
        let shifted: Vec<f64> = x.iter().map(|&v| v + 17.5).collect();
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[8], &x);
        let b = leaf(&mut tape, &[8], &shifted);
        let ya = tape.softmax(a, 0).unwrap();
        let yb = tape.softmax(b, 0).unwrap();
        for (u, v) in tape.value(ya).iter().zip(tape.value(yb)) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[f64::NAN, 0.0]);
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::KeyedRng::from_key(6, &[3]);
        let x: Vec<f64> = (0..4 * 5).map(|_| rng.uniform() * 4.0 - 2.0).collect();
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[4, 5], &x);
        let y = tape.softmax(a, 1).unwrap();
        let v = tape.value(y);
        for r in 0..4 {
            let s: f64 = v[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(v[r * 5..(r + 1) * 5].iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 4], &[5.0; 4]);
        let g = leaf(&mut tape, &[4], &[1.0; 4]);
        let b = leaf(&mut tape, &[4], &[0.0; 4]);
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        for &v in tape.value(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_analytic() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2], &[1.0, 3.0]);
        let g = leaf(&mut tape, &[2], &[1.0, 1.0]);
        let b = leaf(&mut tape, &[2], &[0.0, 0.0]);
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() <= 1e-15);
        assert!((tape.value(y)[1] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn gelu_fixed_points() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[0.0, 10.0]);
        let y = tape.gelu(x);
        assert_eq!(tape.value(y)[0], 0.0);
        assert!((tape.value(y)[1] - 10.0).abs() <= 1e-9);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[1.0, 2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_constant_root_leaves_zero_grads() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
        let c = tape.constant(&[1], vec![7.0]).unwrap();
        let root = tape.mean_all(c);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn double_backward_without_reset_is_an_error() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Usage(_))));
        tape.reset_gradients();
        assert!(tape.backward(loss).is_ok());
    }

    #[test]
    fn backward_is_linear_over_independent_terms() {
        let mut rng = crate::rng::KeyedRng::from_key(8, &[4]);
        let xv: Vec<f64> = (0..6).map(|_| rng.uniform() * 4.0 - 2.0).collect();
        let yv: Vec<f64> = (0..6).map(|_| rng.uniform() * 4.0 - 2.0).collect();

        let grad_sum = {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, &[6], &xv);
            let y = leaf(&mut tape, &[6], &yv);
            let xx = tape.mul(x, x).unwrap();
            let xy = tape.mul(x, y).unwrap();
            let t1 = tape.sum_all(xx);
            let t2 = tape.sum_all(xy);
            let s = tape.add(t1, t2).unwrap();
            tape.backward(s).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let grad_terms = {
            let term = |square: bool| {
                let mut tape = Tape::new();
                let x = leaf(&mut tape, &[6], &xv);
                let y = leaf(&mut tape, &[6], &yv);
                let p = if square { tape.mul(x, x).unwrap() } else { tape.mul(x, y).unwrap() };
                let s = tape.sum_all(p);
                tape.backward(s).unwrap();
                tape.grad(x).unwrap().to_vec()
            };
            let a = term(true);
            let b = term(false);
            a.iter().zip(&b).map(|(u, v)| u + v).collect::<Vec<f64>>()
        };
        for (a, b) in grad_sum.iter().zip(&grad_terms) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn gather_and_assemble_round_trip() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = tape.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(tape.value(g), &[5.0, 6.0, 1.0, 2.0]);
        let a = tape.assemble_rows(&[(g, 1), (x, 1), (g, 0)]).unwrap();
        assert_eq!(tape.value(a), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, &[2, 3], &[1.0, 2.0, 3.0, 0.5, 0.5, 0.5]);
        let loss = tape.cross_entropy(logits, &[2, 0]).unwrap();
        let row0: f64 = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln() - 3.0;
        let row1: f64 = (3.0 * 0.5f64.exp()).ln() - 0.5;
        assert!((tape.value(loss)[0] - (row0 + row1) / 2.0).abs() <= 1e-12);
    }
}
