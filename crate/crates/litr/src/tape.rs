//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! Each training step builds a fresh graph: leaves hold parameter or input
//! values, every operation records its inputs and evaluates eagerly, and
//! `backward` replays the tape in reverse, accumulating gradients into the
//! leaves. The op set is deliberately closed: matrix multiply, add/scale,
//! row softmax with temperature, layer norm, GELU, embedding lookup, the two
//! cross-entropy forms, concatenation/slicing, row L2 normalization, detach.
//!
//! The same code path runs in 32-bit (training) and 64-bit (gradient checks
//! and oracles); `Real` abstracts the scalar.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar for tape arithmetic. Implemented for `f32` and `f64`.
pub trait Real:
    Float + num_traits::NumAssignOps + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for `F::from_f64` in constant-heavy code.
pub fn real<F: Real>(v: f64) -> F {
    F::from_f64(v)
}

/// Probabilities below this floor are clamped inside every log.
pub const LOG_FLOOR: f64 = 1e-12;
/// Layer norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;
/// Row norms below this are rejected as degenerate.
pub const NORM_FLOOR: f64 = 1e-25;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Dense row-major tensor used at API boundaries (parameters, checkpoints).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} wants {} values, got {}", shape, want, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); n] }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Interprets the shape as (rows, cols): scalars are 1x1, vectors 1xN.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }
}

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Detach,
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Scale { x: NodeId, c: F },
    Matmul { a: NodeId, b: NodeId },
    MatmulNT { a: NodeId, b: NodeId },
    SoftmaxRows { x: NodeId, tau: Option<NodeId> },
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId },
    Gelu { x: NodeId },
    Embed { table: NodeId, ids: Vec<usize> },
    GatherRows { x: NodeId, rows: Vec<usize> },
    GatherElems { x: NodeId, idx: Vec<usize> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    L2NormRows { x: NodeId },
    CeHard { probs: NodeId, targets: Vec<usize> },
    CeSoft { p: NodeId, q: NodeId },
    SumAll { x: NodeId },
}

struct Node<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Wengert tape: nodes reference strictly earlier nodes, so the graph is
/// acyclic by construction and reverse index order is a topological order.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    consumed: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<F> {
        let n = &self.nodes[id];
        Tensor { shape: vec![n.rows, n.cols], data: n.data.clone() }
    }

    /// Gradient accumulated by the last `backward`, if any reached this node.
    /// Absent means exactly zero.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    fn check(&self, id: NodeId, op: &'static str) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::ShapeMismatch { op, detail: format!("node {} out of range", id) });
        }
        Ok(())
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node { rows, cols, data, op, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<F>, trainable: bool) -> Result<NodeId> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                detail: format!("{}x{} wants {} values, got {}", rows, cols, rows * cols, data.len()),
            });
        }
        Ok(self.push(rows, cols, data, Op::Leaf, trainable))
    }

    pub fn leaf_tensor(&mut self, t: &Tensor<F>, trainable: bool) -> Result<NodeId> {
        let (r, c) = t.rows_cols();
        self.leaf(r, c, t.data.clone(), trainable)
    }

    pub fn scalar(&mut self, v: F) -> NodeId {
        self.push(1, 1, vec![v], Op::Leaf, false)
    }

    // ── Elementwise and linear ──────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{}x{} vs {}x{}", ra, ca, rb, cb),
            });
        }
        let data: Vec<F> =
            self.nodes[a].data.iter().zip(&self.nodes[b].data).map(|(&x, &y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(ra, ca, data, Op::Add { a, b }, ng))
    }

    /// Adds a 1xN bias to every row of an MxN matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(a, "add_bias")?;
        self.check(bias, "add_bias")?;
        let (r, c) = self.shape(a);
        let (rb, cb) = self.shape(bias);
        if rb != 1 || cb != c {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias {}x{} against {}x{}", rb, cb, r, c),
            });
        }
        let mut data = self.nodes[a].data.clone();
        let b = &self.nodes[bias].data;
        for row in data.chunks_mut(c) {
            for (x, &bv) in row.iter_mut().zip(b) {
                *x += bv;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(r, c, data, Op::AddBias { a, bias }, ng))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> Result<NodeId> {
        self.check(x, "scale")?;
        let (r, cl) = self.shape(x);
        let data: Vec<F> = self.nodes[x].data.iter().map(|&v| v * c).collect();
        let ng = self.needs(x);
        Ok(self.push(r, cl, data, Op::Scale { x, c }, ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (m, k) = self.shape(a);
        let (kb, n) = self.shape(b);
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} times {}x{}", m, k, kb, n),
            });
        }
        let data = matmul_ikj(&self.nodes[a].data, &self.nodes[b].data, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, data, Op::Matmul { a, b }, ng))
    }

    /// `a` (MxK) times `b` (NxK) transposed, yielding MxN.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "matmul_nt")?;
        self.check(b, "matmul_nt")?;
        let (m, k) = self.shape(a);
        let (n, kb) = self.shape(b);
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("{}x{} times ({}x{})^T", m, k, n, kb),
            });
        }
        let bt = transpose(&self.nodes[b].data, n, k);
        let data = matmul_ikj(&self.nodes[a].data, &bt, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, data, Op::MatmulNT { a, b }, ng))
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    /// Row softmax of `x / tau`, max-shifted for stability. `tau` must be a
    /// positive finite 1x1 node; `None` means temperature 1.
    pub fn softmax_rows(&mut self, x: NodeId, tau: Option<NodeId>) -> Result<NodeId> {
        self.check(x, "softmax_rows")?;
        let (r, c) = self.shape(x);
        let tv = match tau {
            Some(t) => {
                self.check(t, "softmax_rows")?;
                if self.shape(t) != (1, 1) {
                    return Err(Error::ShapeMismatch {
                        op: "softmax_rows",
                        detail: "temperature must be a scalar node".into(),
                    });
                }
                self.nodes[t].data[0]
            }
            None => F::one(),
        };
        if !tv.is_finite() || tv <= F::zero() {
            return Err(Error::NonPositiveTemperature { value: tv.to_f64() });
        }
        if self.nodes[x].data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { op: "softmax_rows" });
        }
        let mut data = vec![F::zero(); r * c];
        for (orow, xrow) in data.chunks_mut(c).zip(self.nodes[x].data.chunks(c)) {
            let mx = xrow.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (o, &xv) in orow.iter_mut().zip(xrow) {
                let e = ((xv - mx) / tv).exp();
                *o = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        let ng = self.needs(x) || tau.map(|t| self.needs(t)).unwrap_or(false);
        Ok(self.push(r, c, data, Op::SoftmaxRows { x, tau }, ng))
    }

    /// Per-row layer norm with learned 1xN scale and shift.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.check(x, "layer_norm_rows")?;
        self.check(gamma, "layer_norm_rows")?;
        self.check(beta, "layer_norm_rows")?;
        let (r, c) = self.shape(x);
        for (id, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(id) != (1, c) {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm_rows",
                    detail: format!("{} must be 1x{}", name, c),
                });
            }
        }
        let eps = real::<F>(LN_EPS);
        let cn = real::<F>(c as f64);
        let g = self.nodes[gamma].data.clone();
        let b = self.nodes[beta].data.clone();
        let mut data = vec![F::zero(); r * c];
        for (orow, xrow) in data.chunks_mut(c).zip(self.nodes[x].data.chunks(c)) {
            let mean = xrow.iter().cloned().sum::<F>() / cn;
            let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cn;
            let inv = (var + eps).sqrt().recip();
            for (j, (o, &xv)) in orow.iter_mut().zip(xrow).enumerate() {
                *o = (xv - mean) * inv * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(r, c, data, Op::LayerNormRows { x, gamma, beta }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "gelu")?;
        let (r, c) = self.shape(x);
        let cc = real::<F>(GELU_C);
        let aa = real::<F>(GELU_A);
        let half = real::<F>(0.5);
        let data: Vec<F> = self.nodes[x]
            .data
            .iter()
            .map(|&v| {
                let u = cc * (v + aa * v * v * v);
                half * v * (F::one() + u.tanh())
            })
            .collect();
        let ng = self.needs(x);
        Ok(self.push(r, c, data, Op::Gelu { x }, ng))
    }

    // ── Lookup, slicing, concatenation ──────────────────────────────────

    /// Rows of an embedding table selected by token id.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.check(table, "embed")?;
        let (v, w) = self.shape(table);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { token: id, vocab: v });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            data.extend_from_slice(&self.nodes[table].data[id * w..(id + 1) * w]);
        }
        let ng = self.needs(table);
        Ok(self.push(ids.len(), w, data, Op::Embed { table, ids: ids.to_vec() }, ng))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.check(x, "gather_rows")?;
        let (r, c) = self.shape(x);
        for &i in rows {
            if i >= r {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    detail: format!("row {} out of {}", i, r),
                });
            }
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&self.nodes[x].data[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        Ok(self.push(rows.len(), c, data, Op::GatherRows { x, rows: rows.to_vec() }, ng))
    }

    /// Selects flat elements into a fresh (rows, cols) tensor.
    pub fn gather_elems(&mut self, x: NodeId, idx: &[usize], rows: usize, cols: usize) -> Result<NodeId> {
        self.check(x, "gather_elems")?;
        let n = self.nodes[x].data.len();
        if idx.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "gather_elems",
                detail: format!("{} indices for {}x{}", idx.len(), rows, cols),
            });
        }
        for &i in idx {
            if i >= n {
                return Err(Error::ShapeMismatch {
                    op: "gather_elems",
                    detail: format!("index {} out of {}", i, n),
                });
            }
        }
        let data: Vec<F> = idx.iter().map(|&i| self.nodes[x].data[i]).collect();
        let ng = self.needs(x);
        Ok(self.push(rows, cols, data, Op::GatherElems { x, idx: idx.to_vec() }, ng))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, _) = self.shape(x);
        if start + len > r {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {}..{} out of {}", start, start + len, r),
            });
        }
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &rows)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(x, "slice_cols")?;
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols {}..{} out of {}", start, start + len, c),
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for row in self.nodes[x].data.chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(r, len, data, Op::SliceCols { x, start, len }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat_rows", detail: "no parts".into() });
        }
        let mut cols = None;
        let mut rows = 0;
        for &p in parts {
            self.check(p, "concat_rows")?;
            let (r, c) = self.shape(p);
            match cols {
                None => cols = Some(c),
                Some(c0) if c0 != c => {
                    return Err(Error::ShapeMismatch {
                        op: "concat_rows",
                        detail: format!("column widths {} vs {}", c0, c),
                    })
                }
                _ => {}
            }
            rows += r;
        }
        let c = cols.unwrap();
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p].data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(rows, c, data, Op::ConcatRows { parts: parts.to_vec() }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat_cols", detail: "no parts".into() });
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            self.check(p, "concat_cols")?;
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", rows, r),
                });
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = self.shape(p);
                data.extend_from_slice(&self.nodes[p].data[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(rows, cols, data, Op::ConcatCols { parts: parts.to_vec() }, ng))
    }

    /// Each row divided by its Euclidean norm. Rejects rows with norm below
    /// `NORM_FLOOR` rather than emitting non-finite values.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "l2_normalize_rows")?;
        let (r, c) = self.shape(x);
        let floor = real::<F>(NORM_FLOOR);
        let mut data = vec![F::zero(); r * c];
        for (orow, xrow) in data.chunks_mut(c).zip(self.nodes[x].data.chunks(c)) {
            let norm = xrow.iter().map(|&v| v * v).sum::<F>().sqrt();
            if norm < floor {
                return Err(Error::DegenerateEmbedding);
            }
            for (o, &xv) in orow.iter_mut().zip(xrow) {
                *o = xv / norm;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(r, c, data, Op::L2NormRows { x }, ng))
    }

    /// Identity on values; gradients stop here.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "detach")?;
        let (r, c) = self.shape(x);
        let data = self.nodes[x].data.clone();
        Ok(self.push(r, c, data, Op::Detach, false))
    }

    // ── Losses and reductions ───────────────────────────────────────────

    /// Per-row negative log probability of the target column. Output is Rx1.
    /// Probabilities are floored at `LOG_FLOOR` inside the log.
    pub fn ce_hard(&mut self, probs: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.check(probs, "ce_hard")?;
        let (r, c) = self.shape(probs);
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "ce_hard",
                detail: format!("{} targets for {} rows", targets.len(), r),
            });
        }
        for &t in targets {
            if t >= c {
                return Err(Error::ShapeMismatch {
                    op: "ce_hard",
                    detail: format!("target {} out of {}", t, c),
                });
            }
        }
        let floor = real::<F>(LOG_FLOOR);
        let data: Vec<F> = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -self.nodes[probs].data[i * c + t].max(floor).ln())
            .collect();
        let ng = self.needs(probs);
        Ok(self.push(r, 1, data, Op::CeHard { probs, targets: targets.to_vec() }, ng))
    }

    /// Per-row soft cross-entropy `-sum_j q_j ln p_j` with `q` as the target
    /// distribution. Output is Rx1.
    pub fn ce_soft(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        self.check(p, "ce_soft")?;
        self.check(q, "ce_soft")?;
        let (r, c) = self.shape(p);
        if self.shape(q) != (r, c) {
            let (rq, cq) = self.shape(q);
            return Err(Error::ShapeMismatch {
                op: "ce_soft",
                detail: format!("p {}x{} vs q {}x{}", r, c, rq, cq),
            });
        }
        let floor = real::<F>(LOG_FLOOR);
        let mut data = Vec::with_capacity(r);
        for (prow, qrow) in self.nodes[p].data.chunks(c).zip(self.nodes[q].data.chunks(c)) {
            let mut acc = F::zero();
            for (&pv, &qv) in prow.iter().zip(qrow) {
                acc -= qv * pv.max(floor).ln();
            }
            data.push(acc);
        }
        let ng = self.needs(p) || self.needs(q);
        Ok(self.push(r, 1, data, Op::CeSoft { p, q }, ng))
    }

    /// Sum of all elements, as a 1x1 node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "sum")?;
        let total = self.nodes[x].data.iter().cloned().sum::<F>();
        let ng = self.needs(x);
        Ok(self.push(1, 1, vec![total], Op::SumAll { x }, ng))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse replay from a scalar root. Gradients accumulate into every
    /// node on a differentiable path to a trainable leaf; a second call on
    /// the same tape is rejected.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.check(root, "backward")?;
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[root] = Some(vec![F::one()]);

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let gout = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn acc(grads: &mut [Option<Vec<F>>], id: NodeId, delta: Vec<F>) {
        match &mut grads[id] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_op(&mut self, id: NodeId, gout: &[F]) {
        let (rows, cols) = (self.nodes[id].rows, self.nodes[id].cols);
        // Ops are cloned cheaply except for index vectors, which are moved
        // back after use via the match on a reference.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Detach => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    Self::acc(&mut self.grads, a, gout.to_vec());
                }
                if self.needs(b) {
                    Self::acc(&mut self.grads, b, gout.to_vec());
                }
            }
            Op::AddBias { a, bias } => {
                let (a, bias) = (*a, *bias);
                if self.needs(a) {
                    Self::acc(&mut self.grads, a, gout.to_vec());
                }
                if self.needs(bias) {
                    let mut d = vec![F::zero(); cols];
                    for row in gout.chunks(cols) {
                        for (dj, &g) in d.iter_mut().zip(row) {
                            *dj += g;
                        }
                    }
                    Self::acc(&mut self.grads, bias, d);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.needs(x) {
                    let d: Vec<F> = gout.iter().map(|&g| g * c).collect();
                    Self::acc(&mut self.grads, x, d);
                }
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.shape(a);
                let n = cols;
                if self.needs(a) {
                    let bt = transpose(&self.nodes[b].data, k, n);
                    let da = matmul_ikj(gout, &bt, m, n, k);
                    Self::acc(&mut self.grads, a, da);
                }
                if self.needs(b) {
                    let at = transpose(&self.nodes[a].data, m, k);
                    let db = matmul_ikj(&at, gout, k, m, n);
                    Self::acc(&mut self.grads, b, db);
                }
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.shape(a);
                let n = rows_of(self.shape(b));
                debug_assert_eq!((rows, cols), (m, n));
                if self.needs(a) {
                    let da = matmul_ikj(gout, &self.nodes[b].data, m, n, k);
                    Self::acc(&mut self.grads, a, da);
                }
                if self.needs(b) {
                    let gt = transpose(gout, m, n);
                    let db = matmul_ikj(&gt, &self.nodes[a].data, n, m, k);
                    Self::acc(&mut self.grads, b, db);
                }
            }
            Op::SoftmaxRows { x, tau } => {
                let (x, tau) = (*x, *tau);
                let tv = match tau {
                    Some(t) => self.nodes[t].data[0],
                    None => F::one(),
                };
                let p = &self.nodes[id].data;
                let xv = &self.nodes[x].data;
                let mut dx = vec![F::zero(); rows * cols];
                let mut dtau = F::zero();
                for r in 0..rows {
                    let prow = &p[r * cols..(r + 1) * cols];
                    let grow = &gout[r * cols..(r + 1) * cols];
                    let xrow = &xv[r * cols..(r + 1) * cols];
                    let dot: F = prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                    let drow = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let dz = prow[j] * (grow[j] - dot);
                        drow[j] = dz / tv;
                        dtau -= dz * xrow[j];
                    }
                }
                dtau = dtau / (tv * tv);
                if self.needs(x) {
                    Self::acc(&mut self.grads, x, dx);
                }
                if let Some(t) = tau {
                    if self.needs(t) {
                        Self::acc(&mut self.grads, t, vec![dtau]);
                    }
                }
            }
            Op::LayerNormRows { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let eps = real::<F>(LN_EPS);
                let cn = real::<F>(cols as f64);
                let g = &self.nodes[gamma].data;
                let xv = &self.nodes[x].data;
                let mut dx = vec![F::zero(); rows * cols];
                let mut dg = vec![F::zero(); cols];
                let mut db = vec![F::zero(); cols];
                for r in 0..rows {
                    let xrow = &xv[r * cols..(r + 1) * cols];
                    let grow = &gout[r * cols..(r + 1) * cols];
                    let mean = xrow.iter().cloned().sum::<F>() / cn;
                    let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cn;
                    let inv = (var + eps).sqrt().recip();
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..cols {
                        let xh = (xrow[j] - mean) * inv;
                        let dxh = grow[j] * g[j];
                        m1 += dxh;
                        m2 += dxh * xh;
                        dg[j] += grow[j] * xh;
                        db[j] += grow[j];
                    }
                    m1 = m1 / cn;
                    m2 = m2 / cn;
                    let drow = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let xh = (xrow[j] - mean) * inv;
                        drow[j] = inv * (grow[j] * g[j] - m1 - xh * m2);
                    }
                }
                if self.needs(x) {
                    Self::acc(&mut self.grads, x, dx);
                }
                if self.needs(gamma) {
                    Self::acc(&mut self.grads, gamma, dg);
                }
                if self.needs(beta) {
                    Self::acc(&mut self.grads, beta, db);
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if self.needs(x) {
                    let cc = real::<F>(GELU_C);
                    let aa = real::<F>(GELU_A);
                    let half = real::<F>(0.5);
                    let three = real::<F>(3.0);
                    let d: Vec<F> = self.nodes[x]
                        .data
                        .iter()
                        .zip(gout)
                        .map(|(&v, &g)| {
                            let u = cc * (v + aa * v * v * v);
                            let t = u.tanh();
                            let du = cc * (F::one() + three * aa * v * v);
                            g * (half * (F::one() + t) + half * v * (F::one() - t * t) * du)
                        })
                        .collect();
                    Self::acc(&mut self.grads, x, d);
                }
            }
            Op::Embed { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                if self.needs(table) {
                    let (v, w) = self.shape(table);
                    let mut d = vec![F::zero(); v * w];
                    for (r, &id0) in ids.iter().enumerate() {
                        let src = &gout[r * w..(r + 1) * w];
                        let dst = &mut d[id0 * w..(id0 + 1) * w];
                        for (dj, &s) in dst.iter_mut().zip(src) {
                            *dj += s;
                        }
                    }
                    Self::acc(&mut self.grads, table, d);
                }
            }
            Op::GatherRows { x, rows: sel } => {
                let x = *x;
                let sel = sel.clone();
                if self.needs(x) {
                    let (r, c) = self.shape(x);
                    let mut d = vec![F::zero(); r * c];
                    for (out_r, &src_r) in sel.iter().enumerate() {
                        let src = &gout[out_r * c..(out_r + 1) * c];
                        let dst = &mut d[src_r * c..(src_r + 1) * c];
                        for (dj, &s) in dst.iter_mut().zip(src) {
                            *dj += s;
                        }
                    }
                    Self::acc(&mut self.grads, x, d);
                }
            }
            Op::GatherElems { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                if self.needs(x) {
                    let n = self.nodes[x].data.len();
                    let mut d = vec![F::zero(); n];
                    for (e, &i) in idx.iter().enumerate() {
                        d[i] += gout[e];
                    }
                    Self::acc(&mut self.grads, x, d);
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                if self.needs(x) {
                    let (r, c) = self.shape(x);
                    let mut d = vec![F::zero(); r * c];
                    for rr in 0..r {
                        let src = &gout[rr * len..(rr + 1) * len];
                        let dst = &mut d[rr * c + start..rr * c + start + len];
                        dst.copy_from_slice(src);
                    }
                    Self::acc(&mut self.grads, x, d);
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.shape(p);
                    if self.needs(p) {
                        let d = gout[off..off + r * c].to_vec();
                        Self::acc(&mut self.grads, p, d);
                    }
                    off += r * c;
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let mut col0 = 0;
                for p in parts {
                    let (r, c) = self.shape(p);
                    if self.needs(p) {
                        let mut d = vec![F::zero(); r * c];
                        for rr in 0..r {
                            d[rr * c..(rr + 1) * c]
                                .copy_from_slice(&gout[rr * cols + col0..rr * cols + col0 + c]);
                        }
                        Self::acc(&mut self.grads, p, d);
                    }
                    col0 += c;
                }
            }
            Op::L2NormRows { x } => {
                let x = *x;
                if self.needs(x) {
                    let y = &self.nodes[id].data;
                    let xv = &self.nodes[x].data;
                    let mut d = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        let xrow = &xv[r * cols..(r + 1) * cols];
                        let yrow = &y[r * cols..(r + 1) * cols];
                        let grow = &gout[r * cols..(r + 1) * cols];
                        let norm = xrow.iter().map(|&v| v * v).sum::<F>().sqrt();
                        let dot: F = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        let drow = &mut d[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            drow[j] = (grow[j] - yrow[j] * dot) / norm;
                        }
                    }
                    Self::acc(&mut self.grads, x, d);
                }
            }
            Op::CeHard { probs, targets } => {
                let probs = *probs;
                let targets = targets.clone();
                if self.needs(probs) {
                    let (r, c) = self.shape(probs);
                    let floor = real::<F>(LOG_FLOOR);
                    let mut d = vec![F::zero(); r * c];
                    for (i, &t) in targets.iter().enumerate() {
                        let pv = self.nodes[probs].data[i * c + t];
                        if pv > floor {
                            d[i * c + t] = -gout[i] / pv;
                        }
                    }
                    Self::acc(&mut self.grads, probs, d);
                }
            }
            Op::CeSoft { p, q } => {
                let (p, q) = (*p, *q);
                let (r, c) = self.shape(p);
                let floor = real::<F>(LOG_FLOOR);
                if self.needs(p) {
                    let mut d = vec![F::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let pv = self.nodes[p].data[i * c + j];
                            if pv > floor {
                                d[i * c + j] = -gout[i] * self.nodes[q].data[i * c + j] / pv;
                            }
                        }
                    }
                    Self::acc(&mut self.grads, p, d);
                }
                if self.needs(q) {
                    let mut d = vec![F::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let pv = self.nodes[p].data[i * c + j].max(floor);
                            d[i * c + j] = -gout[i] * pv.ln();
                        }
                    }
                    Self::acc(&mut self.grads, q, d);
                }
            }
            Op::SumAll { x } => {
                let x = *x;
                if self.needs(x) {
                    let n = self.nodes[x].data.len();
                    let d = vec![gout[0]; n];
                    Self::acc(&mut self.grads, x, d);
                }
            }
        }
    }
}

fn rows_of(shape: (usize, usize)) -> usize {
    shape.0
}

/// Row-major A (MxK) times B (KxN); the k-inner loop keeps stores contiguous
/// and the per-element accumulation order fixed regardless of threading.
fn matmul_ikj<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn transpose<F: Real>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Builds the transpose of a matrix node via element gather, so the result
/// stays differentiable.
pub fn transpose_node<F: Real>(tape: &mut Tape<F>, x: NodeId) -> Result<NodeId> {
    let (r, c) = tape.shape(x);
    let mut idx = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            idx.push(i * c + j);
        }
    }
    tape.gather_elems(x, &idx, c, r)
}
