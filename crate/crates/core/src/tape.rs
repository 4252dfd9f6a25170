//! Recording tape for reverse-mode differentiation.
//!
//! Every forward primitive appends one node holding its inputs, any saved
//! state (dropout masks, lookup ids) and the output tensor. Nodes are in
//! topological order by construction, so [`backward`] is a single reverse
//! sweep that accumulates vector-Jacobian products. A tape is built per
//! batch and dropped afterwards.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dd::Dd;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Matmul { a: ValueId, b: ValueId },
    Transpose { x: ValueId },
    Add { a: ValueId, b: ValueId },
    /// `out[i][j] = m[i][j] + v[i]` (column vector broadcast over columns).
    AddColVec { m: ValueId, v: ValueId },
    Mul { a: ValueId, b: ValueId },
    /// Concatenation along the last axis (vectors end to end, matrices side
    /// by side).
    ConcatLast { parts: Vec<ValueId> },
    /// Vertical concatenation of matrices (rows stacked).
    ConcatRows { parts: Vec<ValueId> },
    /// Stack k vectors of length w into a `[k, w]` matrix.
    StackRows { rows: Vec<ValueId> },
    /// Stack k vectors of length h into an `[h, k]` matrix.
    StackCols { cols: Vec<ValueId> },
    Row { x: ValueId, i: usize },
    Col { x: ValueId, j: usize },
    SliceVec { x: ValueId, start: usize, len: usize },
    SliceBlock { x: ValueId, r0: usize, c0: usize, rows: usize, cols: usize },
    Tanh { x: ValueId },
    Sigmoid { x: ValueId },
    /// Row-level softmax; `mask` (one flag per column) excludes positions,
    /// which come out exactly 0.
    RowSoftmax { x: ValueId, mask: Option<Vec<bool>> },
    EmbedLookup { table: ValueId, ids: Vec<usize> },
    /// Inverted dropout; `mask` holds 0 or 1/(1-rate) per element.
    Dropout { x: ValueId, mask: Vec<f64> },
    /// Stable log-sum-exp of a vector, scalar output.
    LogSumExp { x: ValueId },
    /// Stable log-sum-exp down each column of a matrix, vector output.
    LogSumExpCols { x: ValueId },
    /// `sum_t w_t * x_t` over same-shaped tensors with constant weights.
    WeightedSum { terms: Vec<(ValueId, f64)> },
    Sum { x: ValueId },
    /// Pick out elements `(r, c)` of a matrix into a vector. Repeated
    /// positions are allowed and their gradients accumulate.
    GatherElems { x: ValueId, idx: Vec<(usize, usize)> },
    /// Tile a vector of length d into a `[d, n]` matrix.
    RepeatCol { v: ValueId, n: usize },
    /// `logsumexp(logits) - logits[target]`, scalar output.
    CeLogits { logits: ValueId, target: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

pub struct Tape {
    nodes: Vec<Node>,
    train: bool,
    rng: Option<ChaCha8Rng>,
    /// True once any stochastic node (dropout draw) has been recorded.
    stochastic: bool,
}

impl Tape {
    /// Deterministic tape: dropout is the identity.
    pub fn eval() -> Self {
        Tape {
            nodes: Vec::new(),
            train: false,
            rng: None,
            stochastic: false,
        }
    }

    /// Training tape: dropout draws masks from `rng`.
    pub fn train(rng: ChaCha8Rng) -> Self {
        Tape {
            nodes: Vec::new(),
            train: true,
            rng: Some(rng),
            stochastic: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn recorded_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// The single element of a scalar node.
    pub fn scalar_value(&self, id: ValueId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.push(Op::Constant, t)
    }

    pub fn constant_vec(&mut self, v: Vec<f64>) -> ValueId {
        self.constant(Tensor::vector(v))
    }

    /// Record a parameter leaf, copying its current value onto the tape.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> ValueId {
        let value = store.value(id).clone();
        self.push(Op::Param(id), value)
    }

    // --- primitives -----------------------------------------------------

    /// Matrix product. Accepts `[m,k]x[k,n]`, `[m,k]x[k]` and `[k]x[k,n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = match (ta.rank(), tb.rank()) {
            (2, 2) => {
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let (k2, n) = (tb.shape()[0], tb.shape()[1]);
                if k != k2 {
                    return Err(shape_err("matmul", ta, tb));
                }
                let mut c = vec![0.0; m * n];
                matmul_into(ta.data(), tb.data(), &mut c, m, k, n);
                Tensor::new(vec![m, n], c)?
            }
            (2, 1) => {
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                if k != tb.shape()[0] {
                    return Err(shape_err("matmul", ta, tb));
                }
                let mut c = vec![0.0; m];
                for i in 0..m {
                    let row = &ta.data()[i * k..(i + 1) * k];
                    c[i] = row.iter().zip(tb.data()).map(|(x, y)| x * y).sum();
                }
                Tensor::vector(c)
            }
            (1, 2) => {
                let k = ta.shape()[0];
                let (k2, n) = (tb.shape()[0], tb.shape()[1]);
                if k != k2 {
                    return Err(shape_err("matmul", ta, tb));
                }
                let mut c = vec![0.0; n];
                for (kk, &av) in ta.data().iter().enumerate() {
                    let brow = &tb.data()[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        c[j] += av * brow[j];
                    }
                }
                Tensor::vector(c)
            }
            _ => return Err(shape_err("matmul", ta, tb)),
        };
        Ok(self.push(Op::Matmul { a, b }, out))
    }

    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out)?;
        Ok(self.push(Op::Transpose { x }, out))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn add_col_vec(&mut self, m: ValueId, v: ValueId) -> Result<ValueId> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.rank() != 2 || tv.rank() != 1 || tm.shape()[0] != tv.shape()[0] {
            return Err(shape_err("add_col_vec", tm, tv));
        }
        let (r, c) = (tm.shape()[0], tm.shape()[1]);
        let mut data = tm.data().to_vec();
        for i in 0..r {
            let vi = tv.data()[i];
            for x in &mut data[i * c..(i + 1) * c] {
                *x += vi;
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(Op::AddColVec { m, v }, out))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul { a, b }, out))
    }

    /// Concatenate along the last axis. All parts must share rank and, for
    /// matrices, the row count.
    pub fn concat_last(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts".to_string()));
        }
        let rank = self.value(parts[0]).rank();
        let out = match rank {
            1 => {
                let mut data = Vec::new();
                for &p in parts {
                    let t = self.value(p);
                    if t.rank() != 1 {
                        return Err(Error::shape("concat", format!("mixed ranks, got {:?}", t.shape())));
                    }
                    data.extend_from_slice(t.data());
                }
                Tensor::vector(data)
            }
            2 => {
                let rows = self.value(parts[0]).shape()[0];
                let total: usize = {
                    let mut w = 0;
                    for &p in parts {
                        let t = self.value(p);
                        if t.rank() != 2 || t.shape()[0] != rows {
                            return Err(Error::shape(
                                "concat",
                                format!("expected {rows} rows, got {:?}", t.shape()),
                            ));
                        }
                        w += t.shape()[1];
                    }
                    w
                };
                let mut data = vec![0.0; rows * total];
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let w = t.shape()[1];
                    for i in 0..rows {
                        data[i * total + off..i * total + off + w]
                            .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
                    }
                    off += w;
                }
                Tensor::new(vec![rows, total], data)?
            }
            _ => return Err(Error::shape("concat", format!("rank {rank} unsupported"))),
        };
        Ok(self.push(Op::ConcatLast { parts: parts.to_vec() }, out))
    }

    /// Stack matrices vertically (shared column count).
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no parts".to_string()));
        }
        let cols = self.value(parts[0]).shape().get(1).copied().unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[1] != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("expected {cols} cols, got {:?}", t.shape()),
                ));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, out))
    }

    /// Stack k vectors of length w into a `[k, w]` matrix.
    pub fn stack_rows(&mut self, rows: &[ValueId]) -> Result<ValueId> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows", "no rows".to_string()));
        }
        let w = self.value(rows[0]).shape()[0];
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.shape()[0] != w {
                return Err(Error::shape(
                    "stack_rows",
                    format!("expected vector of {w}, got {:?}", t.shape()),
                ));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows.len(), w], data)?;
        Ok(self.push(Op::StackRows { rows: rows.to_vec() }, out))
    }

    /// Stack k vectors of length h into an `[h, k]` matrix (as columns).
    pub fn stack_cols(&mut self, cols: &[ValueId]) -> Result<ValueId> {
        if cols.is_empty() {
            return Err(Error::shape("stack_cols", "no columns".to_string()));
        }
        let h = self.value(cols[0]).shape()[0];
        let k = cols.len();
        let mut data = vec![0.0; h * k];
        for (j, &c) in cols.iter().enumerate() {
            let t = self.value(c);
            if t.rank() != 1 || t.shape()[0] != h {
                return Err(Error::shape(
                    "stack_cols",
                    format!("expected vector of {h}, got {:?}", t.shape()),
                ));
            }
            for i in 0..h {
                data[i * k + j] = t.data()[i];
            }
        }
        let out = Tensor::new(vec![h, k], data)?;
        Ok(self.push(Op::StackCols { cols: cols.to_vec() }, out))
    }

    pub fn row(&mut self, x: ValueId, i: usize) -> Result<ValueId> {
        let t = self.value(x);
        if t.rank() != 2 || i >= t.shape()[0] {
            return Err(Error::shape("row", format!("row {i} of {:?}", t.shape())));
        }
        let out = Tensor::vector(t.row_slice(i).to_vec());
        Ok(self.push(Op::Row { x, i }, out))
    }

    pub fn col(&mut self, x: ValueId, j: usize) -> Result<ValueId> {
        let t = self.value(x);
        if t.rank() != 2 || j >= t.shape()[1] {
            return Err(Error::shape("col", format!("col {j} of {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let data = (0..r).map(|i| t.data()[i * c + j]).collect();
        Ok(self.push(Op::Col { x, j }, Tensor::vector(data)))
    }

    pub fn slice_vec(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let t = self.value(x);
        if t.rank() != 1 || start + len > t.shape()[0] {
            return Err(Error::shape(
                "slice",
                format!("[{start}..{}] of {:?}", start + len, t.shape()),
            ));
        }
        let out = Tensor::vector(t.data()[start..start + len].to_vec());
        Ok(self.push(Op::SliceVec { x, start, len }, out))
    }

    pub fn slice_block(
        &mut self,
        x: ValueId,
        r0: usize,
        c0: usize,
        rows: usize,
        cols: usize,
    ) -> Result<ValueId> {
        let t = self.value(x);
        if t.rank() != 2 || r0 + rows > t.shape()[0] || c0 + cols > t.shape()[1] {
            return Err(Error::shape(
                "slice_block",
                format!("block ({r0},{c0})+({rows},{cols}) of {:?}", t.shape()),
            ));
        }
        let w = t.shape()[1];
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let base = (r0 + i) * w + c0;
            data.extend_from_slice(&t.data()[base..base + cols]);
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::SliceBlock { x, r0, c0, rows, cols }, out))
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("tanh shape");
        self.push(Op::Tanh { x }, out)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("sigmoid shape");
        self.push(Op::Sigmoid { x }, out)
    }

    /// Softmax over the last axis, one row at a time. `mask` holds one flag
    /// per column; masked positions get probability exactly 0. A fully
    /// masked row comes out all zero.
    pub fn row_softmax(&mut self, x: ValueId, mask: Option<&[bool]>) -> Result<ValueId> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::shape(
                    "row_softmax",
                    format!("mask len {} vs {cols} columns of {:?}", m.len(), t.shape()),
                ));
            }
        }
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &t.data()[i * cols..(i + 1) * cols];
            let out = &mut data[i * cols..(i + 1) * cols];
            softmax_row(row, mask, out);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(
            Op::RowSoftmax { x, mask: mask.map(|m| m.to_vec()) },
            out,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed_lookup(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embed_lookup", format!("table {:?}", t.shape())));
        }
        if ids.is_empty() {
            return Err(Error::invalid("embed_lookup: empty id list (n >= 1 required)"));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid(format!(
                    "embed_lookup: id {id} out of range for table with {v} rows"
                )));
            }
            data.extend_from_slice(t.row_slice(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(Op::EmbedLookup { table, ids: ids.to_vec() }, out))
    }

    /// Inverted dropout: identity in eval mode, keep/(1-rate) scaling in
    /// train mode.
    pub fn dropout(&mut self, x: ValueId, rate: f64) -> ValueId {
        if !self.train || rate <= 0.0 {
            return x;
        }
        assert!(rate < 1.0, "dropout rate must be < 1");
        let n = self.value(x).numel();
        let scale = 1.0 / (1.0 - rate);
        let rng = self.rng.as_mut().expect("training tape has an rng");
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        self.stochastic = true;
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("dropout shape");
        self.push(Op::Dropout { x, mask }, out)
    }

    /// Stable `max(v) + log(sum(exp(v - max(v))))` of a vector.
    pub fn logsumexp(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        if t.rank() != 1 {
            return Err(Error::shape("logsumexp", format!("expected vector, got {:?}", t.shape())));
        }
        let out = Tensor::scalar(logsumexp_slice(t.data()));
        Ok(self.push(Op::LogSumExp { x }, out))
    }

    /// Stable log-sum-exp down each column of a matrix.
    pub fn logsumexp_cols(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape(
                "logsumexp_cols",
                format!("expected matrix, got {:?}", t.shape()),
            ));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; c];
        let mut col = vec![0.0; r];
        for j in 0..c {
            for i in 0..r {
                col[i] = t.data()[i * c + j];
            }
            out[j] = logsumexp_slice(&col);
        }
        Ok(self.push(Op::LogSumExpCols { x }, Tensor::vector(out)))
    }

    /// Weighted sum of same-shaped tensors with constant scalar weights.
    pub fn weighted_sum(&mut self, terms: &[(ValueId, f64)]) -> Result<ValueId> {
        if terms.is_empty() {
            return Err(Error::shape("weighted_sum", "no terms".to_string()));
        }
        let shape = self.value(terms[0].0).shape().to_vec();
        let mut data = vec![0.0; self.value(terms[0].0).numel()];
        for &(id, w) in terms {
            let t = self.value(id);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("expected {:?}, got {:?}", shape, t.shape()),
                ));
            }
            for (acc, &v) in data.iter_mut().zip(t.data()) {
                *acc += w * v;
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::WeightedSum { terms: terms.to_vec() }, out))
    }

    /// Scale by a constant.
    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        self.weighted_sum(&[(x, c)])
    }

    /// `a - b` for same-shaped tensors.
    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.weighted_sum(&[(a, 1.0), (b, -1.0)])
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    pub fn gather_elems(&mut self, x: ValueId, idx: &[(usize, usize)]) -> Result<ValueId> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("gather_elems", format!("expected matrix, got {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(idx.len());
        for &(i, j) in idx {
            if i >= r || j >= c {
                return Err(Error::invalid(format!(
                    "gather_elems: ({i},{j}) out of range for shape [{r}, {c}]"
                )));
            }
            data.push(t.data()[i * c + j]);
        }
        Ok(self.push(Op::GatherElems { x, idx: idx.to_vec() }, Tensor::vector(data)))
    }

    pub fn repeat_col(&mut self, v: ValueId, n: usize) -> Result<ValueId> {
        let t = self.value(v);
        if t.rank() != 1 || n == 0 {
            return Err(Error::shape("repeat_col", format!("vector {:?} x {n}", t.shape())));
        }
        let d = t.shape()[0];
        let mut data = vec![0.0; d * n];
        for i in 0..d {
            let vi = t.data()[i];
            for j in 0..n {
                data[i * n + j] = vi;
            }
        }
        let out = Tensor::new(vec![d, n], data)?;
        Ok(self.push(Op::RepeatCol { v, n }, out))
    }

    /// Softmax cross-entropy with logits against a single target index.
    pub fn ce_logits(&mut self, logits: ValueId, target: usize) -> Result<ValueId> {
        let t = self.value(logits);
        if t.rank() != 1 {
            return Err(Error::shape("ce_logits", format!("expected vector, got {:?}", t.shape())));
        }
        if target >= t.shape()[0] {
            return Err(Error::invalid(format!(
                "ce_logits: target {target} out of range for {} logits",
                t.shape()[0]
            )));
        }
        let loss = logsumexp_slice(t.data()) - t.data()[target];
        Ok(self.push(Op::CeLogits { logits, target }, Tensor::scalar(loss)))
    }

    /// Re-evaluate the recorded graph up to `root` in double-double
    /// precision and return the scalar result.
    ///
    /// Leaves (constants, parameter copies, dropout masks) reuse the
    /// recorded f64 values; everything downstream is recomputed with
    /// about 106 mantissa bits. The finite-difference checker relies on
    /// this: the difference of two losses evaluated in plain f64 carries
    /// rounding noise around 1e-11 absolute, which would swamp central
    /// differences for small gradient elements.
    pub fn eval_dd(&self, root: ValueId) -> Result<Dd> {
        if !self.value(root).is_scalar() {
            return Err(Error::invalid(format!(
                "eval_dd: root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut vals: Vec<Vec<Dd>> = Vec::with_capacity(root.0 + 1);
        for node in &self.nodes[..=root.0] {
            let get = |id: ValueId| -> &[Dd] { &vals[id.0] };
            let shape_of = |id: ValueId| self.nodes[id.0].value.shape();
            let out: Vec<Dd> = match &node.op {
                Op::Constant | Op::Param(_) => {
                    node.value.data().iter().map(|&v| Dd::from(v)).collect()
                }
                Op::Matmul { a, b } => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (da, db) = (get(*a), get(*b));
                    match (ta.rank(), tb.rank()) {
                        (2, 2) => {
                            let (m, k) = (ta.shape()[0], ta.shape()[1]);
                            let n = tb.shape()[1];
                            let mut c = vec![Dd::ZERO; m * n];
                            for i in 0..m {
                                for kk in 0..k {
                                    let av = da[i * k + kk];
                                    for j in 0..n {
                                        c[i * n + j] = c[i * n + j] + av * db[kk * n + j];
                                    }
                                }
                            }
                            c
                        }
                        (2, 1) => {
                            let (m, k) = (ta.shape()[0], ta.shape()[1]);
                            (0..m)
                                .map(|i| {
                                    let mut s = Dd::ZERO;
                                    for kk in 0..k {
                                        s = s + da[i * k + kk] * db[kk];
                                    }
                                    s
                                })
                                .collect()
                        }
                        (1, 2) => {
                            let k = ta.shape()[0];
                            let n = tb.shape()[1];
                            let mut c = vec![Dd::ZERO; n];
                            for kk in 0..k {
                                for j in 0..n {
                                    c[j] = c[j] + da[kk] * db[kk * n + j];
                                }
                            }
                            c
                        }
                        _ => unreachable!("matmul ranks checked at record time"),
                    }
                }
                Op::Transpose { x } => {
                    let (r, c) = (shape_of(*x)[0], shape_of(*x)[1]);
                    let d = get(*x);
                    let mut out = vec![Dd::ZERO; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j * r + i] = d[i * c + j];
                        }
                    }
                    out
                }
                Op::Add { a, b } => {
                    get(*a).iter().zip(get(*b)).map(|(&x, &y)| x + y).collect()
                }
                Op::AddColVec { m, v } => {
                    let (r, c) = (shape_of(*m)[0], shape_of(*m)[1]);
                    let (dm, dv) = (get(*m), get(*v));
                    let mut out = dm.to_vec();
                    for i in 0..r {
                        for j in 0..c {
                            out[i * c + j] = out[i * c + j] + dv[i];
                        }
                    }
                    out
                }
                Op::Mul { a, b } => {
                    get(*a).iter().zip(get(*b)).map(|(&x, &y)| x * y).collect()
                }
                Op::ConcatLast { parts } => {
                    if self.nodes[parts[0].0].value.rank() == 1 {
                        parts.iter().flat_map(|p| get(*p).iter().copied()).collect()
                    } else {
                        let rows = shape_of(parts[0])[0];
                        let total: usize = parts.iter().map(|p| shape_of(*p)[1]).sum();
                        let mut out = vec![Dd::ZERO; rows * total];
                        let mut off = 0;
                        for &p in parts {
                            let w = shape_of(p)[1];
                            let d = get(p);
                            for i in 0..rows {
                                out[i * total + off..i * total + off + w]
                                    .copy_from_slice(&d[i * w..(i + 1) * w]);
                            }
                            off += w;
                        }
                        out
                    }
                }
                Op::ConcatRows { parts } | Op::StackRows { rows: parts } => {
                    parts.iter().flat_map(|p| get(*p).iter().copied()).collect()
                }
                Op::StackCols { cols } => {
                    let h = shape_of(cols[0])[0];
                    let k = cols.len();
                    let mut out = vec![Dd::ZERO; h * k];
                    for (j, &c) in cols.iter().enumerate() {
                        let d = get(c);
                        for i in 0..h {
                            out[i * k + j] = d[i];
                        }
                    }
                    out
                }
                Op::Row { x, i } => {
                    let c = shape_of(*x)[1];
                    get(*x)[i * c..(i + 1) * c].to_vec()
                }
                Op::Col { x, j } => {
                    let (r, c) = (shape_of(*x)[0], shape_of(*x)[1]);
                    let d = get(*x);
                    (0..r).map(|i| d[i * c + j]).collect()
                }
                Op::SliceVec { x, start, len } => get(*x)[*start..start + len].to_vec(),
                Op::SliceBlock { x, r0, c0, rows, cols } => {
                    let w = shape_of(*x)[1];
                    let d = get(*x);
                    let mut out = Vec::with_capacity(rows * cols);
                    for i in 0..*rows {
                        let base = (r0 + i) * w + c0;
                        out.extend_from_slice(&d[base..base + cols]);
                    }
                    out
                }
                Op::Tanh { x } => get(*x).iter().map(|v| v.tanh()).collect(),
                Op::Sigmoid { x } => get(*x).iter().map(|v| v.sigmoid()).collect(),
                Op::RowSoftmax { x, mask } => {
                    let t = &self.nodes[x.0].value;
                    let (rows, cols) = (t.rows(), t.cols());
                    let d = get(*x);
                    let mut out = vec![Dd::ZERO; rows * cols];
                    for i in 0..rows {
                        let row = &d[i * cols..(i + 1) * cols];
                        let live = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
                        let mut mx: Option<Dd> = None;
                        for (j, &v) in row.iter().enumerate() {
                            if live(j) && mx.map_or(true, |m| v > m) {
                                mx = Some(v);
                            }
                        }
                        let Some(mx) = mx else { continue };
                        let mut sum = Dd::ZERO;
                        for (j, &v) in row.iter().enumerate() {
                            if live(j) {
                                let e = (v - mx).exp();
                                out[i * cols + j] = e;
                                sum = sum + e;
                            }
                        }
                        for j in 0..cols {
                            if live(j) {
                                out[i * cols + j] = out[i * cols + j] / sum;
                            }
                        }
                    }
                    out
                }
                Op::EmbedLookup { table, ids } => {
                    let d = shape_of(*table)[1];
                    let td = get(*table);
                    let mut out = Vec::with_capacity(ids.len() * d);
                    for &id in ids {
                        out.extend_from_slice(&td[id * d..(id + 1) * d]);
                    }
                    out
                }
                Op::Dropout { x, mask } => get(*x)
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| v * m)
                    .collect(),
                Op::LogSumExp { x } => vec![logsumexp_dd(get(*x))],
                Op::LogSumExpCols { x } => {
                    let (r, c) = (shape_of(*x)[0], shape_of(*x)[1]);
                    let d = get(*x);
                    (0..c)
                        .map(|j| {
                            let col: Vec<Dd> = (0..r).map(|i| d[i * c + j]).collect();
                            logsumexp_dd(&col)
                        })
                        .collect()
                }
                Op::WeightedSum { terms } => {
                    let n = self.nodes[terms[0].0 .0].value.numel();
                    let mut out = vec![Dd::ZERO; n];
                    for &(id, w) in terms {
                        for (acc, &v) in out.iter_mut().zip(get(id)) {
                            *acc = *acc + v * w;
                        }
                    }
                    out
                }
                Op::Sum { x } => {
                    let mut s = Dd::ZERO;
                    for &v in get(*x) {
                        s = s + v;
                    }
                    vec![s]
                }
                Op::GatherElems { x, idx } => {
                    let c = shape_of(*x)[1];
                    let d = get(*x);
                    idx.iter().map(|&(i, j)| d[i * c + j]).collect()
                }
                Op::RepeatCol { v, n } => {
                    let d = get(*v);
                    let mut out = Vec::with_capacity(d.len() * n);
                    for &vi in d {
                        for _ in 0..*n {
                            out.push(vi);
                        }
                    }
                    out
                }
                Op::CeLogits { logits, target } => {
                    let d = get(*logits);
                    vec![logsumexp_dd(d) - d[*target]]
                }
            };
            debug_assert_eq!(out.len(), node.value.numel(), "{}", op_name(&node.op));
            vals.push(out);
        }
        Ok(vals[root.0][0])
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param(_) => "param",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::AddColVec { .. } => "add_col_vec",
        Op::Mul { .. } => "mul",
        Op::ConcatLast { .. } => "concat",
        Op::ConcatRows { .. } => "concat_rows",
        Op::StackRows { .. } => "stack_rows",
        Op::StackCols { .. } => "stack_cols",
        Op::Row { .. } => "row",
        Op::Col { .. } => "col",
        Op::SliceVec { .. } => "slice",
        Op::SliceBlock { .. } => "slice_block",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::RowSoftmax { .. } => "row_softmax",
        Op::EmbedLookup { .. } => "embed_lookup",
        Op::Dropout { .. } => "dropout",
        Op::LogSumExp { .. } => "logsumexp",
        Op::LogSumExpCols { .. } => "logsumexp_cols",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::Sum { .. } => "sum",
        Op::GatherElems { .. } => "gather_elems",
        Op::RepeatCol { .. } => "repeat_col",
        Op::CeLogits { .. } => "ce_logits",
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::shape(op, format!("{:?} and {:?} do not conform", a.shape(), b.shape()))
}

/// ikj-order matmul kernel, `c += a x b` with `c` zeroed by the caller.
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn logsumexp_dd(v: &[Dd]) -> Dd {
    let mut mx = v[0];
    for &x in &v[1..] {
        mx = mx.max(x);
    }
    let mut sum = Dd::ZERO;
    for &x in v {
        sum = sum + (x - mx).exp();
    }
    mx + sum.ln()
}

pub(crate) fn logsumexp_slice(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_row(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let live = |j: usize| mask.map_or(true, |m| m[j]);
    let mut any_live = false;
    let mut mx = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if live(j) {
            any_live = true;
            if v > mx {
                mx = v;
            }
        }
    }
    if !any_live {
        out.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if live(j) {
            let e = (v - mx).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

// --- backward -----------------------------------------------------------

/// Reverse sweep: accumulates `d loss / d value` for every node reachable
/// from `loss` and flushes parameter leaves into `ParameterStore` grads.
/// Grads are zeroed first; parameters not reachable from the loss keep
/// zero grad.
pub fn backward(tape: &Tape, loss: ValueId, store: &mut ParameterStore) -> Result<()> {
    let lt = tape.value(loss);
    if !lt.is_scalar() {
        return Err(Error::invalid(format!(
            "backward: loss must be scalar, got shape {:?}",
            lt.shape()
        )));
    }
    store.zero_grads();
    let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
    grads.resize_with(loss.0 + 1, || None);
    grads[loss.0] = Some(vec![1.0]);

    for i in (0..=loss.0).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &tape.nodes[i];
        match &node.op {
            Op::Constant => {}
            Op::Param(pid) => store.accumulate_grad(*pid, &g),
            Op::Matmul { a, b } => {
                let (ta, tb) = (tape.value(*a), tape.value(*b));
                match (ta.rank(), tb.rank()) {
                    (2, 2) => {
                        let (m, k) = (ta.shape()[0], ta.shape()[1]);
                        let n = tb.shape()[1];
                        {
                            let da = grad_buf(&mut grads, *a, m * k);
                            // dA = g x B^T
                            for i2 in 0..m {
                                for kk in 0..k {
                                    let mut acc = 0.0;
                                    let grow = &g[i2 * n..(i2 + 1) * n];
                                    let brow = &tb.data()[kk * n..(kk + 1) * n];
                                    for j in 0..n {
                                        acc += grow[j] * brow[j];
                                    }
                                    da[i2 * k + kk] += acc;
                                }
                            }
                        }
                        let db = grad_buf(&mut grads, *b, k * n);
                        // dB = A^T x g
                        for i2 in 0..m {
                            let arow = &ta.data()[i2 * k..(i2 + 1) * k];
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            for (kk, &av) in arow.iter().enumerate() {
                                if av == 0.0 {
                                    continue;
                                }
                                let dbrow = &mut db[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    dbrow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                    (2, 1) => {
                        let (m, k) = (ta.shape()[0], ta.shape()[1]);
                        {
                            let da = grad_buf(&mut grads, *a, m * k);
                            for i2 in 0..m {
                                let gi = g[i2];
                                for kk in 0..k {
                                    da[i2 * k + kk] += gi * tb.data()[kk];
                                }
                            }
                        }
                        let db = grad_buf(&mut grads, *b, k);
                        for i2 in 0..m {
                            let gi = g[i2];
                            let arow = &ta.data()[i2 * k..(i2 + 1) * k];
                            for kk in 0..k {
                                db[kk] += gi * arow[kk];
                            }
                        }
                    }
                    (1, 2) => {
                        let k = ta.shape()[0];
                        let n = tb.shape()[1];
                        {
                            let da = grad_buf(&mut grads, *a, k);
                            for kk in 0..k {
                                let brow = &tb.data()[kk * n..(kk + 1) * n];
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += brow[j] * g[j];
                                }
                                da[kk] += acc;
                            }
                        }
                        let db = grad_buf(&mut grads, *b, k * n);
                        for (kk, &av) in ta.data().iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let dbrow = &mut db[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                dbrow[j] += av * g[j];
                            }
                        }
                    }
                    _ => unreachable!("matmul rank checked in forward"),
                }
            }
            Op::Transpose { x } => {
                let t = tape.value(*x);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let dx = grad_buf(&mut grads, *x, r * c);
                for i2 in 0..r {
                    for j in 0..c {
                        dx[i2 * c + j] += g[j * r + i2];
                    }
                }
            }
            Op::Add { a, b } => {
                add_into(grad_buf(&mut grads, *a, g.len()), &g, 1.0);
                add_into(grad_buf(&mut grads, *b, g.len()), &g, 1.0);
            }
            Op::AddColVec { m, v } => {
                let (r, c) = {
                    let t = tape.value(*m);
                    (t.shape()[0], t.shape()[1])
                };
                add_into(grad_buf(&mut grads, *m, r * c), &g, 1.0);
                let dv = grad_buf(&mut grads, *v, r);
                for i2 in 0..r {
                    dv[i2] += g[i2 * c..(i2 + 1) * c].iter().sum::<f64>();
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (tape.value(*a), tape.value(*b));
                {
                    let da = grad_buf(&mut grads, *a, g.len());
                    for (d, (&gv, &bv)) in da.iter_mut().zip(g.iter().zip(tb.data())) {
                        *d += gv * bv;
                    }
                }
                let db = grad_buf(&mut grads, *b, g.len());
                for (d, (&gv, &av)) in db.iter_mut().zip(g.iter().zip(ta.data())) {
                    *d += gv * av;
                }
            }
            Op::ConcatLast { parts } => {
                if tape.value(parts[0]).rank() == 1 {
                    let mut off = 0;
                    for &p in parts {
                        let n = tape.value(p).numel();
                        add_into(grad_buf(&mut grads, p, n), &g[off..off + n], 1.0);
                        off += n;
                    }
                } else {
                    let rows = tape.value(parts[0]).shape()[0];
                    let total: usize = parts.iter().map(|&p| tape.value(p).shape()[1]).sum();
                    let mut off = 0;
                    for &p in parts {
                        let w = tape.value(p).shape()[1];
                        let dp = grad_buf(&mut grads, p, rows * w);
                        for i2 in 0..rows {
                            for j in 0..w {
                                dp[i2 * w + j] += g[i2 * total + off + j];
                            }
                        }
                        off += w;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = tape.value(p).numel();
                    add_into(grad_buf(&mut grads, p, n), &g[off..off + n], 1.0);
                    off += n;
                }
            }
            Op::StackRows { rows } => {
                let w = tape.value(rows[0]).shape()[0];
                for (i2, &r) in rows.iter().enumerate() {
                    add_into(grad_buf(&mut grads, r, w), &g[i2 * w..(i2 + 1) * w], 1.0);
                }
            }
            Op::StackCols { cols } => {
                let h = tape.value(cols[0]).shape()[0];
                let k = cols.len();
                for (j, &c) in cols.iter().enumerate() {
                    let dc = grad_buf(&mut grads, c, h);
                    for i2 in 0..h {
                        dc[i2] += g[i2 * k + j];
                    }
                }
            }
            Op::Row { x, i: ri } => {
                let w = tape.value(*x).shape()[1];
                let numel = tape.value(*x).numel();
                let dx = grad_buf(&mut grads, *x, numel);
                add_into(&mut dx[ri * w..(ri + 1) * w], &g, 1.0);
            }
            Op::Col { x, j } => {
                let t = tape.value(*x);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let dx = grad_buf(&mut grads, *x, r * c);
                for i2 in 0..r {
                    dx[i2 * c + j] += g[i2];
                }
            }
            Op::SliceVec { x, start, len } => {
                let numel = tape.value(*x).numel();
                let dx = grad_buf(&mut grads, *x, numel);
                add_into(&mut dx[*start..*start + *len], &g, 1.0);
            }
            Op::SliceBlock { x, r0, c0, rows, cols } => {
                let w = tape.value(*x).shape()[1];
                let numel = tape.value(*x).numel();
                let dx = grad_buf(&mut grads, *x, numel);
                for i2 in 0..*rows {
                    let base = (*r0 + i2) * w + *c0;
                    for j in 0..*cols {
                        dx[base + j] += g[i2 * cols + j];
                    }
                }
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let dx = grad_buf(&mut grads, *x, g.len());
                for (d, (&gv, &yv)) in dx.iter_mut().zip(g.iter().zip(y)) {
                    *d += gv * (1.0 - yv * yv);
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx = grad_buf(&mut grads, *x, g.len());
                for (d, (&gv, &yv)) in dx.iter_mut().zip(g.iter().zip(y)) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
            Op::RowSoftmax { x, mask } => {
                let y = &node.value;
                let (rows, cols) = (y.rows(), y.cols());
                let dx = grad_buf(&mut grads, *x, rows * cols);
                for i2 in 0..rows {
                    let yr = &y.data()[i2 * cols..(i2 + 1) * cols];
                    let gr = &g[i2 * cols..(i2 + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        let live = mask.as_ref().map_or(true, |m| m[j]);
                        if live {
                            dx[i2 * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::EmbedLookup { table, ids } => {
                let d = tape.value(*table).shape()[1];
                let numel = tape.value(*table).numel();
                let dt = grad_buf(&mut grads, *table, numel);
                for (i2, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[i2 * d..(i2 + 1) * d], 1.0);
                }
            }
            Op::Dropout { x, mask } => {
                let dx = grad_buf(&mut grads, *x, g.len());
                for (d, (&gv, &mv)) in dx.iter_mut().zip(g.iter().zip(mask)) {
                    *d += gv * mv;
                }
            }
            Op::LogSumExp { x } => {
                let t = tape.value(*x);
                let y = node.value.item();
                let dx = grad_buf(&mut grads, *x, t.numel());
                for (d, &xv) in dx.iter_mut().zip(t.data()) {
                    *d += g[0] * (xv - y).exp();
                }
            }
            Op::LogSumExpCols { x } => {
                let t = tape.value(*x);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let y = node.value.data();
                let dx = grad_buf(&mut grads, *x, r * c);
                for i2 in 0..r {
                    for j in 0..c {
                        dx[i2 * c + j] += g[j] * (t.data()[i2 * c + j] - y[j]).exp();
                    }
                }
            }
            Op::WeightedSum { terms } => {
                for &(id, w) in terms {
                    add_into(grad_buf(&mut grads, id, g.len()), &g, w);
                }
            }
            Op::Sum { x } => {
                let n = tape.value(*x).numel();
                let dx = grad_buf(&mut grads, *x, n);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::GatherElems { x, idx } => {
                let c = tape.value(*x).shape()[1];
                let numel = tape.value(*x).numel();
                let dx = grad_buf(&mut grads, *x, numel);
                for (t, &(i2, j)) in idx.iter().enumerate() {
                    dx[i2 * c + j] += g[t];
                }
            }
            Op::RepeatCol { v, n } => {
                let d = tape.value(*v).shape()[0];
                let dv = grad_buf(&mut grads, *v, d);
                for i2 in 0..d {
                    dv[i2] += g[i2 * n..(i2 + 1) * n].iter().sum::<f64>();
                }
            }
            Op::CeLogits { logits, target } => {
                let t = tape.value(*logits);
                let n = t.numel();
                let dx = grad_buf(&mut grads, *logits, n);
                let m = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = t.data().iter().map(|v| (v - m).exp()).sum();
                for (j, &v) in t.data().iter().enumerate() {
                    let p = (v - m).exp() / sum;
                    let ind = if j == *target { 1.0 } else { 0.0 };
                    dx[j] += g[0] * (p - ind);
                }
            }
        }
    }
    store.grads_ready = true;
    Ok(())
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], id: ValueId, numel: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; numel])
}

fn add_into(dst: &mut [f64], src: &[f64], w: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * w;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;

    fn chacha(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn masked_softmax_symmetry() {
        let mut tape = Tape::eval();
        let x = tape.constant_vec(vec![0.0, 0.0]);
        let y = tape.row_softmax(x, Some(&[true, true])).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_excludes_masked_term() {
        let mut tape = Tape::eval();
        let x = tape.constant_vec(vec![5.0, 9.0, 2.0]);
        let y = tape.row_softmax(x, Some(&[true, false, true])).unwrap();
        let denom = 5f64.exp() + 2f64.exp();
        let got = tape.value(y).data();
        assert!((got[0] - 5f64.exp() / denom).abs() < 1e-12);
        assert_eq!(got[1], 0.0);
        assert!((got[2] - 2f64.exp() / denom).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_fully_masked_row_is_zero() {
        let mut tape = Tape::eval();
        let x = tape.constant_vec(vec![3.0, 4.0]);
        let y = tape.row_softmax(x, Some(&[false, false])).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn logsumexp_no_overflow() {
        let mut tape = Tape::eval();
        let x = tape.constant_vec(vec![1000.0, 1000.0]);
        let y = tape.logsumexp(x).unwrap();
        assert!((tape.scalar_value(y) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn logsumexp_matches_identity_for_large_magnitudes() {
        let mut tape = Tape::eval();
        for v in [vec![-1e6, 1e6], vec![1e6, 1e6, 1e6], vec![-3.0, 0.5, 2.0]] {
            let x = tape.constant_vec(v.clone());
            let y = tape.logsumexp(x).unwrap();
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let expect = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            assert!((tape.scalar_value(y) - expect).abs() < 1e-9);
            assert!(tape.scalar_value(y).is_finite());
        }
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut tape = Tape::eval();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(4, 5, vec![0.0; 20]).unwrap());
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn dd_replay_matches_eager_eval_across_all_ops() {
        // One program touching every primitive; the high-precision replay
        // must agree with the eager f64 pass to f64 accuracy.
        let mut store = ParameterStore::new();
        let mut rng = chacha(41);
        let w = store.add("w", vec![3, 4], Init::Glorot, &mut rng);
        let table = store.add("table", vec![5, 3], Init::Embedding, &mut rng);

        let mut tape = Tape::train(chacha(7));
        let wv = tape.param(&store, w);
        let tv = tape.param(&store, table);
        let e = tape.embed_lookup(tv, &[0, 2, 4, 1]).unwrap();
        let et = tape.transpose(e).unwrap();
        let c44 = tape_const(&mut tape, 4, 4);
        let m = tape.matmul(wv, c44).unwrap();
        let m = tape.add(m, et).unwrap();
        let m = tape.mul(m, m).unwrap();
        let bias = tape.constant_vec(vec![0.1, -0.2, 0.3]);
        let m = tape.add_col_vec(m, bias).unwrap();
        let m = tape.dropout(m, 0.3);
        let sm = tape.row_softmax(m, Some(&[true, true, false, true])).unwrap();
        let r0 = tape.row(sm, 0).unwrap();
        let c1 = tape.col(sm, 1).unwrap();
        let stack = tape.stack_rows(&[r0, r0]).unwrap();
        let cols = tape.stack_cols(&[c1, c1]).unwrap();
        let c14 = tape_const(&mut tape, 1, 4);
        let joined = tape.concat_rows(&[stack, c14]).unwrap();
        let wide = tape.concat_last(&[joined, joined]).unwrap();
        let blk = tape.slice_block(wide, 0, 2, 2, 3).unwrap();
        let th = tape.tanh(blk);
        let sg = tape.sigmoid(th);
        let lc = tape.logsumexp_cols(sg).unwrap();
        let sv = tape.slice_vec(lc, 1, 2).unwrap();
        let catv = tape.concat_last(&[sv, r0]).unwrap();
        let lse = tape.logsumexp(catv).unwrap();
        let ce = tape.ce_logits(catv, 2).unwrap();
        let rep = tape.repeat_col(sv, 3).unwrap();
        let g = tape.gather_elems(rep, &[(0, 1), (1, 2), (0, 1)]).unwrap();
        let gs = tape.sum(g);
        let colsum = tape.sum(cols);
        let v4 = tape_vec(&mut tape, 4);
        let mv = tape.matmul(wv, v4).unwrap();
        let v3 = tape_vec(&mut tape, 3);
        let vm = tape.matmul(v3, wv).unwrap();
        let mvs = tape.sum(mv);
        let vms = tape.sum(vm);
        let loss = tape
            .weighted_sum(&[(lse, 0.7), (ce, 1.3), (gs, -0.4), (colsum, 0.2), (mvs, 0.5), (vms, 0.6)])
            .unwrap();

        let f64_val = tape.scalar_value(loss);
        let dd_val = tape.eval_dd(loss).unwrap().to_f64();
        assert!(
            (f64_val - dd_val).abs() <= 1e-12 * f64_val.abs().max(1.0),
            "eager {f64_val} vs replay {dd_val}"
        );
    }

    fn tape_const(tape: &mut Tape, r: usize, c: usize) -> ValueId {
        let data: Vec<f64> = (0..r * c).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.21).collect();
        tape.constant(Tensor::matrix(r, c, data).unwrap())
    }

    fn tape_vec(tape: &mut Tape, n: usize) -> ValueId {
        tape.constant_vec((0..n).map(|i| (i as f64 - 1.2) * 0.4).collect())
    }

    #[test]
    fn dd_replay_rejects_non_scalar_root() {
        let mut tape = Tape::eval();
        let x = tape.constant_vec(vec![1.0, 2.0]);
        assert!(tape.eval_dd(x).is_err());
    }

    #[test]
    fn backward_linear_map_gives_broadcast_of_x() {
        // loss = sum(W x) with x fixed; dW[i][j] = x[j].
        let mut store = ParameterStore::new();
        let mut rng = chacha(0);
        let w = store.add("w", vec![2, 3], Init::Glorot, &mut rng);
        let mut tape = Tape::eval();
        let wv = tape.param(&store, w);
        let x = tape.constant_vec(vec![1.0, -2.0, 0.5]);
        let y = tape.matmul(wv, x).unwrap();
        let loss = tape.sum(y);
        backward(&tape, loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_tanh_at_zero_is_one() {
        let mut store = ParameterStore::new();
        let mut rng = chacha(0);
        let w = store.add("w", vec![1], Init::Zero, &mut rng);
        let mut tape = Tape::eval();
        let wv = tape.param(&store, w);
        let y = tape.tanh(wv);
        let loss = tape.sum(y);
        backward(&tape, loss, &mut store).unwrap();
        assert!((store.grad(w).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParameterStore::new();
        let mut tape = Tape::eval();
        let x = tape.constant_vec(vec![1.0, 2.0]);
        assert!(backward(&tape, x, &mut store).is_err());
    }

    #[test]
    fn unreachable_parameter_keeps_zero_grad() {
        let mut store = ParameterStore::new();
        let mut rng = chacha(1);
        let w = store.add("w", vec![2], Init::Glorot, &mut rng);
        let unused = store.add("unused", vec![3], Init::Glorot, &mut rng);
        let mut tape = Tape::eval();
        let wv = tape.param(&store, w);
        let _uv = tape.param(&store, unused);
        let loss = tape.sum(wv);
        backward(&tape, loss, &mut store).unwrap();
        assert_eq!(store.grad(unused).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(store.grad(w).data(), &[1.0, 1.0]);
    }

    #[test]
    fn dropout_identity_in_eval_and_masked_in_train() {
        let mut tape = Tape::eval();
        let x = tape.constant_vec(vec![1.0, 2.0, 3.0]);
        let y = tape.dropout(x, 0.4);
        assert_eq!(x, y);
        assert!(!tape.recorded_stochastic());

        let mut tape = Tape::train(chacha(5));
        let x = tape.constant_vec(vec![1.0; 1000]);
        let y = tape.dropout(x, 0.4);
        assert!(tape.recorded_stochastic());
        let kept: Vec<f64> = tape.value(y).data().iter().cloned().filter(|&v| v != 0.0).collect();
        let scale = 1.0 / 0.6;
        assert!(kept.iter().all(|&v| (v - scale).abs() < 1e-12));
        // Keep rate should be near 0.6 for 1000 draws.
        assert!((kept.len() as f64 - 600.0).abs() < 80.0);
    }

    #[test]
    fn same_seed_same_graph_bit_identical() {
        let build = || {
            let mut store = ParameterStore::new();
            let mut rng = chacha(42);
            let w = store.add("w", vec![4, 4], Init::Glorot, &mut rng);
            let mut tape = Tape::train(chacha(7));
            let wv = tape.param(&store, w);
            let x = tape.constant_vec(vec![0.3, -0.4, 1.1, 0.0]);
            let h = tape.matmul(wv, x).unwrap();
            let h = tape.dropout(h, 0.4);
            let h = tape.tanh(h);
            let l = tape.sum(h);
            tape.scalar_value(l)
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }

    #[test]
    fn gather_accumulates_repeated_positions() {
        let mut store = ParameterStore::new();
        let mut rng = chacha(0);
        let w = store.add("w", vec![2, 2], Init::Glorot, &mut rng);
        let mut tape = Tape::eval();
        let wv = tape.param(&store, w);
        let g = tape.gather_elems(wv, &[(0, 1), (0, 1), (1, 0)]).unwrap();
        let loss = tape.sum(g);
        backward(&tape, loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[0.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn embed_lookup_rejects_out_of_range_and_empty() {
        let mut tape = Tape::eval();
        let table = tape.constant(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        assert!(tape.embed_lookup(table, &[3]).is_err());
        assert!(tape.embed_lookup(table, &[]).is_err());
    }
}
