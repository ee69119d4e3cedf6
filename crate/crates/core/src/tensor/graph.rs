//! The per-step computation tape.
//!
//! Nodes are appended during the forward pass, so a plain reverse walk of
//! the node list is a valid reverse-topological order for backward. Values
//! are computed eagerly; each op stores whatever forward state its
//! gradient needs.

use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::param::{ParamId, ParamSet};
use super::{Real, Shape, TensorError};

/// Handle to a node in one [`Graph`]. Invalid in any other graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    SoftmaxRows {
        x: NodeId,
        tau: T,
    },
    /// Row-wise softmax of a square matrix where row i only attends to
    /// columns 0..=i; masked entries are exactly zero.
    CausalSoftmaxRows(NodeId),
    GatherRows {
        table: NodeId,
        indices: Vec<usize>,
    },
    /// Row gather straight out of a parameter, so the graph holds only
    /// the selected rows instead of a full table snapshot.
    GatherParamRows {
        id: ParamId,
        indices: Vec<usize>,
    },
    ConcatCols(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Mean(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        inv_std: Vec<T>,
        normalized: Vec<T>,
    },
    CrossEntropyLogits {
        logits: NodeId,
        target: usize,
        probs: Vec<T>,
    },
    CosineSim {
        a: NodeId,
        b: NodeId,
        norm_a: T,
        norm_b: T,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    // Backward never visits the input; the edge is kept for Debug dumps.
    Detach(#[allow(dead_code)] NodeId),
}

#[derive(Debug)]
struct Node<T> {
    shape: Shape,
    values: Vec<T>,
    op: Op<T>,
}

/// Reverse-mode tape. Build one per forward pass; confine it to a single
/// thread for the duration of forward + backward.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
    rng: Option<StdRng>,
}

impl<T: Real> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            rng: None,
        }
    }

    /// Training-mode graph with a seeded RNG for dropout masks. The same
    /// seed and op order reproduce masks exactly.
    pub fn train(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            rng: Some(StdRng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, n: NodeId) -> Shape {
        self.nodes[n.0].shape
    }

    pub fn value(&self, n: NodeId) -> &[T] {
        &self.nodes[n.0].values
    }

    pub fn scalar_value(&self, n: NodeId) -> T {
        debug_assert!(self.nodes[n.0].shape.is_scalar());
        self.nodes[n.0].values[0]
    }

    fn push(&mut self, shape: Shape, values: Vec<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { shape, values, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Shape, values: Vec<T>) -> Result<NodeId, TensorError> {
        if values.len() != shape.count() {
            return Err(TensorError::ValueCountMismatch {
                shape,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("constant"));
        }
        Ok(self.push(shape, values, Op::Constant))
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.push(Shape::scalar(), vec![v], Op::Constant)
    }

    /// Leaf node over a parameter's current values. Cached per graph, so
    /// repeated requests share one node and gradient contributions merge.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let shape = params.shape(id);
        let values = params.values(id).to_vec();
        let n = self.push(shape, values, Op::Param(id));
        self.param_nodes.insert(id, n);
        n
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(sa, values, Op::Add(a, b)))
    }

    /// `x` of shape m x n plus a `1 x n` bias broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.rows != 1 || sb.cols != sx.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let n = sx.cols;
        let mut values = self.nodes[x.0].values.clone();
        for row in values.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(&self.nodes[bias.0].values) {
                *v = *v + b;
            }
        }
        Ok(self.push(sx, values, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let shape = self.shape(x);
        let values = self.nodes[x.0].values.iter().map(|&v| v * k).collect();
        self.push(shape, values, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: NodeId, k: T) -> NodeId {
        let shape = self.shape(x);
        let values = self.nodes[x.0].values.iter().map(|&v| v + k).collect();
        self.push(shape, values, Op::AddScalar(x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let values = mm_nn(
            &self.nodes[a.0].values,
            sa.rows,
            sa.cols,
            &self.nodes[b.0].values,
            sb.cols,
        );
        Ok(self.push(Shape::new(sa.rows, sb.cols), values, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let src = &self.nodes[x.0].values;
        let mut values = vec![T::zero(); src.len()];
        for r in 0..s.rows {
            for c in 0..s.cols {
                values[c * s.rows + r] = src[r * s.cols + c];
            }
        }
        self.push(Shape::new(s.cols, s.rows), values, Op::Transpose(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        let values = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        self.push(shape, values, Op::Relu(x))
    }

    /// Row-wise max-subtracted softmax of `x / tau`.
    pub fn softmax_rows(&mut self, x: NodeId, tau: T) -> Result<NodeId, TensorError> {
        if tau <= T::zero() {
            return Err(TensorError::NonPositiveTemperature(tau.to_f64()));
        }
        let shape = self.shape(x);
        let n = shape.cols;
        let mut values = Vec::with_capacity(shape.count());
        for row in self.nodes[x.0].values.chunks(n) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max) / tau;
            let mut sum = T::zero();
            let start = values.len();
            for &v in row {
                let e = (v / tau - max).exp();
                sum = sum + e;
                values.push(e);
            }
            for v in &mut values[start..] {
                *v = *v / sum;
            }
        }
        Ok(self.push(shape, values, Op::SoftmaxRows { x, tau }))
    }

    /// Causal attention softmax: row i of a square matrix is normalized
    /// over columns 0..=i, the rest are exact zeros.
    pub fn causal_softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape(x);
        if shape.rows != shape.cols {
            return Err(TensorError::BadShape {
                op: "causal_softmax_rows",
                want: "a square matrix",
                got: shape,
            });
        }
        let n = shape.cols;
        let src = &self.nodes[x.0].values;
        let mut values = vec![T::zero(); shape.count()];
        for i in 0..n {
            let row = &src[i * n..i * n + i + 1];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                sum = sum + e;
                values[i * n + j] = e;
            }
            for v in &mut values[i * n..i * n + i + 1] {
                *v = *v / sum;
            }
        }
        Ok(self.push(shape, values, Op::CausalSoftmaxRows(x)))
    }

    /// Rows of `table` selected by index; duplicates allowed.
    pub fn gather_rows(
        &mut self,
        table: NodeId,
        indices: &[usize],
    ) -> Result<NodeId, TensorError> {
        let s = self.shape(table);
        for &i in indices {
            if i >= s.rows {
                return Err(TensorError::RowIndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    rows: s.rows,
                });
            }
        }
        let n = s.cols;
        let src = &self.nodes[table.0].values;
        let mut values = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            values.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Shape::new(indices.len(), n),
            values,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Rows of a parameter selected by index, without materializing the
    /// whole table in the graph; duplicates allowed.
    pub fn gather_param_rows(
        &mut self,
        params: &ParamSet<T>,
        id: ParamId,
        indices: &[usize],
    ) -> Result<NodeId, TensorError> {
        let s = params.shape(id);
        for &i in indices {
            if i >= s.rows {
                return Err(TensorError::RowIndexOutOfRange {
                    op: "gather_param_rows",
                    index: i,
                    rows: s.rows,
                });
            }
        }
        let n = s.cols;
        let src = params.values(id);
        let mut values = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            values.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Shape::new(indices.len(), n),
            values,
            Op::GatherParamRows {
                id,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rows != sb.rows {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let cols = sa.cols + sb.cols;
        let mut values = Vec::with_capacity(sa.rows * cols);
        for r in 0..sa.rows {
            values.extend_from_slice(&self.nodes[a.0].values[r * sa.cols..(r + 1) * sa.cols]);
            values.extend_from_slice(&self.nodes[b.0].values[r * sb.cols..(r + 1) * sb.cols]);
        }
        Ok(self.push(Shape::new(sa.rows, cols), values, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, TensorError> {
        let s = self.shape(x);
        if start >= end || end > s.cols {
            return Err(TensorError::BadColumnRange {
                op: "slice_cols",
                start,
                end,
                cols: s.cols,
            });
        }
        let w = end - start;
        let mut values = Vec::with_capacity(s.rows * w);
        for r in 0..s.rows {
            values.extend_from_slice(&self.nodes[x.0].values[r * s.cols + start..r * s.cols + end]);
        }
        Ok(self.push(Shape::new(s.rows, w), values, Op::SliceCols { x, start }))
    }

    /// Mean over all entries, yielding a scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let count = T::from(self.shape(x).count()).unwrap();
        let sum: T = self.nodes[x.0].values.iter().cloned().sum();
        self.push(Shape::scalar(), vec![sum / count], Op::Mean(x))
    }

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<NodeId, TensorError> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sg.rows != 1 || sg.cols != sx.cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: sx,
                rhs: sg,
            });
        }
        if sb != sg {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: sg,
                rhs: sb,
            });
        }
        let n = sx.cols;
        let count = T::from(n).unwrap();
        let mut values = Vec::with_capacity(sx.count());
        let mut normalized = Vec::with_capacity(sx.count());
        let mut inv_std = Vec::with_capacity(sx.rows);
        let g = &self.nodes[gamma.0].values;
        let b = &self.nodes[beta.0].values;
        for row in self.nodes[x.0].values.chunks(n) {
            let mean: T = row.iter().cloned().sum::<T>() / count;
            let var: T = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / count;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let xhat = (v - mean) * is;
                normalized.push(xhat);
                values.push(g[j] * xhat + b[j]);
            }
        }
        Ok(self.push(
            sx,
            values,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                inv_std,
                normalized,
            },
        ))
    }

    /// Negative log-likelihood of `target` under softmax(logits), computed
    /// with the log-sum-exp trick. `logits` must be a `1 x n` row.
    pub fn cross_entropy_from_logits(
        &mut self,
        logits: NodeId,
        target: usize,
    ) -> Result<NodeId, TensorError> {
        let s = self.shape(logits);
        if s.rows != 1 {
            return Err(TensorError::BadShape {
                op: "cross_entropy_from_logits",
                want: "a 1 x n row of logits",
                got: s,
            });
        }
        if target >= s.cols {
            return Err(TensorError::TargetOutOfRange {
                index: target,
                len: s.cols,
            });
        }
        let z = &self.nodes[logits.0].values;
        let max = z.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        let mut probs = Vec::with_capacity(z.len());
        for &v in z {
            let e = (v - max).exp();
            sum = sum + e;
            probs.push(e);
        }
        for p in &mut probs {
            *p = *p / sum;
        }
        let loss = sum.ln() - (z[target] - max);
        Ok(self.push(
            Shape::scalar(),
            vec![loss],
            Op::CrossEntropyLogits {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Cosine similarity of two same-shape tensors viewed as flat vectors.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: sa,
                rhs: sb,
            });
        }
        let va = &self.nodes[a.0].values;
        let vb = &self.nodes[b.0].values;
        let mut dot = T::zero();
        let mut na = T::zero();
        let mut nb = T::zero();
        for (&x, &y) in va.iter().zip(vb) {
            dot = dot + x * y;
            na = na + x * x;
            nb = nb + y * y;
        }
        if na == T::zero() || nb == T::zero() {
            return Err(TensorError::ZeroNorm);
        }
        let (norm_a, norm_b) = (na.sqrt(), nb.sqrt());
        let cos = dot / (norm_a * norm_b);
        Ok(self.push(
            Shape::scalar(),
            vec![cos],
            Op::CosineSim {
                a,
                b,
                norm_a,
                norm_b,
            },
        ))
    }

    /// Inverted dropout: identity in eval mode; in train mode zeroes each
    /// entry with probability `rate` and scales survivors by 1/(1-rate).
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::BadDropoutRate(rate));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.nodes[x.0].values.len())
            .map(|_| {
                if rng.random_range(0.0..1.0) < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let shape = self.nodes[x.0].shape;
        let values = self.nodes[x.0]
            .values
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(self.push(shape, values, Op::Dropout { x, mask }))
    }

    /// Value-identical tensor through which no gradient flows.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        let values = self.nodes[x.0].values.clone();
        self.push(shape, values, Op::Detach(x))
    }

    /// Accumulates d(loss)/d(p) into every parameter reachable from `loss`.
    /// Parameters that do not participate are untouched. Calling twice
    /// without zeroing doubles the accumulated gradients.
    pub fn backward(&self, loss: NodeId, params: &mut ParamSet<T>) -> Result<(), TensorError> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.shape.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_node.shape));
        }
        if !loss_node.values[0].is_finite() {
            return Err(TensorError::NonFinite("loss"));
        }

        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(d) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => params.accumulate_grad(*id, &d),
                Op::Add(a, b) => {
                    acc(&mut adj, self, *a, |g| {
                        for (gi, &di) in g.iter_mut().zip(&d) {
                            *gi = *gi + di;
                        }
                    });
                    acc(&mut adj, self, *b, |g| {
                        for (gi, &di) in g.iter_mut().zip(&d) {
                            *gi = *gi + di;
                        }
                    });
                }
                Op::AddBias(x, bias) => {
                    acc(&mut adj, self, *x, |g| {
                        for (gi, &di) in g.iter_mut().zip(&d) {
                            *gi = *gi + di;
                        }
                    });
                    let n = self.shape(*bias).cols;
                    acc(&mut adj, self, *bias, |g| {
                        for row in d.chunks(n) {
                            for (gi, &di) in g.iter_mut().zip(row) {
                                *gi = *gi + di;
                            }
                        }
                    });
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    acc(&mut adj, self, *x, |g| {
                        for (gi, &di) in g.iter_mut().zip(&d) {
                            *gi = *gi + di * k;
                        }
                    });
                }
                Op::AddScalar(x) => {
                    acc(&mut adj, self, *x, |g| {
                        for (gi, &di) in g.iter_mut().zip(&d) {
                            *gi = *gi + di;
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa.rows, sa.cols, sb.cols);
                    let da = mm_nt(&d, m, n, &self.nodes[b.0].values, k);
                    let db = mm_tn(&self.nodes[a.0].values, m, k, &d, n);
                    acc(&mut adj, self, *a, |g| {
                        for (gi, &di) in g.iter_mut().zip(&da) {
                            *gi = *gi + di;
                        }
                    });
                    acc(&mut adj, self, *b, |g| {
                        for (gi, &di) in g.iter_mut().zip(&db) {
                            *gi = *gi + di;
                        }
                    });
                }
                Op::Transpose(x) => {
                    let s = self.shape(*x);
                    acc(&mut adj, self, *x, |g| {
                        for r in 0..s.rows {
                            for c in 0..s.cols {
                                g[r * s.cols + c] = g[r * s.cols + c] + d[c * s.rows + r];
                            }
                        }
                    });
                }
                Op::Relu(x) => {
                    let src = &self.nodes[x.0].values;
                    acc(&mut adj, self, *x, |g| {
                        for ((gi, &di), &xi) in g.iter_mut().zip(&d).zip(src) {
                            if xi > T::zero() {
                                *gi = *gi + di;
                            }
                        }
                    });
                }
                Op::SoftmaxRows { x, tau } => {
                    let n = node.shape.cols;
                    let y = &node.values;
                    let tau = *tau;
                    acc(&mut adj, self, *x, |g| {
                        for (r, (yrow, drow)) in y.chunks(n).zip(d.chunks(n)).enumerate() {
                            let s: T = yrow
                                .iter()
                                .zip(drow)
                                .map(|(&yi, &di)| yi * di)
                                .sum();
                            for (j, (&yi, &di)) in yrow.iter().zip(drow).enumerate() {
                                let idx = r * n + j;
                                g[idx] = g[idx] + yi * (di - s) / tau;
                            }
                        }
                    });
                }
                Op::CausalSoftmaxRows(x) => {
                    let n = node.shape.cols;
                    let y = &node.values;
                    acc(&mut adj, self, *x, |g| {
                        for i in 0..n {
                            let yrow = &y[i * n..i * n + i + 1];
                            let drow = &d[i * n..i * n + i + 1];
                            let s: T = yrow
                                .iter()
                                .zip(drow)
                                .map(|(&yi, &di)| yi * di)
                                .sum();
                            for (j, (&yi, &di)) in yrow.iter().zip(drow).enumerate() {
                                let idx = i * n + j;
                                g[idx] = g[idx] + yi * (di - s);
                            }
                        }
                    });
                }
                Op::GatherRows { table, indices } => {
                    let n = node.shape.cols;
                    acc(&mut adj, self, *table, |g| {
                        for (r, &src_row) in indices.iter().enumerate() {
                            let drow = &d[r * n..(r + 1) * n];
                            let grow = &mut g[src_row * n..(src_row + 1) * n];
                            for (gi, &di) in grow.iter_mut().zip(drow) {
                                *gi = *gi + di;
                            }
                        }
                    });
                }
                Op::GatherParamRows { id, indices } => {
                    let n = node.shape.cols;
                    params.scatter_add_grad(*id, indices, &d, n);
                }
                Op::ConcatCols(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let cols = sa.cols + sb.cols;
                    acc(&mut adj, self, *a, |g| {
                        for r in 0..sa.rows {
                            for c in 0..sa.cols {
                                g[r * sa.cols + c] = g[r * sa.cols + c] + d[r * cols + c];
                            }
                        }
                    });
                    acc(&mut adj, self, *b, |g| {
                        for r in 0..sb.rows {
                            for c in 0..sb.cols {
                                g[r * sb.cols + c] =
                                    g[r * sb.cols + c] + d[r * cols + sa.cols + c];
                            }
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let s = self.shape(*x);
                    let w = node.shape.cols;
                    let start = *start;
                    acc(&mut adj, self, *x, |g| {
                        for r in 0..s.rows {
                            for c in 0..w {
                                g[r * s.cols + start + c] =
                                    g[r * s.cols + start + c] + d[r * w + c];
                            }
                        }
                    });
                }
                Op::Mean(x) => {
                    let count = T::from(self.shape(*x).count()).unwrap();
                    let di = d[0] / count;
                    acc(&mut adj, self, *x, |g| {
                        for gi in g.iter_mut() {
                            *gi = *gi + di;
                        }
                    });
                }
                Op::LayerNormRows {
                    x,
                    gamma,
                    beta,
                    inv_std,
                    normalized,
                } => {
                    let n = node.shape.cols;
                    let count = T::from(n).unwrap();
                    let gvals = &self.nodes[gamma.0].values;
                    acc(&mut adj, self, *gamma, |g| {
                        for (xhat_row, drow) in normalized.chunks(n).zip(d.chunks(n)) {
                            for (j, (&xh, &di)) in xhat_row.iter().zip(drow).enumerate() {
                                g[j] = g[j] + di * xh;
                            }
                        }
                    });
                    acc(&mut adj, self, *beta, |g| {
                        for drow in d.chunks(n) {
                            for (gj, &di) in g.iter_mut().zip(drow) {
                                *gj = *gj + di;
                            }
                        }
                    });
                    acc(&mut adj, self, *x, |g| {
                        for (r, (xhat_row, drow)) in
                            normalized.chunks(n).zip(d.chunks(n)).enumerate()
                        {
                            // dxhat = d * gamma; dx = inv_std * (dxhat
                            //   - mean(dxhat) - xhat * mean(dxhat .* xhat))
                            let mut mean_dxhat = T::zero();
                            let mut mean_dxhat_xhat = T::zero();
                            for (j, &di) in drow.iter().enumerate() {
                                let dxh = di * gvals[j];
                                mean_dxhat = mean_dxhat + dxh;
                                mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat_row[j];
                            }
                            mean_dxhat = mean_dxhat / count;
                            mean_dxhat_xhat = mean_dxhat_xhat / count;
                            let is = inv_std[r];
                            for (j, &di) in drow.iter().enumerate() {
                                let dxh = di * gvals[j];
                                let idx = r * n + j;
                                g[idx] = g[idx]
                                    + is * (dxh - mean_dxhat - xhat_row[j] * mean_dxhat_xhat);
                            }
                        }
                    });
                }
                Op::CrossEntropyLogits {
                    logits,
                    target,
                    probs,
                } => {
                    let dl = d[0];
                    let target = *target;
                    acc(&mut adj, self, *logits, |g| {
                        for (j, (gi, &p)) in g.iter_mut().zip(probs).enumerate() {
                            let indicator = if j == target { T::one() } else { T::zero() };
                            *gi = *gi + dl * (p - indicator);
                        }
                    });
                }
                Op::CosineSim {
                    a,
                    b,
                    norm_a,
                    norm_b,
                } => {
                    let cos = node.values[0];
                    let dl = d[0];
                    let va = &self.nodes[a.0].values;
                    let vb = &self.nodes[b.0].values;
                    let (na, nb) = (*norm_a, *norm_b);
                    acc(&mut adj, self, *a, |g| {
                        for ((gi, &ai), &bi) in g.iter_mut().zip(va).zip(vb) {
                            *gi = *gi + dl * (bi / (na * nb) - cos * ai / (na * na));
                        }
                    });
                    acc(&mut adj, self, *b, |g| {
                        for ((gi, &ai), &bi) in g.iter_mut().zip(va).zip(vb) {
                            *gi = *gi + dl * (ai / (na * nb) - cos * bi / (nb * nb));
                        }
                    });
                }
                Op::Dropout { x, mask } => {
                    acc(&mut adj, self, *x, |g| {
                        for ((gi, &di), &mi) in g.iter_mut().zip(&d).zip(mask) {
                            *gi = *gi + di * mi;
                        }
                    });
                }
                Op::Detach(_) => {}
            }
        }
        Ok(())
    }
}

/// Ensures an adjoint buffer exists for `target`, then applies `f` to it.
fn acc<T: Real>(
    adj: &mut [Option<Vec<T>>],
    graph: &Graph<T>,
    target: NodeId,
    f: impl FnOnce(&mut Vec<T>),
) {
    let slot = &mut adj[target.0];
    if slot.is_none() {
        *slot = Some(vec![T::zero(); graph.nodes[target.0].values.len()]);
    }
    f(slot.as_mut().unwrap());
}

/// C[m x n] = A[m x k] B[k x n]
fn mm_nn<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

/// C[m x n] = A[m x k] B^T where B is [n x k]
fn mm_nt<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s = s + av * bv;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// C[k x n] = A^T B where A is [m x k], B is [m x n]
fn mm_tn<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params64() -> ParamSet<f64> {
        ParamSet::new()
    }

    #[test]
    fn relu_forward() {
        let mut g: Graph<f64> = Graph::eval();
        let x = g.constant(Shape::vector(2), vec![-1.0, 2.0]).unwrap();
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g: Graph<f64> = Graph::eval();
        let x = g.constant(Shape::vector(2), vec![0.0, 0.0]).unwrap();
        let y = g.softmax_rows(x, 1.0).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::eval();
        let x = g
            .constant(Shape::new(2, 3), vec![500.0, -3.0, 1.0, 0.1, 0.2, 0.3])
            .unwrap();
        let y = g.softmax_rows(x, 0.3).unwrap();
        for row in g.value(y).chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut g: Graph<f64> = Graph::eval();
        let av: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let bv: Vec<f64> = (0..8).map(|i| (i as f64 * 0.91).cos()).collect();
        let a = g.constant(Shape::new(3, 4), av.clone()).unwrap();
        let b = g.constant(Shape::new(4, 2), bv.clone()).unwrap();
        let c = g.matmul(a, b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += av[i * 4 + p] * bv[p * 2 + j];
                }
                assert!((g.value(c)[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g: Graph<f64> = Graph::eval();
        let a = g.constant(Shape::new(2, 3), vec![0.0; 6]).unwrap();
        let b = g.constant(Shape::new(2, 2), vec![0.0; 4]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn square_gradient_by_hand() {
        // loss = x^2 at x = 3 -> gradient 6.
        let mut params = params64();
        let id = params.add("x", Shape::scalar(), vec![3.0]).unwrap();
        let mut g = Graph::eval();
        let x = g.param(&params, id);
        let y = g.matmul(x, x).unwrap();
        g.backward(y, &mut params).unwrap();
        assert!((params.grad(id)[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_by_hand() {
        // logits [a, b], target 0 -> gradient [p0 - 1, p1].
        let mut params = params64();
        let id = params.add("z", Shape::vector(2), vec![0.4, -0.3]).unwrap();
        let mut g = Graph::eval();
        let z = g.param(&params, id);
        let loss = g.cross_entropy_from_logits(z, 0).unwrap();
        g.backward(loss, &mut params).unwrap();
        let e0 = (0.4f64).exp();
        let e1 = (-0.3f64).exp();
        let p0 = e0 / (e0 + e1);
        let p1 = e1 / (e0 + e1);
        assert!((params.grad(id)[0] - (p0 - 1.0)).abs() < 1e-12);
        assert!((params.grad(id)[1] - p1).abs() < 1e-12);
        // Two items, equal scores: loss = ln 2.
        let mut g2: Graph<f64> = Graph::eval();
        let z2 = g2.constant(Shape::vector(2), vec![1.0, 1.0]).unwrap();
        let l2 = g2.cross_entropy_from_logits(z2, 1).unwrap();
        assert!((g2.scalar_value(l2) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut params = params64();
        let id = params.add("x", Shape::scalar(), vec![3.0]).unwrap();
        let mut g = Graph::eval();
        let x = g.param(&params, id);
        let y = g.matmul(x, x).unwrap();
        g.backward(y, &mut params).unwrap();
        g.backward(y, &mut params).unwrap();
        assert!((params.grad(id)[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut params = params64();
        let id = params.add("x", Shape::scalar(), vec![3.0]).unwrap();
        let mut g = Graph::eval();
        let x = g.param(&params, id);
        let d = g.detach(x);
        assert_eq!(g.value(d), g.value(x));
        let y = g.matmul(d, d).unwrap();
        g.backward(y, &mut params).unwrap();
        assert_eq!(params.grad(id), &[0.0]);
    }

    #[test]
    fn mixed_graph_only_live_path_gets_gradient() {
        // loss = x * detach(w): dx = w value, dw = 0.
        let mut params = params64();
        let xid = params.add("x", Shape::scalar(), vec![2.0]).unwrap();
        let wid = params.add("w", Shape::scalar(), vec![5.0]).unwrap();
        let mut g = Graph::eval();
        let x = g.param(&params, xid);
        let w = g.param(&params, wid);
        let wd = g.detach(w);
        let y = g.matmul(x, wd).unwrap();
        g.backward(y, &mut params).unwrap();
        assert_eq!(params.grad(xid), &[5.0]);
        assert_eq!(params.grad(wid), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut params = params64();
        let mut g: Graph<f64> = Graph::eval();
        let x = g.constant(Shape::vector(2), vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            g.backward(x, &mut params),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn causal_softmax_masks_upper_triangle() {
        let mut g: Graph<f64> = Graph::eval();
        let x = g
            .constant(Shape::new(3, 3), vec![1.0, 9.0, 9.0, 0.5, 0.5, 9.0, 1.0, 2.0, 3.0])
            .unwrap();
        let y = g.causal_softmax_rows(x).unwrap();
        let v = g.value(y);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert_eq!(v[0], 1.0);
        assert!((v[3] - 0.5).abs() < 1e-12 && (v[4] - 0.5).abs() < 1e-12);
        let s: f64 = v[6..9].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_and_concat_shapes() {
        let mut g: Graph<f64> = Graph::eval();
        let t = g
            .constant(Shape::new(3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let picked = g.gather_rows(t, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(picked), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let other = g.constant(Shape::new(3, 1), vec![7.0, 8.0, 9.0]).unwrap();
        let cat = g.concat_cols(picked, other).unwrap();
        assert_eq!(g.shape(cat), Shape::new(3, 3));
        assert_eq!(g.value(cat), &[5.0, 6.0, 7.0, 1.0, 2.0, 8.0, 5.0, 6.0, 9.0]);
        assert!(g.gather_rows(t, &[3]).is_err());
    }

    #[test]
    fn dropout_eval_is_identity_train_is_masked() {
        let mut g: Graph<f64> = Graph::eval();
        let x = g.constant(Shape::vector(4), vec![1.0; 4]).unwrap();
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);

        let mut gt: Graph<f64> = Graph::train(11);
        let x = gt.constant(Shape::vector(256), vec![1.0; 256]).unwrap();
        let y = gt.dropout(x, 0.5).unwrap();
        assert_ne!(x, y);
        let kept = gt.value(y).iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 64 && kept < 192, "kept {kept} of 256");
        assert!(gt.value(y).iter().all(|&v| v == 0.0 || v == 2.0));

        // Same seed reproduces the same mask.
        let mut gt2: Graph<f64> = Graph::train(11);
        let x2 = gt2.constant(Shape::vector(256), vec![1.0; 256]).unwrap();
        let y2 = gt2.dropout(x2, 0.5).unwrap();
        assert_eq!(gt.value(y), gt2.value(y2));
    }

    #[test]
    fn transpose_roundtrip() {
        let mut g: Graph<f64> = Graph::eval();
        let x = g
            .constant(Shape::new(2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let t = g.transpose(x);
        assert_eq!(g.shape(t), Shape::new(3, 2));
        assert_eq!(g.value(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let tt = g.transpose(t);
        assert_eq!(g.value(tt), g.value(x));
    }

    #[test]
    fn cosine_similarity_examples() {
        let mut g: Graph<f64> = Graph::eval();
        let a = g.constant(Shape::vector(2), vec![1.0, 0.0]).unwrap();
        let b = g.constant(Shape::vector(2), vec![0.0, 1.0]).unwrap();
        let c = g.cosine_similarity(a, b).unwrap();
        assert_eq!(g.scalar_value(c), 0.0);
        let c2 = g.cosine_similarity(a, a).unwrap();
        assert!((g.scalar_value(c2) - 1.0).abs() < 1e-12);
        let z = g.constant(Shape::vector(2), vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            g.cosine_similarity(a, z),
            Err(TensorError::ZeroNorm)
        ));
    }

    #[test]
    fn mean_and_scale() {
        let mut g: Graph<f64> = Graph::eval();
        let x = g.constant(Shape::new(2, 2), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let m = g.mean(x);
        assert_eq!(g.scalar_value(m), 3.0);
        let s = g.scale(m, -2.0);
        let t = g.add_scalar(s, 1.0);
        assert_eq!(g.scalar_value(t), -5.0);
    }
}
