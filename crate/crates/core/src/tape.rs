//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records a forward computation as a list of nodes, each holding
//! its value and the operation that produced it. [`Tape::backward`] walks the
//! list in reverse, accumulating gradients into a [`ParamSet`]-shaped buffer.
//! Parameters are borrowed, not copied, so building a tape per instance is
//! cheap.

use ndarray::{s, Array1, Array2, Axis};

use crate::scalar::Scalar;

/// Handle to a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named collection of learnable tensors, all stored as matrices (vectors
/// are `1 × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Array2<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Array2::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(T::zero());
        }
    }

    /// `self -= rate * grads`.
    pub fn sgd_step(&mut self, grads: &ParamSet<T>, rate: T) {
        for (p, g) in self.tensors.iter_mut().zip(&grads.tensors) {
            p.scaled_add(-rate, g);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> T {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Param(ParamId),
    Const,
    Gather {
        table: NodeId,
        ids: Vec<usize>,
        zero_row: bool,
    },
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Add(NodeId, NodeId),
    AddRow {
        x: NodeId,
        row: NodeId,
    },
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Scale(NodeId, T),
    MulConst(NodeId, Array2<T>),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Array2<T>,
        inv_std: Array1<T>,
    },
    MaskedSoftmax(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Mix {
        weights: NodeId,
        mats: Vec<Array2<T>>,
    },
    AddIdentity(NodeId),
    RowNormalize {
        x: NodeId,
        sums: Array1<T>,
    },
    FlattenPad(NodeId),
    CrossEntropy {
        logits: NodeId,
        gold: usize,
        probs: Array1<T>,
    },
}

struct Node<T> {
    value: Option<Array2<T>>,
    op: Op<T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive logit for disallowed keys before the softmax.
pub const MASKED_LOGIT: f64 = -1e9;

pub struct Tape<'p, T> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<T> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<T>) -> NodeId {
        self.push(value, Op::Const)
    }

    /// Rows of `table` indexed by `ids`. With `zero_row`, id 0 yields a zero
    /// row that receives no gradient.
    pub fn gather(&mut self, table: NodeId, ids: &[usize], zero_row: bool) -> NodeId {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            if !(zero_row && id == 0) {
                out.row_mut(r).assign(&t.row(id));
            }
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                zero_row,
            },
        )
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let out = self.value(x).select(Axis(0), rows);
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `x + row` with `row` (1 × n) broadcast over every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let out = self.value(x) + self.value(row);
        self.push(out, Op::AddRow { x, row })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let out = self.value(x) * factor;
        self.push(out, Op::Scale(x, factor))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, c: Array2<T>) -> NodeId {
        let out = self.value(x) * &c;
        self.push(out, Op::MulConst(x, c))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self
            .value(x)
            .mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    /// Row-wise layer normalization with `1 × d` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let d = T::from_usize(xv.ncols()).unwrap();
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut inv_std = Array1::zeros(xv.nrows());
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            xhat.row_mut(r).assign(&row.mapv(|v| (v - mean) * is));
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row softmax where disallowed entries get [`MASKED_LOGIT`] added and
    /// are then zeroed exactly. Every row must allow at least one entry.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &Array2<bool>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.raw_dim(), mask.raw_dim(), "mask shape");
        let neg = T::from_f64_lossy(MASKED_LOGIT);
        let mut out = Array2::zeros(xv.raw_dim());
        for (r, (row, mrow)) in xv.rows().into_iter().zip(mask.rows()).enumerate() {
            let logits: Vec<T> = row
                .iter()
                .zip(mrow)
                .map(|(&v, &m)| if m { v } else { v + neg })
                .collect();
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
            let sum: T = exps.iter().copied().sum();
            for (c, (&e, &m)) in exps.iter().zip(mrow).enumerate() {
                out[[r, c]] = if m { e / sum } else { T::zero() };
            }
        }
        self.push(out, Op::MaskedSoftmax(x))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let out = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat rows agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// `Σ_c weights[0, c] · mats[c]` for constant matrices.
    pub fn mix(&mut self, weights: NodeId, mats: Vec<Array2<T>>) -> NodeId {
        let w = self.value(weights);
        assert_eq!(w.ncols(), mats.len());
        let mut out = Array2::zeros(mats[0].raw_dim());
        for (c, m) in mats.iter().enumerate() {
            out.scaled_add(w[[0, c]], m);
        }
        self.push(out, Op::Mix { weights, mats })
    }

    pub fn add_identity(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for i in 0..out.nrows().min(out.ncols()) {
            out[[i, i]] += T::one();
        }
        self.push(out, Op::AddIdentity(x))
    }

    /// Divides each row by its sum. Rows must have a non-zero sum.
    pub fn row_normalize(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let sums = xv.sum_axis(Axis(1));
        let out = xv / &sums.view().insert_axis(Axis(1));
        self.push(out, Op::RowNormalize { x, sums })
    }

    /// Flattens `x` row-major into a `1 × width` row, zero-padding the tail.
    pub fn flatten_pad(&mut self, x: NodeId, width: usize) -> NodeId {
        let xv = self.value(x);
        assert!(xv.len() <= width, "flatten width");
        let mut out = Array2::zeros((1, width));
        for (i, &v) in xv.iter().enumerate() {
            out[[0, i]] = v;
        }
        self.push(out, Op::FlattenPad(x))
    }

    /// `-log softmax(logits)[gold]` for a `1 × C` row, as a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, gold: usize) -> NodeId {
        let l = self.value(logits).row(0).to_owned();
        let (loss, probs) = softmax_cross_entropy(&l, gold);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            },
        )
    }

    /// Back-propagates from the scalar node `root`, adding `scale · ∂root/∂p`
    /// into `grads` for every parameter `p` reached.
    pub fn backward(&self, root: NodeId, grads: &mut ParamSet<T>, scale: T) {
        let mut adj: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Array2::from_elem(self.value(root).raw_dim(), scale));

        fn acc<T: Scalar>(adj: &mut [Option<Array2<T>>], id: NodeId, g: Array2<T>) {
            match &mut adj[id.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param(p) => *grads.get_mut(*p) += &g,
                Op::Const => {}
                Op::Gather {
                    table,
                    ids,
                    zero_row,
                } => {
                    let mut gt = Array2::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        if !(*zero_row && id == 0) {
                            let mut row = gt.row_mut(id);
                            row += &g.row(r);
                        }
                    }
                    acc(&mut adj, *table, gt);
                }
                Op::SelectRows { x, rows } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut row = gx.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::AddRow { x, row } => {
                    acc(&mut adj, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut adj, *x, g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(x, f) => acc(&mut adj, *x, g * *f),
                Op::MulConst(x, c) => acc(&mut adj, *x, g * c),
                Op::Relu(x) => {
                    let out = node.value.as_ref().unwrap();
                    let mut gx = g;
                    gx.zip_mut_with(out, |gv, &o| {
                        if o <= T::zero() {
                            *gv = T::zero()
                        }
                    });
                    acc(&mut adj, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gain_v = self.value(*gain);
                    acc(&mut adj, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(
                        &mut adj,
                        *gain,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let d = T::from_usize(g.ncols()).unwrap();
                    let dxhat = &g * gain_v;
                    let mut gx = Array2::zeros(g.raw_dim());
                    for r in 0..g.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                        let k = inv_std[r] / d;
                        for c in 0..g.ncols() {
                            gx[[r, c]] = k * (d * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::MaskedSoftmax(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = Array2::zeros(g.raw_dim());
                    for r in 0..g.nrows() {
                        let dot = g
                            .row(r)
                            .iter()
                            .zip(y.row(r))
                            .map(|(&a, &b)| a * b)
                            .sum::<T>();
                        for c in 0..g.ncols() {
                            gx[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut adj, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut adj, p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::Mix { weights, mats } => {
                    let gw = Array1::from_iter(mats.iter().map(|m| (&g * m).sum()));
                    acc(&mut adj, *weights, gw.insert_axis(Axis(0)));
                }
                Op::AddIdentity(x) => acc(&mut adj, *x, g),
                Op::RowNormalize { x, sums } => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = Array2::zeros(g.raw_dim());
                    for r in 0..g.nrows() {
                        let dot = g
                            .row(r)
                            .iter()
                            .zip(y.row(r))
                            .map(|(&a, &b)| a * b)
                            .sum::<T>();
                        for c in 0..g.ncols() {
                            gx[[r, c]] = (g[[r, c]] - dot) / sums[r];
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::FlattenPad(x) => {
                    let shape = self.value(*x).raw_dim();
                    let n = shape[0] * shape[1];
                    let gx = Array2::from_shape_vec(shape, g.iter().take(n).copied().collect())
                        .expect("flatten shape");
                    acc(&mut adj, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    gold,
                    probs,
                } => {
                    let upstream = g[[0, 0]];
                    let mut gl = probs.clone();
                    gl[*gold] -= T::one();
                    acc(&mut adj, *logits, (gl * upstream).insert_axis(Axis(0)));
                }
            }
        }
    }
}

/// Stable `-log softmax(logits)[gold]` and the softmax itself.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Array1<T>, gold: usize) -> (T, Array1<T>) {
    let top = crate::head::argmax(logits);
    let shifted = logits.mapv(|v| v - logits[top]);
    let exps = shifted.mapv(T::exp);
    // log-sum-exp as ln(1 + rest) keeps the loss strictly positive when the
    // gold logit dominates
    let rest = exps
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &e)| e)
        .sum::<T>();
    let loss = rest.ln_1p() - shifted[gold];
    let sum = T::one() + rest;
    (loss, exps / sum)
}
