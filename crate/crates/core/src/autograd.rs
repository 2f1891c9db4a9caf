//! Minimal reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape through [`Tape::bind`], which copies the current values of a
//! [`ParamStore`] into leaf nodes; after [`Tape::backward`] the gradient of
//! each bound parameter can be read back in store order.
//!
//! Sequences of different lengths are stacked along the row axis and the
//! fused [`Tape::attention`] op keeps each segment isolated, so a whole
//! mini-batch goes through the linear layers as a single matrix product.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, idx: usize) -> &Matrix {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.values[idx]
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Parameters of a store after binding onto a tape, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Contiguous row block `[start, start + len)` holding one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Transpose(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<Matrix>,
    },
    MaskedLogSoftmax {
        x: Var,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    Pick(Var, usize, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of every node produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads[var.0].as_ref()
    }

    /// Gradients of a bound store, zero-filled for parameters the loss does
    /// not depend on.
    pub fn for_bound(&self, bound: &Bound, store: &ParamStore) -> Vec<Matrix> {
        bound
            .vars
            .iter()
            .zip(store.values())
            .map(|(var, value)| match &self.grads[var.0] {
                Some(g) => g.clone(),
                None => Matrix::zeros(value.raw_dim()),
            })
            .collect()
    }
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

/// Tanh-approximated GELU, written as `x * sigmoid(2u)` so it costs one
/// `exp`.
pub(crate) fn gelu(x: f64) -> f64 {
    x * sigmoid(2.0 * gelu_inner(x))
}

fn gelu_inner(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    C * (x + 0.044715 * x * x * x)
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let s = sigmoid(2.0 * gelu_inner(x));
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    s + 2.0 * x * s * (1.0 - s) * d_inner
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a score block, optionally causal.
fn softmax_block(scores: &mut Matrix, causal: bool) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let limit = if causal { i + 1 } else { row.len() };
        let max = row
            .iter()
            .take(limit)
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for (j, x) in row.iter_mut().enumerate() {
            if j < limit {
                *x = (*x - max).exp();
                total += *x;
            } else {
                *x = 0.0;
            }
        }
        row.mapv_inplace(|x| x / total);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copies every parameter of `store` onto the tape.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let vars = store
            .values()
            .iter()
            .map(|v| self.push(v.clone(), Op::Leaf))
            .collect();
        Bound { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        self.push(value, Op::AddRow(x, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        self.push(value, Op::Scale(x, factor))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        self.push(value, Op::Gelu(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        self.push(value, Op::Transpose(x))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Matrix::from_elem((1, 1), total), Op::Sum(x))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut value = Matrix::zeros(self.value(terms[0].0).raw_dim());
        for &(var, w) in terms {
            value.scaled_add(w, self.value(var));
        }
        self.push(value, Op::WeightedSum(terms.to_vec()))
    }

    /// Row-wise layer normalisation with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Selects rows of an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut value = Matrix::zeros((ids.len(), tv.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).assign(&tv.row(id));
        }
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(x, start, end))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(x, start, end))
    }

    /// Multi-head scaled dot-product attention over stacked sequences.
    ///
    /// `q`, `k`, `v` are `N x d`; each segment attends only within itself,
    /// and only to earlier positions when `causal` is set.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        assert_eq!(d % heads, 0, "width not divisible by head count");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros((n, d));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let rows = seg.start..seg.start + seg.len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![rows.clone(), cols.clone()]);
                let kh = kv.slice(s![rows.clone(), cols.clone()]);
                let vh = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                softmax_block(&mut p, causal);
                out.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
        )
    }

    /// Log-softmax of a `1 x K` row over unmasked entries (`mask[i] == true`
    /// means excluded). Masked outputs are `-inf`.
    pub fn masked_log_softmax(&mut self, x: Var, mask: &[bool]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), 1);
        assert_eq!(xv.ncols(), mask.len());
        let max = xv
            .iter()
            .zip(mask)
            .filter(|(_, &m)| !m)
            .fold(f64::NEG_INFINITY, |a, (&b, _)| a.max(b));
        let total: f64 = xv
            .iter()
            .zip(mask)
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| (v - max).exp())
            .sum();
        let log_z = max + total.ln();
        let mut value = Matrix::zeros((1, mask.len()));
        let mut probs = vec![0.0; mask.len()];
        for (i, (&v, &m)) in xv.iter().zip(mask).enumerate() {
            if m {
                value[[0, i]] = f64::NEG_INFINITY;
            } else {
                value[[0, i]] = v - log_z;
                probs[i] = (v - log_z).exp();
            }
        }
        self.push(
            value,
            Op::MaskedLogSoftmax {
                x,
                mask: mask.to_vec(),
                probs,
            },
        )
    }

    /// Single entry as a 1x1 node.
    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Var {
        let v = self.value(x)[[row, col]];
        self.push(Matrix::from_elem((1, 1), v), Op::Pick(x, row, col))
    }

    /// Per-row negative log-likelihood of `targets` under `softmax(logits)`,
    /// as an `N x 1` column. Rows with a `None` target contribute 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let mut probs = lv.clone();
        let mut value = Matrix::zeros((targets.len(), 1));
        for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
            if let Some(t) = targets[r] {
                value[[r, 0]] = -(lv[[r, t]] - max - total.ln());
            }
        }
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a 1x1 root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::ones((1, 1)));

        fn acc(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
            match &mut grads[var.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, g.clone());
                    acc(&mut grads, *row, gr);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(x, f) => acc(&mut grads, *x, &g * *f),
                Op::Tanh(x) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx)
                        .and(&node.value)
                        .for_each(|gx, &y| *gx *= 1.0 - y * y);
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx)
                        .and(&node.value)
                        .for_each(|gx, &y| *gx *= y * (1.0 - y));
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gx, &xv| *gx *= gelu_grad(xv));
                    acc(&mut grads, *x, gx);
                }
                Op::Transpose(x) => acc(&mut grads, *x, g.t().to_owned()),
                Op::Sum(x) => {
                    let gx = Matrix::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *x, gx);
                }
                Op::WeightedSum(terms) => {
                    for &(var, w) in terms {
                        acc(&mut grads, var, &g * w);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gv;
                    let d = xhat.ncols() as f64;
                    let mut gx = Matrix::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dh = dh.sum() / d;
                        let mean_dh_xh = dh.dot(&xh) / d;
                        let inv = inv_std[r];
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = inv * (dh[c] - mean_dh - xh[c] * mean_dh_xh);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *beta, gbeta);
                }
                Op::Gather { table, ids } => {
                    let mut gt = Matrix::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        acc(
                            &mut grads,
                            p,
                            g.slice(s![offset..offset + rows, ..]).to_owned(),
                        );
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).ncols();
                        acc(
                            &mut grads,
                            p,
                            g.slice(s![.., offset..offset + cols]).to_owned(),
                        );
                        offset += cols;
                    }
                }
                Op::SliceRows(x, start, end) => {
                    let mut gx = Matrix::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols(x, start, end) => {
                    let mut gx = Matrix::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Matrix::zeros(qv.raw_dim());
                    let mut gk = Matrix::zeros(kv.raw_dim());
                    let mut gvv = Matrix::zeros(vv.raw_dim());
                    let mut p_iter = probs.iter();
                    for seg in segments {
                        let rows = seg.start..seg.start + seg.len;
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = p_iter.next().expect("attention cache");
                            let go = g.slice(s![rows.clone(), cols.clone()]);
                            let qh = qv.slice(s![rows.clone(), cols.clone()]);
                            let kh = kv.slice(s![rows.clone(), cols.clone()]);
                            let vh = vv.slice(s![rows.clone(), cols.clone()]);
                            let dp = go.dot(&vh.t());
                            let dv = p.t().dot(&go);
                            let mut ds = p * &dp;
                            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let dot: f64 = ds_row.sum();
                                Zip::from(&mut ds_row)
                                    .and(&p_row)
                                    .for_each(|x, &pv| *x -= pv * dot);
                            }
                            ds *= scale;
                            let dq = ds.dot(&kh);
                            let dk = ds.t().dot(&qh);
                            {
                                let mut t = gq.slice_mut(s![rows.clone(), cols.clone()]);
                                t += &dq;
                            }
                            {
                                let mut t = gk.slice_mut(s![rows.clone(), cols.clone()]);
                                t += &dk;
                            }
                            {
                                let mut t = gvv.slice_mut(s![rows.clone(), cols.clone()]);
                                t += &dv;
                            }
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gvv);
                }
                Op::MaskedLogSoftmax { x, mask, probs } => {
                    let total: f64 = g
                        .iter()
                        .zip(mask)
                        .filter(|(_, &m)| !m)
                        .map(|(&gv, _)| gv)
                        .sum();
                    let mut gx = Matrix::zeros((1, mask.len()));
                    for i in 0..mask.len() {
                        if !mask[i] {
                            gx[[0, i]] = g[[0, i]] - probs[i] * total;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Pick(x, r, c) => {
                    let mut gx = Matrix::zeros(self.value(*x).raw_dim());
                    gx[[*r, *c]] = g[[0, 0]];
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let mut gl = Matrix::zeros(probs.raw_dim());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let w = g[[r, 0]];
                            let mut row = gl.row_mut(r);
                            row.assign(&probs.row(r));
                            row[t] -= 1.0;
                            row *= w;
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `f` against the tape gradient of every
    /// parameter in `store`.
    fn check<F>(store: &ParamStore, f: F) -> f64
    where
        F: Fn(&mut Tape, &Bound) -> Var,
    {
        let mut tape = Tape::new();
        let bound = tape.bind(store);
        let root = f(&mut tape, &bound);
        let grads = tape.backward(root).for_bound(&bound, store);
        let eval = |s: &ParamStore| {
            let mut t = Tape::new();
            let b = t.bind(s);
            let r = f(&mut t, &b);
            t.scalar(r)
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for p in 0..store.len() {
            for i in 0..store.get(p).len() {
                let mut plus = store.clone();
                plus.get_mut(p).as_slice_mut().unwrap()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(p).as_slice_mut().unwrap()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = grads[p].as_slice().unwrap()[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("a", random(&mut rng, 3, 4));
        store.add("b", random(&mut rng, 4, 2));
        store.add("row", random(&mut rng, 1, 2));
        store.add("c", random(&mut rng, 3, 2));
        let err = check(&store, |t, b| {
            let ab = t.matmul(b.var(0), b.var(1));
            let x = t.add_row(ab, b.var(2));
            let th = t.tanh(x);
            let sg = t.sigmoid(b.var(3));
            let m = t.mul(th, sg);
            let ge = t.gelu(m);
            let tr = t.transpose(ge);
            let mt = t.matmul_t(tr, tr);
            let sc = t.scale(mt, 0.7);
            t.sum(sc)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn layer_norm_gather_and_slicing_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.add("table", random(&mut rng, 5, 6));
        store.add("gamma", random(&mut rng, 1, 6));
        store.add("beta", random(&mut rng, 1, 6));
        store.add("w", random(&mut rng, 6, 3));
        let err = check(&store, |t, b| {
            let x = t.gather(b.var(0), &[1, 3, 1, 4]);
            let ln = t.layer_norm(x, b.var(1), b.var(2));
            let top = t.slice_rows(ln, 0, 2);
            let bottom = t.slice_rows(ln, 2, 4);
            let left = t.slice_cols(top, 0, 3);
            let right = t.slice_cols(bottom, 3, 6);
            let cat = t.concat_cols(&[left, right]);
            let rows = t.concat_rows(&[cat, cat]);
            let proj = t.matmul(rows, b.var(3));
            let ce = t.cross_entropy(proj, &[Some(0), None, Some(2), Some(1)]);
            t.sum(ce)
        });
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn attention_gradients_with_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("q", random(&mut rng, 7, 4));
        store.add("k", random(&mut rng, 7, 4));
        store.add("v", random(&mut rng, 7, 4));
        store.add("w", random(&mut rng, 4, 4));
        let segments = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
        for causal in [false, true] {
            let err = check(&store, |t, b| {
                let a = t.attention(b.var(0), b.var(1), b.var(2), &segments, 2, causal);
                let p = t.matmul(a, b.var(3));
                let sq = t.mul(p, p);
                t.sum(sq)
            });
            assert!(err < 1e-5, "causal={causal} relative error {err}");
        }
    }

    #[test]
    fn masked_log_softmax_and_weighted_sum_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add("x", random(&mut rng, 1, 5));
        let err = check(&store, |t, b| {
            let ls = t.masked_log_softmax(b.var(0), &[false, true, false, false, true]);
            let a = t.pick(ls, 0, 0);
            let c = t.pick(ls, 0, 3);
            t.weighted_sum(&[(a, 0.3), (c, -1.2)])
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&mut rng, 4, 4);
        let k = random(&mut rng, 4, 4);
        let mut v = random(&mut rng, 4, 4);
        let seg = [Segment { start: 0, len: 4 }];
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let out = t.attention(qv, kv, vv, &seg, 2, true);
        let before = t.value(out).row(1).to_owned();
        v.row_mut(3).fill(10.0);
        let mut t2 = Tape::new();
        let (qv, kv, vv) = (t2.constant(q), t2.constant(k), t2.constant(v));
        let out2 = t2.attention(qv, kv, vv, &seg, 2, true);
        assert_eq!(before, t2.value(out2).row(1).to_owned());
    }
}
