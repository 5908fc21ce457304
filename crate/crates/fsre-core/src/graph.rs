//! Eager reverse-mode autodiff over f64 matrices.
//!
//! A [`Graph`] is a flat tape of nodes. Every operation computes its value
//! immediately (define-by-run), which makes data-dependent control flow such
//! as the hard concept gate straightforward: the host inspects forward values
//! and decides which nodes to build next. [`Graph::backward`] then walks the
//! tape once in reverse and accumulates gradients for every node, including
//! parameters that were used several times.
//!
//! Vectors are 1×d matrices and scalars are 1×1; there is no separate tensor
//! rank machinery.

use ndarray::Array2;

pub type Matrix = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    /// Leaf value; `trainable` only affects which gradients callers read.
    Leaf,
    /// a · b
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// c · a for a host constant c
    Scale(NodeId, f64),
    /// a scaled elementwise by a 1×1 node
    MulScalar(NodeId, NodeId),
    /// Row-wise softmax; masked key columns were excluded at forward time
    /// and hold zero weight, which the backward rule preserves.
    SoftmaxRows(NodeId),
    /// 1×n → 1×1, numerically stable
    LogSumExpRow(NodeId),
    Gelu(NodeId),
    SelectRow(NodeId, usize),
    SelectCol(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    /// Mean over rows (optionally only rows with `keep[r] == true`) → 1×d
    MeanRows(NodeId, Option<Vec<bool>>),
    /// Gather rows of a table by id; backward scatter-adds.
    Embedding(Vec<usize>, NodeId),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    by_node: Vec<Option<Matrix>>,
}

impl Grads {
    /// Gradient of the loss with respect to the given node, if it received one.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.by_node[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.by_node[id.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_S * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_S * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}

/// Row-wise masked softmax used by both forward and backward paths.
fn softmax_rows_value(x: &Matrix, masked: Option<&[bool]>) -> Matrix {
    let (rows, cols) = x.dim();
    if let Some(m) = masked {
        assert_eq!(m.len(), cols, "softmax mask length must match columns");
        assert!(m.iter().any(|&b| !b), "softmax row with every key masked");
    }
    let mut out = Matrix::zeros((rows, cols));
    for r in 0..rows {
        let included = |j: usize| masked.map_or(true, |m| !m[j]);
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            if included(j) && x[[r, j]] > max {
                max = x[[r, j]];
            }
        }
        let mut sum = 0.0;
        for j in 0..cols {
            if included(j) {
                let e = (x[[r, j]] - max).exp();
                out[[r, j]] = e;
                sum += e;
            }
        }
        for j in 0..cols {
            out[[r, j]] /= sum;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Forward value of a 1×1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar_value on a non-1x1 node");
        v[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient is ever read from it by callers).
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Trainable leaf; same mechanics as `input`, named for intent.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.input(Matrix::from_elem((1, 1), v))
    }

    pub fn row(&mut self, v: &[f64]) -> NodeId {
        self.input(Matrix::from_shape_vec((1, v.len()), v.to_vec()).unwrap())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// a · bᵀ without materializing a transpose node.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulNt(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    /// Elementwise product of `a` with the 1×1 node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar_value(s);
        let v = self.value(a) * sv;
        self.push(Op::MulScalar(a, s), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows_value(self.value(a), None);
        self.push(Op::SoftmaxRows(a), v)
    }

    /// Softmax over each row with `masked[j] == true` columns excluded.
    pub fn softmax_rows_masked(&mut self, a: NodeId, masked: Vec<bool>) -> NodeId {
        let v = softmax_rows_value(self.value(a), Some(&masked));
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn log_sum_exp_row(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.nrows(), 1, "log_sum_exp_row expects a 1×n node");
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = x.iter().map(|&v| (v - max).exp()).sum();
        let v = Matrix::from_elem((1, 1), max + sum.ln());
        self.push(Op::LogSumExpRow(a), v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu_scalar);
        self.push(Op::Gelu(a), v)
    }

    pub fn select_row(&mut self, a: NodeId, row: usize) -> NodeId {
        let v = self.value(a).row(row).to_owned().insert_axis(ndarray::Axis(0));
        self.push(Op::SelectRow(a, row), v)
    }

    pub fn select_col(&mut self, a: NodeId, col: usize) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.nrows(), 1, "select_col expects a 1×n node");
        let v = Matrix::from_elem((1, 1), x[[0, col]]);
        self.push(Op::SelectCol(a, col), v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Matrix::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.ncols(), cols, "concat_rows column mismatch");
            for r in 0..pv.nrows() {
                for c in 0..cols {
                    v[[at + r, c]] = pv[[r, c]];
                }
            }
            at += pv.nrows();
        }
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Matrix::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                for c in 0..pv.ncols() {
                    v[[r, at + c]] = pv[[r, c]];
                }
            }
            at += pv.ncols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.mean_rows_value(a, None);
        self.push(Op::MeanRows(a, None), v)
    }

    /// Mean over rows with `keep[r] == true`.
    pub fn mean_rows_masked(&mut self, a: NodeId, keep: Vec<bool>) -> NodeId {
        let v = self.mean_rows_value(a, Some(&keep));
        self.push(Op::MeanRows(a, Some(keep)), v)
    }

    fn mean_rows_value(&self, a: NodeId, keep: Option<&[bool]>) -> Matrix {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        if let Some(k) = keep {
            assert_eq!(k.len(), rows, "mean_rows keep mask length mismatch");
        }
        let kept: Vec<usize> = (0..rows)
            .filter(|&r| keep.map_or(true, |k| k[r]))
            .collect();
        assert!(!kept.is_empty(), "mean_rows with no kept rows");
        let mut v = Matrix::zeros((1, cols));
        for &r in &kept {
            for c in 0..cols {
                v[[0, c]] += x[[r, c]];
            }
        }
        v /= kept.len() as f64;
        v
    }

    /// Gather `ids` rows of `table` into a len×d matrix.
    pub fn embedding(&mut self, ids: &[usize], table: NodeId) -> NodeId {
        let t = self.value(table);
        let mut v = Matrix::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            for c in 0..t.ncols() {
                v[[r, c]] = t[[id, c]];
            }
        }
        self.push(Op::Embedding(ids.to_vec(), table), v)
    }

    /// Cross-entropy of a 1×N logit row against `label`:
    /// `logsumexp(logits) − logits[label]`.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> NodeId {
        let lse = self.log_sum_exp_row(logits);
        let picked = self.select_col(logits, label);
        self.sub(lse, picked)
    }

    /// Backpropagate from a 1×1 `root` through the whole tape.
    pub fn backward(&mut self, root: NodeId) -> Grads {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-insert so callers can read gradients of intermediate nodes.
            grads[i] = Some(g.clone());
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    // c = a·bᵀ: da = g·b, db = gᵀ·a
                    let da = g.dot(&self.nodes[b.0].value);
                    let db = g.t().dot(&self.nodes[a.0].value);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -&g);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, &g * *c);
                }
                Op::MulScalar(a, s) => {
                    let sv = self.nodes[s.0].value[[0, 0]];
                    let da = &g * sv;
                    let ds = (&g * &self.nodes[a.0].value).sum();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *s, Matrix::from_elem((1, 1), ds));
                }
                Op::SoftmaxRows(a) => {
                    // dx_r = y_r ∘ (g_r − (g_r·y_r)); masked columns have y = 0.
                    let y = &self.nodes[i].value;
                    let (rows, cols) = y.dim();
                    let mut dx = Matrix::zeros((rows, cols));
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += g[[r, c]] * y[[r, c]];
                        }
                        for c in 0..cols {
                            dx[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LogSumExpRow(a) => {
                    let sm = softmax_rows_value(&self.nodes[a.0].value, None);
                    accumulate(&mut grads, *a, &sm * g[[0, 0]]);
                }
                Op::Gelu(a) => {
                    let da = self.nodes[a.0].value.mapv(gelu_grad_scalar) * &g;
                    accumulate(&mut grads, *a, da);
                }
                Op::SelectRow(a, row) => {
                    let (rows, cols) = self.nodes[a.0].value.dim();
                    let mut da = Matrix::zeros((rows, cols));
                    for c in 0..cols {
                        da[[*row, c]] = g[[0, c]];
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SelectCol(a, col) => {
                    let cols = self.nodes[a.0].value.ncols();
                    let mut da = Matrix::zeros((1, cols));
                    da[[0, *col]] = g[[0, 0]];
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let pr = self.nodes[p.0].value.nrows();
                        let cols = self.nodes[p.0].value.ncols();
                        let mut dp = Matrix::zeros((pr, cols));
                        for r in 0..pr {
                            for c in 0..cols {
                                dp[[r, c]] = g[[at + r, c]];
                            }
                        }
                        accumulate(&mut grads, p, dp);
                        at += pr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.nrows();
                        let pc = self.nodes[p.0].value.ncols();
                        let mut dp = Matrix::zeros((rows, pc));
                        for r in 0..rows {
                            for c in 0..pc {
                                dp[[r, c]] = g[[r, at + c]];
                            }
                        }
                        accumulate(&mut grads, p, dp);
                        at += pc;
                    }
                }
                Op::MeanRows(a, keep) => {
                    let (rows, cols) = self.nodes[a.0].value.dim();
                    let kept: Vec<usize> = (0..rows)
                        .filter(|&r| keep.as_ref().map_or(true, |k| k[r]))
                        .collect();
                    let scale = 1.0 / kept.len() as f64;
                    let mut da = Matrix::zeros((rows, cols));
                    for &r in &kept {
                        for c in 0..cols {
                            da[[r, c]] = g[[0, c]] * scale;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Embedding(ids, table) => {
                    let table = *table;
                    let ids = ids.clone();
                    let (rows, cols) = self.nodes[table.0].value.dim();
                    let mut dt = Matrix::zeros((rows, cols));
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            dt[[id, c]] += g[[r, c]];
                        }
                    }
                    accumulate(&mut grads, table, dt);
                }
            }
        }
        Grads { by_node: grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite difference of `f` with respect to one entry of `m`.
    fn fd<F: FnMut(&Matrix) -> f64>(m: &Matrix, r: usize, c: usize, mut f: F) -> f64 {
        let eps = 1e-6;
        let mut plus = m.clone();
        plus[[r, c]] += eps;
        let mut minus = m.clone();
        minus[[r, c]] -= eps;
        (f(&plus) - f(&minus)) / (2.0 * eps)
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        let denom = a.abs().max(b.abs()).max(1e-8);
        assert!(
            (a - b).abs() / denom < tol,
            "analytic {a} vs numeric {b} (rel {})",
            (a - b).abs() / denom
        );
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let a0 = array![[0.3, -1.2], [0.5, 0.8], [-0.1, 0.4]];
        let b0 = array![[1.1, 0.2], [-0.7, 0.9]];
        let loss = |a: &Matrix, b: &Matrix| -> f64 {
            let mut g = Graph::new();
            let x = g.param(a.clone());
            let w = g.param(b.clone());
            let y = g.matmul(x, w);
            let z = g.gelu(y);
            let m = g.mean_rows(z);
            let s = g.log_sum_exp_row(m);
            g.scalar_value(s)
        };

        let mut g = Graph::new();
        let x = g.param(a0.clone());
        let w = g.param(b0.clone());
        let y = g.matmul(x, w);
        let z = g.gelu(y);
        let m = g.mean_rows(z);
        let s = g.log_sum_exp_row(m);
        let grads = g.backward(s);
        let da = grads.get(x).unwrap().clone();
        let db = grads.get(w).unwrap().clone();

        for r in 0..3 {
            for c in 0..2 {
                let n = fd(&a0, r, c, |m| loss(m, &b0));
                assert_close(da[[r, c]], n, 1e-6);
            }
        }
        for r in 0..2 {
            for c in 0..2 {
                let n = fd(&b0, r, c, |m| loss(&a0, m));
                assert_close(db[[r, c]], n, 1e-6);
            }
        }
    }

    #[test]
    fn masked_softmax_cross_entropy_gradient() {
        let x0 = array![[0.2, -0.4, 1.3, 0.0], [0.9, 0.1, -0.2, 0.5]];
        let masked = vec![false, true, false, false];
        let run = |x: &Matrix| -> (f64, Option<(Matrix,)>) {
            let mut g = Graph::new();
            let a = g.param(x.clone());
            let sm = g.softmax_rows_masked(a, masked.clone());
            let r0 = g.select_row(sm, 0);
            let r1 = g.select_row(sm, 1);
            let cat = g.concat_cols(&[r0, r1]);
            let lse = g.log_sum_exp_row(cat);
            let val = g.scalar_value(lse);
            let grads = g.backward(lse);
            (val, Some((grads.get(a).unwrap().clone(),)))
        };
        let (_, some) = run(&x0);
        let (da,) = some.unwrap();
        // Masked column never receives gradient.
        assert_eq!(da[[0, 1]], 0.0);
        assert_eq!(da[[1, 1]], 0.0);
        for r in 0..2 {
            for c in 0..4 {
                let n = fd(&x0, r, c, |m| run(m).0);
                assert_close(da[[r, c]], n, 1e-5);
            }
        }
    }

    #[test]
    fn embedding_scatter_and_reuse_accumulate() {
        let table0 = array![[0.1, 0.2], [0.3, -0.1], [-0.5, 0.7]];
        let ids = vec![2usize, 0, 2];
        let run = |t: &Matrix| -> (f64, Matrix) {
            let mut g = Graph::new();
            let table = g.param(t.clone());
            let e = g.embedding(&ids, table);
            // Use the table twice to exercise gradient accumulation.
            let e2 = g.embedding(&[1usize], table);
            let pooled = g.mean_rows(e);
            let joined = g.concat_rows(&[pooled, e2]);
            let m = g.mean_rows(joined);
            let s = g.log_sum_exp_row(m);
            let v = g.scalar_value(s);
            let grads = g.backward(s);
            (v, grads.get(table).unwrap().clone())
        };
        let (_, dt) = run(&table0);
        for r in 0..3 {
            for c in 0..2 {
                let n = fd(&table0, r, c, |m| run(m).0);
                assert_close(dt[[r, c]], n, 1e-6);
            }
        }
    }

    #[test]
    fn mul_scalar_and_select_grads() {
        let a0 = array![[0.5, -0.3, 0.8]];
        let s0 = array![[0.7]];
        let run = |a: &Matrix, s: &Matrix| -> (f64, Matrix, Matrix) {
            let mut g = Graph::new();
            let an = g.param(a.clone());
            let sn = g.param(s.clone());
            let scaled = g.mul_scalar(an, sn);
            let picked = g.select_col(scaled, 2);
            let lse = g.log_sum_exp_row(scaled);
            let loss = g.add(lse, picked);
            let v = g.scalar_value(loss);
            let grads = g.backward(loss);
            (
                v,
                grads.get(an).unwrap().clone(),
                grads.get(sn).unwrap().clone(),
            )
        };
        let (_, da, ds) = run(&a0, &s0);
        for c in 0..3 {
            let n = fd(&a0, 0, c, |m| run(m, &s0).0);
            assert_close(da[[0, c]], n, 1e-6);
        }
        let n = fd(&s0, 0, 0, |m| run(&a0, m).0);
        assert_close(ds[[0, 0]], n, 1e-6);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_n() {
        let mut g = Graph::new();
        let logits = g.row(&[0.0, 0.0, 0.0, 0.0, 0.0]);
        let ce = g.cross_entropy(logits, 3);
        assert!((g.scalar_value(ce) - (5.0f64).ln()).abs() < 1e-12);
    }
}
