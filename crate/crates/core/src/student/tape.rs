//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records the operations of one forward pass. Parameters are read
//! in place from a [`ModelParams`] and never copied onto the tape; their
//! gradients are accumulated into a [`Gradients`] buffer by [`Tape::backward`].

use super::model::{Gradients, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match data");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where op optionally transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(alpha: f64, a: &Mat, trans_a: bool, b: &Mat, trans_b: bool, beta: f64, c: &mut Mat) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape differs");
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c.data {
            *v *= beta;
        }
        return;
    }
    // SAFETY: strides and dimensions describe the exact extents of the three
    // buffers checked above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    c
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    row.iter().map(|v| v - log_z).collect()
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Param(usize),
    Input,
    Gather {
        param: usize,
        ids: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    LogProbSum {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Mat,
    },
}

struct Node {
    op: Op,
    value: Option<Mat>,
}

pub struct Tape<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(p), _) => &self.params.tensors[*p],
            (_, Some(v)) => v,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Option<Mat>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        self.push(Op::Param(index), None)
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(Op::Input, Some(value))
    }

    /// Rows `ids` of parameter `param` (embedding lookup).
    pub fn gather(&mut self, param: usize, ids: &[usize]) -> NodeId {
        let table = &self.params.tensors[param];
        let mut out = Mat::zeros(ids.len(), table.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(id));
        }
        self.push(
            Op::Gather {
                param,
                ids: ids.to_vec(),
            },
            Some(out),
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), Some(out))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(va.rows, vb.rows);
        gemm(1.0, va, false, vb, true, 0.0, &mut out);
        self.push(Op::MatMulT(a, b), Some(out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        assert!(out.same_shape(self.value(b)));
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), Some(out))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, out.cols));
        for r in 0..out.rows {
            for (o, v) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += v;
            }
        }
        self.push(Op::AddBias(x, bias), Some(out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = v.max(0.0);
        }
        self.push(Op::Relu(x), Some(out))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v *= s;
        }
        self.push(Op::Scale(x, s), Some(out))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let vx = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let cols = vx.cols;
        let mut xhat = Mat::zeros(vx.rows, cols);
        let mut out = Mat::zeros(vx.rows, cols);
        let mut inv_std = Vec::with_capacity(vx.rows);
        for r in 0..vx.rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.data[r * cols + c] = h;
                out.data[r * cols + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            Some(out),
        )
    }

    /// Row-wise softmax. With `causal`, row `i` only attends to columns
    /// `0..=i + (cols - rows)`; masked entries are exactly zero.
    pub fn softmax(&mut self, x: NodeId, causal: bool) -> NodeId {
        let vx = self.value(x);
        let mut out = Mat::zeros(vx.rows, vx.cols);
        let offset = vx.cols.saturating_sub(vx.rows);
        for r in 0..vx.rows {
            let limit = if causal { (r + offset + 1).min(vx.cols) } else { vx.cols };
            let row = &vx.row(r)[..limit];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out.row_mut(r)[..limit];
            let mut sum = 0.0;
            for (d, v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        self.push(Op::Softmax(x), Some(out))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = self.value(x);
        let mut out = Mat::zeros(vx.rows, len);
        for r in 0..vx.rows {
            out.row_mut(r).copy_from_slice(&vx.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { x, start }, Some(out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut start = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows);
            for r in 0..rows {
                out.row_mut(r)[start..start + v.cols].copy_from_slice(v.row(r));
            }
            start += v.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), Some(out))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = self.value(x);
        let out = Mat::from_vec(len, vx.cols, vx.data[start * vx.cols..(start + len) * vx.cols].to_vec());
        self.push(Op::SliceRows { x, start }, Some(out))
    }

    /// Sum over rows of `log softmax(logits[t])[targets[t]]`, as a 1x1 node.
    pub fn log_prob_sum(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let vl = self.value(logits);
        assert_eq!(vl.rows, targets.len());
        let mut probs = Mat::zeros(vl.rows, vl.cols);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let lsm = log_softmax(vl.row(r));
            total += lsm[t];
            for (p, l) in probs.row_mut(r).iter_mut().zip(&lsm) {
                *p = l.exp();
            }
        }
        self.push(
            Op::LogProbSum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Some(Mat::from_vec(1, 1, vec![total])),
        )
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.data.len(), 1, "node is not a scalar");
        v.data[0]
    }

    /// Accumulates `sum_i coeff_i * d(node_i)/d(params)` into `grads`.
    pub fn backward(&self, seeds: &[(NodeId, f64)], grads: &mut Gradients) {
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let last = seeds.iter().map(|(id, _)| id.0).max().unwrap_or(0);
        for &(id, coeff) in seeds {
            let v = self.value(id);
            let seed = Mat::from_vec(v.rows, v.cols, vec![coeff; v.data.len()]);
            accumulate(&mut adj, id, seed);
        }
        for idx in (0..=last).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.backprop_node(idx, g, &mut adj, grads);
        }
    }

    fn backprop_node(&self, idx: usize, g: Mat, adj: &mut [Option<Mat>], grads: &mut Gradients) {
        match &self.nodes[idx].op {
            Op::Param(p) => grads.tensors[*p].add_assign(&g),
            Op::Input => {}
            Op::Gather { param, ids } => {
                let table = &mut grads.tensors[*param];
                for (r, &id) in ids.iter().enumerate() {
                    for (t, v) in table.row_mut(id).iter_mut().zip(g.row(r)) {
                        *t += v;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = Mat::zeros(va.rows, va.cols);
                gemm(1.0, &g, false, vb, true, 0.0, &mut da);
                let mut db = Mat::zeros(vb.rows, vb.cols);
                gemm(1.0, va, true, &g, false, 0.0, &mut db);
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::MatMulT(a, b) => {
                // c = a b^T: da = g b, db = g^T a
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = Mat::zeros(va.rows, va.cols);
                gemm(1.0, &g, false, vb, false, 0.0, &mut da);
                let mut db = Mat::zeros(vb.rows, vb.cols);
                gemm(1.0, &g, true, va, false, 0.0, &mut db);
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g);
            }
            Op::AddBias(x, bias) => {
                let mut db = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(adj, *x, g);
                accumulate(adj, *bias, db);
            }
            Op::Relu(x) => {
                let out = self.nodes[idx].value.as_ref().expect("relu value");
                let mut dx = g;
                for (d, o) in dx.data.iter_mut().zip(&out.data) {
                    if *o <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(adj, *x, dx);
            }
            Op::Scale(x, s) => {
                let mut dx = g;
                for d in &mut dx.data {
                    *d *= s;
                }
                accumulate(adj, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let cols = g.cols;
                let n = cols as f64;
                let mut dgamma = Mat::zeros(1, cols);
                let mut dbeta = Mat::zeros(1, cols);
                let mut dx = Mat::zeros(g.rows, cols);
                for r in 0..g.rows {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..cols {
                        dgamma.data[c] += gr[c] * hr[c];
                        dbeta.data[c] += gr[c];
                        let dh = gr[c] * gv.data[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                    }
                    let dxr = dx.row_mut(r);
                    for c in 0..cols {
                        let dh = gr[c] * gv.data[c];
                        dxr[c] = inv_std[r] * (dh - sum_dh / n - hr[c] * sum_dh_h / n);
                    }
                }
                accumulate(adj, *x, dx);
                accumulate(adj, *gamma, dgamma);
                accumulate(adj, *beta, dbeta);
            }
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.as_ref().expect("softmax value");
                let mut dx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (d, (yv, gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(adj, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let mut dx = Mat::zeros(vx.rows, vx.cols);
                for r in 0..g.rows {
                    dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(adj, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    let mut dp = Mat::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[start..start + cols]);
                    }
                    start += cols;
                    accumulate(adj, p, dp);
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let mut dx = Mat::zeros(vx.rows, vx.cols);
                let off = start * vx.cols;
                dx.data[off..off + g.data.len()].copy_from_slice(&g.data);
                accumulate(adj, *x, dx);
            }
            Op::LogProbSum { logits, targets, probs } => {
                let seed = g.data[0];
                let mut dl = Mat::zeros(probs.rows, probs.cols);
                for (r, &t) in targets.iter().enumerate() {
                    for (d, p) in dl.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *d = -seed * p;
                    }
                    dl.data[r * probs.cols + t] += seed;
                }
                accumulate(adj, *logits, dl);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_softmax_normalizes() {
        let row = [1000.0, 999.0, -5.0, 0.0];
        let lsm = log_softmax(&row);
        let total: f64 = lsm.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(lsm.iter().all(|v| v.is_finite() && *v <= 0.0));
    }

    #[test]
    fn gemm_transposes() {
        let a = Mat::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Mat::from_vec(2, 3, vec![1., 0., 1., 0., 1., 0.]);
        let mut c = Mat::zeros(2, 2);
        gemm(1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c.data, vec![4., 2., 10., 5.]);
        let mut d = Mat::zeros(3, 3);
        gemm(1.0, &a, true, &b, false, 0.0, &mut d);
        assert_eq!(d.data, vec![1., 4., 1., 2., 5., 2., 3., 6., 3.]);
    }
}
