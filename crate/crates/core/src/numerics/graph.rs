//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` walks it in reverse.

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[r, c] + [1, c]` broadcast over rows.
    AddRow(Var, Var),
    /// `[r, c] * [1, c]` broadcast over rows.
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    /// Per-row standardization; the affine part of layer norm is `MulRow` + `AddRow`.
    Normalize(Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    LogClamped(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SquaredNorm(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Element(Var, usize),
    /// log-sum-exp over scalar nodes.
    LogSumExp(Vec<Var>),
    /// Sum of scalar nodes.
    AddScalars(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Rebuilt for every training step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `v`; a zero tensor when `v` did not influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.adjoints[v.0] {
            Some(a) => Tensor::new(self.shapes[v.0].clone(), a.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Appends the adjoint of `v` to `out` without building a tensor.
    pub fn extend_into(&self, v: Var, out: &mut Vec<f64>) {
        match &self.adjoints[v.0] {
            Some(a) => out.extend_from_slice(a),
            None => out.extend(std::iter::repeat_n(0.0, self.shapes[v.0].iter().product())),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, k), rg)
    }

    fn check_row_broadcast(&self, op: &str, a: Var, row: Var) {
        let (x, r) = (self.value(a), self.value(row));
        assert!(
            r.rows() == 1 && r.cols() == x.cols(),
            "{op}: shape mismatch {:?} vs {:?}",
            x.shape(),
            r.shape()
        );
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.check_row_broadcast("add_row", a, row);
        let x = self.value(a);
        let r = self.value(row).data();
        let c = x.cols();
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), data);
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.check_row_broadcast("mul_row", a, row);
        let x = self.value(a);
        let r = self.value(row).data();
        let c = x.cols();
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, g) in chunk.iter_mut().zip(r) {
                *v *= g;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), data);
        let rg = self.rg(&[a, row]);
        self.push(v, Op::MulRow(a, row), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = tensor::softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = tensor::log_softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::LogSoftmax(a), rg)
    }

    /// Per-row `(x - mean) / sqrt(var + 1e-5)`.
    pub fn normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(v, Op::Normalize(a), rg)
    }

    /// Layer norm with learned gain and bias rows.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let n = self.normalize(a);
        let g = self.mul_row(n, gain);
        self.add_row(g, bias)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    /// `ln(max(x, floor))`; zero gradient on clamped entries.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.rg(&[a]);
        self.push(v, Op::LogClamped(a, floor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Column means, `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; c];
        for row in x.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::row(out), Op::MeanRows(a), rg)
    }

    pub fn squared_l2_norm(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).squared_l2_norm());
        let rg = self.rg(&[a]);
        self.push(v, Op::SquaredNorm(a), rg)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let c = x.cols();
        assert!(
            start < end && end <= c,
            "slice_cols: range {start}..{end} out of bounds for shape {:?}",
            x.shape()
        );
        let w = end - start;
        let mut data = Vec::with_capacity(x.rows() * w);
        for row in x.data().chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let v = Tensor::from_rows(x.rows(), w, data);
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols(a, start, end), rg)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.value(parts[0]).rows();
        for p in parts {
            assert!(
                self.value(*p).rows() == rows,
                "concat_cols: shape mismatch {:?} vs {:?}",
                self.value(parts[0]).shape(),
                self.value(*p).shape()
            );
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let v = Tensor::from_rows(rows, total, data);
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Scalar node holding the flat element `idx` of `a`.
    pub fn element(&mut self, a: Var, idx: usize) -> Var {
        let v = Tensor::scalar(self.value(a).data()[idx]);
        let rg = self.rg(&[a]);
        self.push(v, Op::Element(a, idx), rg)
    }

    /// `ln Σ exp(xᵢ)` over finite scalar nodes.
    pub fn log_sum_exp(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "log_sum_exp: no inputs");
        if parts.len() == 1 {
            return parts[0];
        }
        let xs: Vec<f64> = parts.iter().map(|p| self.value(*p).item()).collect();
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let rg = self.rg(parts);
        self.push(Tensor::scalar(v), Op::LogSumExp(parts.to_vec()), rg)
    }

    /// Sum of scalar nodes, accumulated left to right.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_scalars: no inputs");
        let v: f64 = parts.iter().map(|p| self.value(*p).item()).sum();
        let rg = self.rg(parts);
        self.push(Tensor::scalar(v), Op::AddScalars(parts.to_vec()), rg)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = root.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        if self.nodes[root.0].requires_grad {
            adj[root.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(grad) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &grad, &mut adj);
            adj[i] = Some(grad);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        // Accumulates `f(k)` into the adjoint of `v` for each flat index `k`.
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(o, d)| *o += d * k)),
            Op::AddRow(a, row) => {
                acc(*a, &|s| add_into(s, g));
                let c = val(*row).len();
                acc(*row, &|s| {
                    for chunk in g.chunks(c) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let x = val(*a).data();
                let r = val(*row).data();
                let c = r.len();
                acc(*a, &|s| {
                    for (k, o) in s.iter_mut().enumerate() {
                        *o += g[k] * r[k % c];
                    }
                });
                acc(*row, &|s| {
                    for (k, d) in g.iter().enumerate() {
                        s[k % c] += d * x[k];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let out_shape = node.value.shape().to_vec();
                let gt = Tensor::new(out_shape, g.to_vec());
                if self.nodes[a.0].requires_grad {
                    let da = tensor::matmul_nt(&gt, val(*b));
                    acc(*a, &|s| add_into(s, da.data()));
                }
                if self.nodes[b.0].requires_grad {
                    let db = tensor::matmul_tn(val(*a), &gt);
                    acc(*b, &|s| add_into(s, db.data()));
                }
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).transpose();
                acc(*a, &|s| add_into(s, gt.data()));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*a, &|s| {
                    for ((sr, yr), gr) in s.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for k in 0..c {
                            sr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*a, &|s| {
                    for ((sr, yr), gr) in s.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let total: f64 = gr.iter().sum();
                        for k in 0..c {
                            sr[k] += gr[k] - yr[k].exp() * total;
                        }
                    }
                });
            }
            Op::Normalize(a) => {
                let x = val(*a).data();
                let y = node.value.data();
                let c = node.value.cols();
                acc(*a, &|s| {
                    for (r, sr) in s.chunks_mut(c).enumerate() {
                        let xr = &x[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let mean = xr.iter().sum::<f64>() / c as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let g_mean = gr.iter().sum::<f64>() / c as f64;
                        let gy_mean = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                        for k in 0..c {
                            sr[k] += inv * (gr[k] - g_mean - yr[k] * gy_mean);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                acc(*a, &|s| {
                    for (k, o) in s.iter_mut().enumerate() {
                        let xv = x[k];
                        let t = (GELU_C * (xv + 0.044715 * xv * xv * xv)).tanh();
                        let dt = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv) * (1.0 - t * t);
                        *o += g[k] * (0.5 * (1.0 + t) + 0.5 * xv * dt);
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                acc(*a, &|s| {
                    for (k, o) in s.iter_mut().enumerate() {
                        if x[k] > 0.0 {
                            *o += g[k];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for (k, o) in s.iter_mut().enumerate() {
                        *o += g[k] * y[k];
                    }
                });
            }
            Op::LogClamped(a, floor) => {
                let x = val(*a).data();
                acc(*a, &|s| {
                    for (k, o) in s.iter_mut().enumerate() {
                        if x[k] > *floor {
                            *o += g[k] / x[k];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &|s| s.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::MeanRows(a) => {
                let r = val(*a).rows() as f64;
                let c = g.len();
                acc(*a, &|s| {
                    for chunk in s.chunks_mut(c) {
                        for (o, d) in chunk.iter_mut().zip(g) {
                            *o += d / r;
                        }
                    }
                });
            }
            Op::SquaredNorm(a) => {
                let x = val(*a).data();
                acc(*a, &|s| {
                    for (k, o) in s.iter_mut().enumerate() {
                        *o += 2.0 * x[k] * g[0];
                    }
                });
            }
            Op::SliceCols(a, start, end) => {
                let c = val(*a).cols();
                let w = end - start;
                acc(*a, &|s| {
                    for (sr, gr) in s.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut sr[*start..*end], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let off = offset;
                    acc(*p, &|s| {
                        for (sr, gr) in s.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(sr, &gr[off..off + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Element(a, idx) => acc(*a, &|s| s[*idx] += g[0]),
            Op::LogSumExp(parts) => {
                let y = node.value.item();
                for p in parts {
                    let w = (val(*p).item() - y).exp();
                    acc(*p, &|s| s[0] += g[0] * w);
                }
            }
            Op::AddScalars(parts) => {
                for p in parts {
                    acc(*p, &|s| s[0] += g[0]);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let y = g.squared_l2_norm(x);
        assert_eq!(g.value(y).item(), 5.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_root_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let c = g.constant(Tensor::scalar(3.0));
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn unused_nodes_have_zero_adjoint() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let unused = g.param(Tensor::row(vec![4.0]));
        let y = g.sum(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0]);
        assert_eq!(grads.get(unused).shape(), &[1, 1]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_do_not_reach_constants() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let c = g.constant(Tensor::row(vec![3.0, 5.0]));
        let d = g.sub(x, c);
        let y = g.squared_l2_norm(d);
        assert!(!g.requires_grad(c));
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(c).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(x).data(), &[-4.0, -6.0]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch [1, 2] vs [1, 3]")]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.param(Tensor::row(vec![1.0, 2.0]));
        let b = g.param(Tensor::row(vec![1.0, 2.0, 3.0]));
        g.add(a, b);
    }

    #[test]
    fn log_sum_exp_matches_direct_formula() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(0.3));
        let b = g.param(Tensor::scalar(-1.2));
        let y = g.log_sum_exp(&[a, b]);
        let expected = (0.3f64.exp() + (-1.2f64).exp()).ln();
        assert!((g.value(y).item() - expected).abs() < 1e-15);
        let grads = g.backward(y).unwrap();
        let pa = 0.3f64.exp() / (0.3f64.exp() + (-1.2f64).exp());
        assert!((grads.get(a).item() - pa).abs() < 1e-15);
        assert!((grads.get(b).item() - (1.0 - pa)).abs() < 1e-15);
    }
}
