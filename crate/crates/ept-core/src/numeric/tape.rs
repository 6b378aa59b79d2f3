//! Reverse-mode differentiation tape.
//!
//! Operations are recorded in creation order, which is already a topological
//! order (parents always precede children), so the backward pass is a single
//! reverse sweep. Each primitive's backward rule is hand-derived and checked
//! against central finite differences in the tests below; composite losses
//! get their gradients from the sweep, never from per-composite formulas.

use crate::error::{EptError, Result};
use crate::numeric::ops;
use crate::numeric::Matrix;

/// Index of a node on the tape.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    TransposedConv { seed: NodeId, kernel: NodeId, stride: usize },
    Crop { src: NodeId, rows: usize, cols: usize },
    SoftmaxRows { src: NodeId, tau: f64 },
    Tanh(NodeId),
    MeanRows(NodeId),
    Row { src: NodeId, index: usize },
    StackRows(Vec<NodeId>),
    Gather { src: NodeId, coords: Vec<(usize, usize)> },
    Dot(NodeId, NodeId),
    Norm(NodeId),
    MulScalar { src: NodeId, scalar: NodeId },
    Recip(NodeId),
    CrossEntropy { logits: NodeId, target: usize },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Build a fresh one per evaluation; gradients become
/// available after [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Register a trainable parameter (gradient target).
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Register a constant; never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.shape(), (1, 1));
        self.nodes[id].value.get(0, 0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::matmul(&self.nodes[a].value, &self.nodes[b].value)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.add(&self.nodes[b].value)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a].value.scale(c);
        let rg = self.requires(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.transposed();
        let rg = self.requires(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn transposed_conv(&mut self, seed: NodeId, kernel: NodeId, stride: usize) -> Result<NodeId> {
        let value = ops::transposed_conv2d(&self.nodes[seed].value, &self.nodes[kernel].value, stride)?;
        let rg = self.requires(seed) || self.requires(kernel);
        Ok(self.push(value, Op::TransposedConv { seed, kernel, stride }, rg))
    }

    pub fn crop(&mut self, src: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let value = self.nodes[src].value.crop(rows, cols)?;
        let rg = self.requires(src);
        Ok(self.push(value, Op::Crop { src, rows, cols }, rg))
    }

    /// Row-wise temperature softmax with the usual max shift.
    pub fn softmax_rows(&mut self, src: NodeId, tau: f64) -> Result<NodeId> {
        let m = &self.nodes[src].value;
        let mut value = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let p = ops::softmax_temp(m.row(r), tau)?;
            value.row_mut(r).copy_from_slice(&p);
        }
        let rg = self.requires(src);
        Ok(self.push(value, Op::SoftmaxRows { src, tau }, rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(f64::tanh);
        let rg = self.requires(a);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Column means as a 1 x cols row.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let inv = 1.0 / m.rows() as f64;
        let value = Matrix::from_fn(1, m.cols(), |_, c| {
            let mut acc = 0.0;
            for r in 0..m.rows() {
                acc += m.get(r, c);
            }
            acc * inv
        });
        let rg = self.requires(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// A single row as a 1 x cols node.
    pub fn row(&mut self, src: NodeId, index: usize) -> Result<NodeId> {
        let m = &self.nodes[src].value;
        if index >= m.rows() {
            return Err(EptError::Index(format!(
                "row {index} out of range for {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let value = Matrix::row_vector(m.row(index));
        let rg = self.requires(src);
        Ok(self.push(value, Op::Row { src, index }, rg))
    }

    /// Stack 1 x cols rows into an n x cols matrix.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(EptError::Contract("stack_rows: no rows given".into()));
        }
        let cols = self.nodes[parts[0]].value.cols();
        for &p in parts {
            let shape = self.nodes[p].value.shape();
            if shape != (1, cols) {
                return Err(EptError::Shape(format!(
                    "stack_rows: expected 1x{cols} rows, got {}x{}",
                    shape.0, shape.1
                )));
            }
        }
        let value = Matrix::from_fn(parts.len(), cols, |r, c| self.nodes[parts[r]].value.get(0, c));
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(value, Op::StackRows(parts.to_vec()), rg))
    }

    /// Gather entries into a 1 x len row.
    pub fn gather(&mut self, src: NodeId, coords: Vec<(usize, usize)>) -> Result<NodeId> {
        if coords.is_empty() {
            return Err(EptError::Contract("gather: empty coordinate list".into()));
        }
        let m = &self.nodes[src].value;
        for &(r, c) in &coords {
            if r >= m.rows() || c >= m.cols() {
                return Err(EptError::Index(format!(
                    "gather: ({r},{c}) out of range for {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let value = Matrix::from_fn(1, coords.len(), |_, j| m.get(coords[j].0, coords[j].1));
        let rg = self.requires(src);
        Ok(self.push(value, Op::Gather { src, coords }, rg))
    }

    /// Frobenius inner product of two same-shape nodes, as a 1x1 node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, mb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ma.shape() != mb.shape() {
            return Err(EptError::Shape(format!(
                "dot: {}x{} vs {}x{}",
                ma.rows(),
                ma.cols(),
                mb.rows(),
                mb.cols()
            )));
        }
        let v: f64 = ma.as_slice().iter().zip(mb.as_slice()).map(|(x, y)| x * y).sum();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Matrix::scalar(v), Op::Dot(a, b), rg))
    }

    /// Euclidean norm as a 1x1 node; rejects zero-norm input (the gradient
    /// would be undefined there).
    pub fn norm(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a].value.frobenius_norm();
        if n == 0.0 {
            return Err(EptError::Degenerate("norm: zero vector".into()));
        }
        let rg = self.requires(a);
        Ok(self.push(Matrix::scalar(n), Op::Norm(a), rg))
    }

    /// Multiply every entry of `src` by a 1x1 scalar node.
    pub fn mul_scalar(&mut self, src: NodeId, scalar: NodeId) -> Result<NodeId> {
        if self.nodes[scalar].value.shape() != (1, 1) {
            return Err(EptError::Shape(format!(
                "mul_scalar: scalar operand is {}x{}, expected 1x1",
                self.nodes[scalar].value.rows(),
                self.nodes[scalar].value.cols()
            )));
        }
        let s = self.nodes[scalar].value.get(0, 0);
        let value = self.nodes[src].value.scale(s);
        let rg = self.requires(src) || self.requires(scalar);
        Ok(self.push(value, Op::MulScalar { src, scalar }, rg))
    }

    /// Reciprocal of a nonzero 1x1 node.
    pub fn recip(&mut self, s: NodeId) -> Result<NodeId> {
        if self.nodes[s].value.shape() != (1, 1) {
            return Err(EptError::Shape("recip: operand must be 1x1".into()));
        }
        let v = self.nodes[s].value.get(0, 0);
        if v == 0.0 {
            return Err(EptError::Degenerate("recip: division by zero".into()));
        }
        let rg = self.requires(s);
        Ok(self.push(Matrix::scalar(1.0 / v), Op::Recip(s), rg))
    }

    /// Negative log softmax probability of `target`; logits must be a vector node.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let m = &self.nodes[logits].value;
        if !m.is_vector() {
            return Err(EptError::Shape(format!(
                "cross_entropy: logits must be a vector, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let l = ops::cross_entropy(m.as_slice(), target)?;
        let rg = self.requires(logits);
        Ok(self.push(Matrix::scalar(l), Op::CrossEntropy { logits, target }, rg))
    }

    /// Accumulated gradient of a node, available after [`Tape::backward`].
    /// Constants and nodes disconnected from the loss have none.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    fn accumulate(&mut self, id: NodeId, delta: &Matrix) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let shape = self.nodes[id].value.shape();
        let slot = self.grads[id].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        slot.add_scaled(delta, 1.0).expect("gradient shape mismatch");
    }

    fn accumulate_at(&mut self, id: NodeId, r: usize, c: usize, v: f64) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let shape = self.nodes[id].value.shape();
        let slot = self.grads[id].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        slot.add_at(r, c, v);
    }

    /// Reverse sweep from a scalar loss node. Gradients accumulate for every
    /// node on a path from a registered parameter to the loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.shape() != (1, 1) {
            return Err(EptError::Contract(format!(
                "backward: loss must be scalar, got {}x{}",
                self.nodes[loss].value.rows(),
                self.nodes[loss].value.cols()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss].requires_grad {
            return Ok(()); // loss is constant w.r.t. every parameter
        }
        self.grads[loss] = Some(Matrix::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(g) = self.grads[id].clone() else { continue };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.requires(a) {
                        let bt = self.nodes[b].value.transposed();
                        let da = ops::matmul(&g, &bt)?;
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let at = self.nodes[a].value.transposed();
                        let db = ops::matmul(&at, &g)?;
                        self.accumulate(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Scale(a, c) => {
                    self.accumulate(a, &g.scale(c));
                }
                Op::Transpose(a) => {
                    self.accumulate(a, &g.transposed());
                }
                Op::TransposedConv { seed, kernel, stride } => {
                    if self.requires(seed) {
                        let k = &self.nodes[kernel].value;
                        let dz = ops::transposed_conv2d_grad_input(
                            &g,
                            k,
                            stride,
                            self.nodes[seed].value.shape(),
                        );
                        self.accumulate(seed, &dz);
                    }
                    if self.requires(kernel) {
                        let s = self.nodes[kernel].value.rows();
                        let dk = ops::transposed_conv2d_grad_kernel(&g, &self.nodes[seed].value, stride, s);
                        self.accumulate(kernel, &dk);
                    }
                }
                Op::Crop { src, rows, cols } => {
                    for r in 0..rows {
                        for c in 0..cols {
                            self.accumulate_at(src, r, c, g.get(r, c));
                        }
                    }
                }
                Op::SoftmaxRows { src, tau } => {
                    let y = &self.nodes[id].value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let mut dot = 0.0;
                        for c in 0..y.cols() {
                            dot += g.get(r, c) * y.get(r, c);
                        }
                        for c in 0..y.cols() {
                            dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot) / tau);
                        }
                    }
                    self.accumulate(src, &dx);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let da = Matrix::from_fn(y.rows(), y.cols(), |r, c| {
                        g.get(r, c) * (1.0 - y.get(r, c) * y.get(r, c))
                    });
                    self.accumulate(a, &da);
                }
                Op::MeanRows(a) => {
                    let rows = self.nodes[a].value.rows();
                    let inv = 1.0 / rows as f64;
                    let da = Matrix::from_fn(rows, g.cols(), |_, c| g.get(0, c) * inv);
                    self.accumulate(a, &da);
                }
                Op::Row { src, index } => {
                    for c in 0..g.cols() {
                        self.accumulate_at(src, index, c, g.get(0, c));
                    }
                }
                Op::StackRows(parts) => {
                    for (r, &p) in parts.iter().enumerate() {
                        let dp = Matrix::row_vector(g.row(r));
                        self.accumulate(p, &dp);
                    }
                }
                Op::Gather { src, coords } => {
                    for (j, &(r, c)) in coords.iter().enumerate() {
                        self.accumulate_at(src, r, c, g.get(0, j));
                    }
                }
                Op::Dot(a, b) => {
                    let gv = g.get(0, 0);
                    if self.requires(a) {
                        let da = self.nodes[b].value.scale(gv);
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let db = self.nodes[a].value.scale(gv);
                        self.accumulate(b, &db);
                    }
                }
                Op::Norm(a) => {
                    let n = self.nodes[id].value.get(0, 0);
                    let da = self.nodes[a].value.scale(g.get(0, 0) / n);
                    self.accumulate(a, &da);
                }
                Op::MulScalar { src, scalar } => {
                    let s = self.nodes[scalar].value.get(0, 0);
                    if self.requires(src) {
                        self.accumulate(src, &g.scale(s));
                    }
                    if self.requires(scalar) {
                        let x = &self.nodes[src].value;
                        let mut acc = 0.0;
                        for (gv, xv) in g.as_slice().iter().zip(x.as_slice()) {
                            acc += gv * xv;
                        }
                        self.accumulate_at(scalar, 0, 0, acc);
                    }
                }
                Op::Recip(s) => {
                    let v = self.nodes[s].value.get(0, 0);
                    self.accumulate_at(s, 0, 0, -g.get(0, 0) / (v * v));
                }
                Op::CrossEntropy { logits, target } => {
                    if self.requires(logits) {
                        let m = &self.nodes[logits].value;
                        let mut d = vec![0.0; m.len()];
                        ops::cross_entropy_backward(m.as_slice(), target, g.get(0, 0), &mut d);
                        let dm = Matrix::from_vec(m.rows(), m.cols(), d)?;
                        self.accumulate(logits, &dm);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_check;

    // Finite-difference check for a single-parameter graph builder.
    fn check_one(param: Matrix, build: impl Fn(&mut Tape, NodeId) -> NodeId) -> f64 {
        let mut tape = Tape::new();
        let p = tape.param(param.clone());
        let loss = build(&mut tape, p);
        tape.backward(loss).unwrap();
        let analytic = vec![tape.grad(p).unwrap().clone()];
        let params = vec![param];
        finite_diff_check(
            |ps: &[Matrix]| {
                let mut t = Tape::new();
                let p = t.param(ps[0].clone());
                let loss = build(&mut t, p);
                Ok(t.scalar_value(loss))
            },
            &params,
            &analytic,
            1e-6,
        )
        .unwrap()
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = crate::testrng(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.next() - 0.5)
    }

    #[test]
    fn matmul_backward_matches_fd() {
        let x = rand_matrix(3, 2, 1);
        let err = check_one(rand_matrix(4, 3, 2), |t, p| {
            let xc = t.constant(x.clone());
            let y = t.matmul(p, xc).unwrap();
            let ones = t.constant(Matrix::from_fn(4, 2, |_, _| 1.0));
            t.dot(y, ones).unwrap()
        });
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn sum_of_linear_map_has_outer_product_gradient() {
        // loss = sum(W x) => dL/dW = ones * x^T
        let x = rand_matrix(3, 1, 7);
        let mut tape = Tape::new();
        let w = tape.param(rand_matrix(2, 3, 8));
        let xc = tape.constant(x.clone());
        let y = tape.matmul(w, xc).unwrap();
        let ones = tape.constant(Matrix::from_fn(2, 1, |_, _| 1.0));
        let loss = tape.dot(y, ones).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(w).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((g.get(r, c) - x.get(c, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disconnected_parameter_gets_no_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(rand_matrix(2, 2, 3));
        let unused = tape.param(rand_matrix(2, 2, 4));
        let ones = tape.constant(Matrix::from_fn(2, 2, |_, _| 1.0));
        let loss = tape.dot(used, ones).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(used).is_some());
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.param(rand_matrix(2, 2, 5));
        assert!(matches!(tape.backward(p), Err(EptError::Contract(_))));
    }

    #[test]
    fn deconv_backward_matches_fd() {
        let seed = rand_matrix(3, 2, 10);
        // kernel gradient
        let err = check_one(rand_matrix(2, 2, 11), |t, p| {
            let z = t.constant(seed.clone());
            let out = t.transposed_conv(z, p, 2).unwrap();
            let w = t.constant(rand_matrix(6, 4, 12));
            t.dot(out, w).unwrap()
        });
        assert!(err < 1e-7, "kernel grad err {err}");
        // seed gradient, overlapping stride
        let kern = rand_matrix(3, 3, 13);
        let err = check_one(rand_matrix(2, 3, 14), |t, p| {
            let k = t.constant(kern.clone());
            let out = t.transposed_conv(p, k, 1).unwrap();
            let w = t.constant(rand_matrix(4, 5, 15));
            t.dot(out, w).unwrap()
        });
        assert!(err < 1e-7, "seed grad err {err}");
    }

    #[test]
    fn softmax_rows_backward_matches_fd() {
        let err = check_one(rand_matrix(2, 4, 20), |t, p| {
            let s = t.softmax_rows(p, 0.7).unwrap();
            let w = t.constant(rand_matrix(2, 4, 21));
            t.dot(s, w).unwrap()
        });
        assert!(err < 1e-6, "softmax grad err {err}");
    }

    #[test]
    fn crop_row_gather_stack_backward_match_fd() {
        let err = check_one(rand_matrix(4, 4, 30), |t, p| {
            let c = t.crop(p, 2, 3).unwrap();
            let w = t.constant(rand_matrix(2, 3, 31));
            t.dot(c, w).unwrap()
        });
        assert!(err < 1e-7, "crop grad err {err}");

        let err = check_one(rand_matrix(3, 4, 32), |t, p| {
            let r0 = t.row(p, 2).unwrap();
            let r1 = t.row(p, 0).unwrap();
            let stacked = t.stack_rows(&[r0, r1]).unwrap();
            let g = t.gather(stacked, vec![(0, 1), (1, 3), (0, 1)]).unwrap();
            let w = t.constant(rand_matrix(1, 3, 33));
            t.dot(g, w).unwrap()
        });
        assert!(err < 1e-7, "row/stack/gather grad err {err}");
    }

    #[test]
    fn scalar_chain_backward_matches_fd() {
        // cosine-style chain: dot(a, b) * recip(norm(a)) * recip(norm(b))
        let b = rand_matrix(1, 5, 40);
        let err = check_one(rand_matrix(1, 5, 41), |t, p| {
            let bc = t.constant(b.clone());
            let d = t.dot(p, bc).unwrap();
            let na = t.norm(p).unwrap();
            let nb = t.norm(bc).unwrap();
            let ra = t.recip(na).unwrap();
            let rb = t.recip(nb).unwrap();
            let c = t.mul_scalar(d, ra).unwrap();
            t.mul_scalar(c, rb).unwrap()
        });
        assert!(err < 1e-6, "cosine chain grad err {err}");
    }

    #[test]
    fn tanh_mean_cross_entropy_backward_match_fd() {
        let err = check_one(rand_matrix(3, 4, 50), |t, p| {
            let h = t.tanh(p);
            let m = t.mean_rows(h);
            let w = t.constant(rand_matrix(4, 3, 51));
            let logits = t.matmul(m, w).unwrap();
            t.cross_entropy(logits, 1).unwrap()
        });
        assert!(err < 1e-6, "tanh/mean/ce grad err {err}");
    }

    #[test]
    fn matmul_chain_depth_three_matches_fd() {
        let a = rand_matrix(3, 3, 60);
        let b = rand_matrix(3, 3, 61);
        let err = check_one(rand_matrix(3, 3, 62), |t, p| {
            let ac = t.constant(a.clone());
            let bc = t.constant(b.clone());
            let x = t.matmul(ac, p).unwrap();
            let y = t.matmul(x, bc).unwrap();
            let w = t.constant(rand_matrix(3, 3, 63));
            t.dot(y, w).unwrap()
        });
        assert!(err < 1e-6, "matmul chain grad err {err}");
    }
}
