//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation eagerly: each call computes the value
//! immediately and appends a node, so nodes are already in topological order
//! and intermediate values can be inspected while the graph is being built
//! (the trainer uses this to apply selective pair filtering before the loss
//! is finalized). [`Tape::backward`] walks the nodes once in reverse and
//! accumulates exact gradients.
//!
//! Only leaves created with [`Tape::param`] receive gradients; leaves from
//! [`Tape::constant`] and every subgraph that depends solely on constants are
//! skipped, which keeps the backward pass from allocating buffers for data
//! such as node attributes or adjacency blocks.

use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// `A * B`
    Matmul(Var, Var),
    /// `A * B^T`
    MatmulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Broadcasts a 1xC row over every row of the left operand.
    AddRow(Var, Var),
    /// `mul * X + add` elementwise; only the multiplier matters backward.
    Affine(Var, f64),
    MulElem(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    /// Column-wise max; the argmax row per column is frozen at forward time
    /// (ties already resolved to the lowest row index).
    MaxpoolCols(Var, Vec<usize>),
    L2NormSq(Var),
    Sum(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// Multiplies each row block by its own constant square matrix: with
    /// blocks `N_1..N_T` of sizes `n_1..n_T`, row block `t` of the output is
    /// `N_t * X_t`. Used for per-window normalized adjacencies over a
    /// row-stacked sequence.
    BlockDiagMatmul(Var, Vec<Matrix>),
}

struct Node {
    value: Matrix,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if one was accumulated.
    /// Present only for `param` leaves the loss actually depends on;
    /// interior-node gradients are dropped as soon as they are consumed.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Eager reverse-mode autodiff tape over [`Matrix`] values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that never receives a gradient (inputs, masks, adjacencies).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf that accumulates a gradient (trainable parameters).
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// The value computed at `v`.
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::Matmul(a, b)))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_bt(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::MatmulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::Sub(a, b)))
    }

    /// Adds a 1xC row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let r = self.value(row);
        if r.rows() != 1 || r.cols() != self.value(a).cols() {
            return Err(Error::numeric(format!(
                "add_row: expected a 1x{} row, got {}x{}",
                self.value(a).cols(),
                r.rows(),
                r.cols()
            )));
        }
        let a_val = self.value(a);
        let mut value = a_val.clone();
        for i in 0..value.rows() {
            for j in 0..value.cols() {
                let v = value.get(i, j) + r.get(0, j);
                value.set(i, j, v);
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(value, ng, Op::AddRow(a, row)))
    }

    /// Elementwise `mul * a + add`.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let mut value = self.value(a).clone();
        for v in value.as_mut_slice() {
            *v = mul * *v + add;
        }
        let ng = self.needs(a);
        self.push(value, ng, Op::Affine(a, mul))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul_elem(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::MulElem(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        let ng = self.needs(a);
        self.push(value, ng, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).sigmoid();
        let ng = self.needs(a);
        self.push(value, ng, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let ng = self.needs(a);
        self.push(value, ng, Op::SoftmaxRows(a))
    }

    pub fn maxpool_cols(&mut self, a: Var) -> Result<Var> {
        let (value, argmax) = self.value(a).maxpool_cols_with_argmax()?;
        let ng = self.needs(a);
        Ok(self.push(value, ng, Op::MaxpoolCols(a, argmax)))
    }

    /// Squared Frobenius norm as a 1x1 node.
    pub fn l2_norm_sq(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).l2_norm_sq());
        let ng = self.needs(a);
        self.push(value, ng, Op::L2NormSq(a))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, ng, Op::Sum(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::ConcatCols(a, b)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_rows(&values)?;
        let ng = parts.iter().any(|v| self.needs(*v));
        Ok(self.push(value, ng, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        let ng = self.needs(a);
        Ok(self.push(value, ng, Op::SliceRows(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(indices)?;
        let ng = self.needs(a);
        Ok(self.push(value, ng, Op::GatherRows(a, indices.to_vec())))
    }

    /// Multiplies row block `t` of `a` by the constant square matrix
    /// `blocks[t]`; block sizes must tile the rows of `a` exactly.
    pub fn block_diag_matmul(&mut self, blocks: Vec<Matrix>, a: Var) -> Result<Var> {
        let a_val = self.value(a);
        let total: usize = blocks.iter().map(Matrix::rows).sum();
        if total != a_val.rows() {
            return Err(Error::numeric(format!(
                "block_diag_matmul: blocks cover {} rows, input has {}",
                total,
                a_val.rows()
            )));
        }
        let mut parts = Vec::with_capacity(blocks.len());
        let mut offset = 0;
        for block in &blocks {
            if block.rows() != block.cols() {
                return Err(Error::numeric(format!(
                    "block_diag_matmul: block is {}x{}, expected square",
                    block.rows(),
                    block.cols()
                )));
            }
            let rows = a_val.slice_rows(offset, block.rows())?;
            parts.push(block.matmul(&rows)?);
            offset += block.rows();
        }
        let refs: Vec<&Matrix> = parts.iter().collect();
        let value = if refs.is_empty() {
            Matrix::zeros(0, a_val.cols())
        } else {
            Matrix::concat_rows(&refs)?
        };
        let ng = self.needs(a);
        Ok(self.push(value, ng, Op::BlockDiagMatmul(a, blocks)))
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    /// Accumulates gradients of the scalar at `loss` with respect to every
    /// `param` leaf it depends on. Interior gradients are freed as soon as
    /// they have been propagated, so peak memory stays close to the live
    /// frontier of the graph.
    ///
    /// # Errors
    /// Fails if `loss` is not 1x1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).rows() != 1 || self.value(loss).cols() != 1 {
            return Err(Error::numeric(format!(
                "backward: loss must be 1x1, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Matmul(a, b) => {
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g.matmul_bt(self.value(*b))?)?;
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, self.value(*a).matmul_at(&g)?)?;
                    }
                }
                Op::MatmulBt(a, b) => {
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g.matmul(self.value(*b))?)?;
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, g.matmul_at(self.value(*a))?)?;
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone())?;
                    self.acc(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, g.clone())?;
                    self.acc(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let mut sums = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for c in 0..g.cols() {
                                sums.set(0, c, sums.get(0, c) + g.get(r, c));
                            }
                        }
                        self.acc(&mut grads, *row, sums)?;
                    }
                    self.acc(&mut grads, *a, g)?;
                }
                Op::Affine(a, mul) => {
                    self.acc(&mut grads, *a, g.scale(*mul))?;
                }
                Op::MulElem(a, b) => {
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g.mul_elem(self.value(*b))?)?;
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, g.mul_elem(self.value(*a))?)?;
                    }
                }
                Op::Relu(a) => {
                    // relu'(0) = 0: only strictly positive outputs pass.
                    let mut d = g;
                    for (dv, y) in d.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        if *y <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    self.acc(&mut grads, *a, d)?;
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    for (dv, y) in d.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *dv *= y * (1.0 - y);
                    }
                    self.acc(&mut grads, *a, d)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = g;
                    let cols = y.cols();
                    for r in 0..y.rows() {
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += d.get(r, c) * y.get(r, c);
                        }
                        for c in 0..cols {
                            let v = y.get(r, c) * (d.get(r, c) - dot);
                            d.set(r, c, v);
                        }
                    }
                    self.acc(&mut grads, *a, d)?;
                }
                Op::MaxpoolCols(a, argmax) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for (c, &r) in argmax.iter().enumerate() {
                        d.set(r, c, g.get(0, c));
                    }
                    self.acc(&mut grads, *a, d)?;
                }
                Op::L2NormSq(a) => {
                    let d = self.value(*a).scale(2.0 * g.get(0, 0));
                    self.acc(&mut grads, *a, d)?;
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    let d = Matrix::from_vec(
                        src.rows(),
                        src.cols(),
                        vec![g.get(0, 0); src.rows() * src.cols()],
                    )?;
                    self.acc(&mut grads, *a, d)?;
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    if self.needs(*a) {
                        let mut d = Matrix::zeros(g.rows(), ca);
                        for r in 0..g.rows() {
                            for c in 0..ca {
                                d.set(r, c, g.get(r, c));
                            }
                        }
                        self.acc(&mut grads, *a, d)?;
                    }
                    if self.needs(*b) {
                        let mut d = Matrix::zeros(g.rows(), cb);
                        for r in 0..g.rows() {
                            for c in 0..cb {
                                d.set(r, c, g.get(r, ca + c));
                            }
                        }
                        self.acc(&mut grads, *b, d)?;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for part in parts {
                        let rows = self.value(*part).rows();
                        if self.needs(*part) {
                            self.acc(&mut grads, *part, g.slice_rows(offset, rows)?)?;
                        }
                        offset += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            d.set(start + r, c, g.get(r, c));
                        }
                    }
                    self.acc(&mut grads, *a, d)?;
                }
                Op::GatherRows(a, indices) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..g.cols() {
                            d.set(i, c, d.get(i, c) + g.get(r, c));
                        }
                    }
                    self.acc(&mut grads, *a, d)?;
                }
                Op::BlockDiagMatmul(a, blocks) => {
                    let mut parts = Vec::with_capacity(blocks.len());
                    let mut offset = 0;
                    for block in blocks {
                        let g_rows = g.slice_rows(offset, block.rows())?;
                        parts.push(block.matmul_at(&g_rows)?);
                        offset += block.rows();
                    }
                    let refs: Vec<&Matrix> = parts.iter().collect();
                    let d = if refs.is_empty() {
                        Matrix::zeros(0, g.cols())
                    } else {
                        Matrix::concat_rows(&refs)?
                    };
                    self.acc(&mut grads, *a, d)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Evaluates a scalar loss built by `build` over `params` and returns its
/// value together with one gradient matrix per parameter (zeros for
/// parameters the loss does not touch).
///
/// # Errors
/// Propagates any shape error from `build`, and fails if the built node is
/// not a 1x1 scalar.
pub fn grad<F>(params: &[Matrix], build: F) -> Result<(f64, Vec<Matrix>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let out = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .take(*v)
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
        })
        .collect();
    Ok((value, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let x = Matrix::scalar(0.0);
        let (_, grads) = grad(&[x], |t, vars| {
            let r = t.relu(vars[0]);
            Ok(t.sum(r))
        })
        .unwrap();
        assert_eq!(grads[0].get(0, 0), 0.0);
    }

    #[test]
    fn sigmoid_derivative_at_zero_is_quarter() {
        let x = Matrix::scalar(0.0);
        let (_, grads) = grad(&[x], |t, vars| {
            let s = t.sigmoid(vars[0]);
            Ok(t.sum(s))
        })
        .unwrap();
        assert!((grads[0].get(0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn squared_norm_gradient_is_twice_the_input() {
        let x = Matrix::row_vector(&[3.0, -4.0]);
        let (value, grads) = grad(&[x], |t, vars| Ok(t.l2_norm_sq(vars[0]))).unwrap();
        assert_eq!(value, 25.0);
        assert_eq!(grads[0], Matrix::row_vector(&[6.0, -8.0]));
    }

    #[test]
    fn matmul_gradients_match_hand_computation() {
        // loss = sum(A * B); dL/dA = ones * B^T, dL/dB = A^T * ones.
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let (_, grads) = grad(&[a.clone(), b.clone()], |t, vars| {
            let c = t.matmul(vars[0], vars[1])?;
            Ok(t.sum(c))
        })
        .unwrap();
        let ones = Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(grads[0], ones.matmul_bt(&b).unwrap());
        assert_eq!(grads[1], a.matmul_at(&ones).unwrap());
    }

    #[test]
    fn maxpool_routes_gradient_to_first_of_tied_rows() {
        let x = Matrix::from_rows(&[vec![2.0], vec![2.0]]).unwrap();
        let (_, grads) = grad(&[x], |t, vars| {
            let p = t.maxpool_cols(vars[0])?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert_eq!(grads[0], Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap());
    }

    #[test]
    fn gather_rows_accumulates_over_repeated_indices() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let (_, grads) = grad(&[x], |t, vars| {
            let g = t.gather_rows(vars[0], &[0, 0, 1])?;
            Ok(t.sum(g))
        })
        .unwrap();
        assert_eq!(grads[0], Matrix::from_rows(&[vec![2.0], vec![1.0]]).unwrap());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = Matrix::scalar(2.0);
        let mut tape = Tape::new();
        let p = tape.param(x.clone());
        let c = tape.constant(Matrix::scalar(3.0));
        let prod = tape.mul_elem(p, c).unwrap();
        let loss = tape.sum(prod);
        let mut grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.take(p).unwrap().get(0, 0), 3.0);
    }

    #[test]
    fn block_diag_matmul_applies_each_block_to_its_rows() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let blocks = vec![
            Matrix::from_rows(&[vec![2.0]]).unwrap(),
            Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
        ];
        let mut tape = Tape::new();
        let v = tape.param(x);
        let y = tape.block_diag_matmul(blocks, v).unwrap();
        assert_eq!(
            tape.value(y),
            &Matrix::from_rows(&[vec![2.0], vec![3.0], vec![2.0]]).unwrap()
        );
        let loss = tape.sum(y);
        let mut grads = tape.backward(loss).unwrap();
        // Gradient of sum(N x) wrt x is N^T 1: [2, 1, 1] here.
        assert_eq!(
            grads.take(v).unwrap(),
            Matrix::from_rows(&[vec![2.0], vec![1.0], vec![1.0]]).unwrap()
        );
    }
}
