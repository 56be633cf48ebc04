//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records primitive operations in execution order. Node inputs
//! always refer to earlier nodes, so a single reverse sweep computes the
//! adjoints of every node that depends on a trainable leaf.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ndmath::matrix::{gemm, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a (r×c) + b (r×1)` broadcast over columns.
    AddCol(Var, Var),
    /// `a (r×c) + b (1×c)` broadcast over rows.
    AddRow(Var, Var),
    /// `a (r×c) ⊙ b (1×c)` broadcast over rows.
    MulRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    RowSums(Var),
    /// Mean cross-entropy of column-wise logits against class labels.
    CrossEntropy(Var, Arc<[usize]>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `v`, with zeros for nodes the root does not depend on.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

/// Free-function form of [`Tape::backward`].
pub fn backward(tape: &Tape, root: Var) -> Result<Gradients> {
    tape.backward(root)
}

fn shape_err(op: &str, a: &Matrix, b: &Matrix) -> Error {
    Error::shape(op, format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()))
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

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives an adjoint.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let g = self.grad_of(&[a]);
        self.push(Op::Scale(a, s), value, g)
    }

    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.cols() != 1 || bv.rows() != av.rows() {
            return Err(shape_err("add_col", av, bv));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            let bi = bv.get(i, 0);
            value.row_mut(i).iter_mut().for_each(|v| *v += bi);
        }
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::AddCol(a, b), value, g))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err("add_row", av, bv));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (v, bj) in value.row_mut(i).iter_mut().zip(bv.as_slice()) {
                *v += bj;
            }
        }
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::AddRow(a, b), value, g))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err("mul_row", av, bv));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (v, bj) in value.row_mut(i).iter_mut().zip(bv.as_slice()) {
                *v *= bj;
            }
        }
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::MulRow(a, b), value, g))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let g = self.grad_of(&[a]);
        self.push(Op::Relu(a), value, g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let g = self.grad_of(&[a]);
        self.push(Op::Tanh(a), value, g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let g = self.grad_of(&[a]);
        self.push(Op::Exp(a), value, g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let g = self.grad_of(&[a]);
        self.push(Op::Transpose(a), value, g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, end)?;
        let g = self.grad_of(&[a]);
        Ok(self.push(Op::SliceCols(a, start), value, g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hstack(&mats)?;
        let g = self.grad_of(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, g))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let g = self.grad_of(&[a]);
        self.push(Op::Sum(a), value, g)
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let sums: Vec<f64> = av.row_iter().map(|r| r.iter().sum()).collect();
        let value = Matrix::column_vector(&sums);
        let g = self.grad_of(&[a]);
        self.push(Op::RowSums(a), value, g)
    }

    /// Mean over columns of `-log softmax(logits[:, j])[labels[j]]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>) -> Result<Var> {
        let z = self.value(logits);
        if z.cols() != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} logit columns for {} labels", z.cols(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.rows()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                z.rows()
            )));
        }
        let loss = crate::netcore::cross_entropy(z, &labels)?;
        let g = self.grad_of(&[logits]);
        Ok(self.push(Op::CrossEntropy(logits, labels), Matrix::filled(1, 1, loss), g))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.shape() != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got {}x{}",
                rv.rows(),
                rv.cols()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut adj)?;
            }
            adj[idx] = Some(g);
        }
        // constants and nodes off the root's path have no adjoint
        for (i, a) in adj.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *a = None;
            }
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut adj[v.0] {
            Some(existing) => existing.axpy(1.0, &g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = gemm(g, false, self.value(*b), true)?;
                    self.accumulate(adj, *a, ga)?;
                }
                if self.needs(*b) {
                    let gb = gemm(self.value(*a), true, g, false)?;
                    self.accumulate(adj, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(adj, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(adj, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, g.scale(*s))?,
            Op::AddCol(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                if self.needs(*b) {
                    let sums: Vec<f64> = g.row_iter().map(|r| r.iter().sum()).collect();
                    self.accumulate(adj, *b, Matrix::column_vector(&sums))?;
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                if self.needs(*b) {
                    self.accumulate(adj, *b, Matrix::row_vector(&column_sums(g)))?;
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (v, bj) in ga.row_mut(i).iter_mut().zip(bv.as_slice()) {
                            *v *= bj;
                        }
                    }
                    self.accumulate(adj, *a, ga)?;
                }
                if self.needs(*b) {
                    let gb = column_sums(&g.hadamard(av)?);
                    self.accumulate(adj, *b, Matrix::row_vector(&gb))?;
                }
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (v, &x) in ga.as_mut_slice().iter_mut().zip(self.value(*a).as_slice()) {
                    if x <= 0.0 {
                        *v = 0.0;
                    }
                }
                self.accumulate(adj, *a, ga)?;
            }
            Op::Tanh(a) => {
                let mut ga = g.clone();
                for (v, &y) in ga.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *v *= 1.0 - y * y;
                }
                self.accumulate(adj, *a, ga)?;
            }
            Op::Exp(a) => self.accumulate(adj, *a, g.hadamard(out)?)?,
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose())?,
            Op::SliceCols(a, start) => {
                if self.needs(*a) {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    self.accumulate(adj, *a, ga)?;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        self.accumulate(adj, p, g.slice_cols(offset, offset + w)?)?;
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(adj, *a, Matrix::filled(r, c, g.as_slice()[0]))?;
            }
            Op::RowSums(a) => {
                let (r, c) = self.value(*a).shape();
                let ga = Matrix::from_fn(r, c, |i, _| g.get(i, 0));
                self.accumulate(adj, *a, ga)?;
            }
            Op::CrossEntropy(a, labels) => {
                let z = self.value(*a);
                let scale = g.as_slice()[0] / labels.len() as f64;
                let mut ga = softmax_columns(z);
                for (j, &l) in labels.iter().enumerate() {
                    let v = ga.get(l, j);
                    ga.set(l, j, v - 1.0);
                }
                ga.map_inplace(|v| v * scale);
                self.accumulate(adj, *a, ga)?;
            }
        }
        Ok(())
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for r in m.row_iter() {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc
}

/// Column-wise softmax of a `classes × N` logit matrix.
pub fn softmax_columns(z: &Matrix) -> Matrix {
    let (r, c) = z.shape();
    let mut out = Matrix::zeros(r, c);
    for j in 0..c {
        let max = (0..r).map(|i| z.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in 0..r {
            let e = (z.get(i, j) - max).exp();
            out.set(i, j, e);
            total += e;
        }
        for i in 0..r {
            out.set(i, j, out.get(i, j) / total);
        }
    }
    out
}
