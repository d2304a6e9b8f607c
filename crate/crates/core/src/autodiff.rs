//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every differentiable computation in the crate (encoder, aggregation,
//! losses) is recorded on a [`Tape`] as a sequence of matrix operations.
//! Values are computed eagerly; [`Tape::backward`] walks the tape in reverse
//! and accumulates vector-Jacobian products into per-node gradient buffers.
//!
//! Inference uses the same code path on a throwaway tape, so there is a single
//! forward implementation for both training and evaluation.

use crate::matrix::Matrix;
use crate::scalar::{sigmoid, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, ta: bool, b: usize, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { a: usize, scale: T },
    Sigmoid(usize),
    Tanh(usize),
    Sqrt(usize),
    Relu(usize),
    ConcatCols(usize, usize),
    GatherRows { a: usize, idx: Vec<Option<usize>> },
    StackRows(Vec<usize>),
    RepeatRows(usize),
    SumAll(usize),
    SumRows(usize),
    LogSoftmaxRows(usize),
    PickElements { a: usize, idx: Vec<(usize, usize)> },
    ZeroDiag(usize),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a computation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, rows: usize, cols: usize) -> Matrix<T> {
        self.grads[v.0].take().unwrap_or_else(|| Matrix::zeros(rows, cols))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: T) -> Var {
        self.constant(Matrix::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// `op(a) · op(b)`.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = self.value(a).matmul_t(ta, self.value(b), tb);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::MatMul { a: a.0, ta, b: b.0, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Matrix<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::Mul(a.0, b.0), ng)
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a.0);
        self.push(value, Op::Affine { a: a.0, scale }, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a.0);
        self.push(value, Op::Sigmoid(a.0), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        let ng = self.ng(a.0);
        self.push(value, Op::Tanh(a.0), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::sqrt);
        let ng = self.ng(a.0);
        self.push(value, Op::Sqrt(a.0), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.ng(a.0);
        self.push(value, Op::Relu(a.0), ng)
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat_cols row mismatch");
        let mut out = Matrix::zeros(va.rows(), va.cols() + vb.cols());
        for r in 0..va.rows() {
            let row = out.row_mut(r);
            row[..va.cols()].copy_from_slice(va.row(r));
            row[va.cols()..].copy_from_slice(vb.row(r));
        }
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(out, Op::ConcatCols(a.0, b.0), ng)
    }

    /// Selects rows of `a`; `None` yields a zero row.
    pub fn gather_rows_opt(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let va = self.value(a);
        let mut out = Matrix::zeros(idx.len(), va.cols());
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                out.row_mut(r).copy_from_slice(va.row(i));
            }
        }
        let ng = self.ng(a.0);
        self.push(out, Op::GatherRows { a: a.0, idx }, ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        self.gather_rows_opt(a, idx.iter().copied().map(Some).collect())
    }

    /// First `n` rows of `a`.
    pub fn head_rows(&mut self, a: Var, n: usize) -> Var {
        let idx: Vec<usize> = (0..n).collect();
        self.gather_rows(a, &idx)
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "stack_rows column mismatch");
            data.extend_from_slice(self.value(p).as_slice());
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(Matrix::from_vec(rows, cols, data), Op::StackRows(parts.iter().map(|p| p.0).collect()), ng)
    }

    /// Broadcasts a 1×c row to n×c.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), 1, "repeat_rows expects a row vector");
        let mut data = Vec::with_capacity(n * va.cols());
        for _ in 0..n {
            data.extend_from_slice(va.as_slice());
        }
        let value = Matrix::from_vec(n, va.cols(), data);
        let ng = self.ng(a.0);
        self.push(value, Op::RepeatRows(a.0), ng)
    }

    /// Sum of all elements as a 1×1 matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a.0);
        self.push(value, Op::SumAll(a.0), ng)
    }

    /// Column sums (sum over rows) as a 1×c matrix.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = vec![T::zero(); va.cols()];
        for r in 0..va.rows() {
            for (o, &x) in out.iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        let ng = self.ng(a.0);
        self.push(Matrix::row_vector(out), Op::SumRows(a.0), ng)
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..va.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(a.0);
        self.push(out, Op::LogSoftmaxRows(a.0), ng)
    }

    /// Picks individual elements into a k×1 column.
    pub fn pick(&mut self, a: Var, idx: Vec<(usize, usize)>) -> Var {
        let va = self.value(a);
        let data = idx.iter().map(|&(r, c)| va.get(r, c)).collect();
        let value = Matrix::from_vec(idx.len(), 1, data);
        let ng = self.ng(a.0);
        self.push(value, Op::PickElements { a: a.0, idx }, ng)
    }

    /// Square matrix with its diagonal zeroed.
    pub fn zero_diag(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.rows(), value.cols(), "zero_diag expects a square matrix");
        for i in 0..value.rows() {
            value.set(i, i, T::zero());
        }
        let ng = self.ng(a.0);
        self.push(value, Op::ZeroDiag(a.0), ng)
    }

    /// Sum of squares of all elements.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum(sq)
    }

    /// Gradients of the 1×1 node `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], target: usize, contrib: Matrix<T>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(g) => g.add_assign(&contrib),
            slot => *slot = Some(contrib),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Matrix<T>>], target: usize, f: impl FnOnce(&mut Matrix<T>)) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let (r, c) = self.nodes[target].value.shape();
        let slot = grads[target].get_or_insert_with(|| Matrix::zeros(r, c));
        f(slot);
    }

    fn propagate(&self, i: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, ta, b, tb } => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.ng(a) {
                    let ga = if ta { vb.matmul_t(tb, g, true) } else { g.matmul_t(false, vb, !tb) };
                    self.accumulate(grads, a, ga);
                }
                if self.ng(b) {
                    let gb = if tb { g.matmul_t(true, va, ta) } else { va.matmul_t(!ta, g, false) };
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.ng(a) {
                    self.accumulate(grads, a, hadamard(g, vb));
                }
                if self.ng(b) {
                    self.accumulate(grads, b, hadamard(g, va));
                }
            }
            &Op::Affine { a, scale } => self.accumulate(grads, a, g.map(|x| x * scale)),
            &Op::Sigmoid(a) => {
                let d = zip(g, out, |gi, y| gi * y * (T::one() - y));
                self.accumulate(grads, a, d);
            }
            &Op::Tanh(a) => {
                let d = zip(g, out, |gi, y| gi * (T::one() - y * y));
                self.accumulate(grads, a, d);
            }
            &Op::Sqrt(a) => {
                let half = T::lit(0.5);
                let d = zip(g, out, |gi, y| gi * half / y);
                self.accumulate(grads, a, d);
            }
            &Op::Relu(a) => {
                let d = zip(g, &self.nodes[a].value, |gi, x| if x > T::zero() { gi } else { T::zero() });
                self.accumulate(grads, a, d);
            }
            &Op::ConcatCols(a, b) => {
                let ca = self.nodes[a].value.cols();
                let cb = self.nodes[b].value.cols();
                self.accumulate_with(grads, a, |ga| {
                    for r in 0..g.rows() {
                        add_into(ga.row_mut(r), &g.row(r)[..ca]);
                    }
                });
                self.accumulate_with(grads, b, |gb| {
                    for r in 0..g.rows() {
                        add_into(gb.row_mut(r), &g.row(r)[ca..ca + cb]);
                    }
                });
            }
            Op::GatherRows { a, idx } => {
                self.accumulate_with(grads, *a, |ga| {
                    for (r, src) in idx.iter().enumerate() {
                        if let Some(src) = *src {
                            add_into(ga.row_mut(src), g.row(r));
                        }
                    }
                });
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.rows();
                    self.accumulate_with(grads, p, |gp| {
                        for r in 0..n {
                            add_into(gp.row_mut(r), g.row(offset + r));
                        }
                    });
                    offset += n;
                }
            }
            &Op::RepeatRows(a) => {
                self.accumulate_with(grads, a, |ga| {
                    for r in 0..g.rows() {
                        add_into(ga.row_mut(0), g.row(r));
                    }
                });
            }
            &Op::SumAll(a) => {
                let (r, c) = self.nodes[a].value.shape();
                self.accumulate(grads, a, Matrix::filled(r, c, g.item()));
            }
            &Op::SumRows(a) => {
                let n = self.nodes[a].value.rows();
                self.accumulate_with(grads, a, |ga| {
                    for r in 0..n {
                        add_into(ga.row_mut(r), g.row(0));
                    }
                });
            }
            &Op::LogSoftmaxRows(a) => {
                self.accumulate_with(grads, a, |ga| {
                    for r in 0..g.rows() {
                        let gsum: T = g.row(r).iter().copied().sum();
                        let orow = out.row(r);
                        for ((x, &gi), &y) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(orow) {
                            *x += gi - y.exp() * gsum;
                        }
                    }
                });
            }
            Op::PickElements { a, idx } => {
                self.accumulate_with(grads, *a, |ga| {
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        let v = ga.get(r, c) + g.get(k, 0);
                        ga.set(r, c, v);
                    }
                });
            }
            &Op::ZeroDiag(a) => {
                let mut d = g.clone();
                for k in 0..d.rows() {
                    d.set(k, k, T::zero());
                }
                self.accumulate(grads, a, d);
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn hadamard<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    zip(a, b, |x, y| x * y)
}
