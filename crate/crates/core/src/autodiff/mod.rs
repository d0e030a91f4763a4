//! Reverse-mode differentiation over a computation record whose values are
//! small dense matrices.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns a [`Gradients`] table holding `∂output/∂leaf` for each trainable
//! leaf. Constants never receive gradients and are skipped during the sweep.
//!
//! Operations are coarse (a whole layer over a batch of points is one node),
//! which keeps the record short enough to rebuild every training step.

pub(crate) mod kernels;

use std::cell::RefCell;
use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AutodiffError {
    #[error("variable belongs to a different tape")]
    ForeignVariable,
    #[error("variable index {0} is not on this tape")]
    UnknownVariable(usize),
    #[error("variable {0} is a constant and has no gradient")]
    NotDifferentiable(usize),
    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
}

// Large buffers are recycled per thread. Training rebuilds the record every
// step, and returning these blocks to the system allocator each time makes it
// trim and re-fault the heap.
const POOL_MIN: usize = 512;
const POOL_CAP: usize = 64;

thread_local! {
    static POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// Empty vector with room for `n` values.
fn buffer(n: usize) -> Vec<f64> {
    if n >= POOL_MIN {
        let reused = POOL.with(|p| {
            let mut p = p.borrow_mut();
            let i = p.iter().position(|v| v.capacity() >= n)?;
            Some(p.swap_remove(i))
        });
        if let Some(mut v) = reused {
            v.clear();
            return v;
        }
    }
    Vec::with_capacity(n)
}

fn zeroed(n: usize) -> Vec<f64> {
    let mut v = buffer(n);
    v.resize(n, 0.0);
    v
}

fn recycle(v: Vec<f64>) {
    if v.capacity() >= POOL_MIN {
        let _ = POOL.try_with(|p| {
            let mut p = p.borrow_mut();
            if p.len() < POOL_CAP {
                p.push(v);
            }
        });
    }
}

/// Row-major dense matrix.
#[derive(Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        let mut data = buffer(self.data.len());
        data.extend_from_slice(&self.data);
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        recycle(std::mem::take(&mut self.data));
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, zeroed(rows * cols))
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(n, 1, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(mut self) -> Vec<f64> {
        std::mem::take(&mut self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar tensor");
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let mut data = buffer(self.data.len());
        data.extend(self.data.iter().map(|&x| f(x)));
        Tensor::new(self.rows, self.cols, data)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        let mut data = buffer(self.data.len());
        data.extend(self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)));
        Tensor::new(self.rows, self.cols, data)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    /// `a` plus a `1×m` row broadcast over every row of `a`.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    /// Forward-mode tangent through tanh: `(1 − h²)·dz` where `h = tanh(z)`.
    TanhTangent(Var, Var),
    /// `1×1` value repeated into a `rows×cols` block.
    Broadcast(Var),
    Sum(Var),
    Mean(Var),
    /// Selects flat elements into a column.
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        &self.nodes[v.index as usize]
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.grad_any(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.grad_any(&[a, b]);
        self.push(value, op, rg)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        assert_eq!(av.cols, bv.rows, "matmul inner dimension mismatch");
        let (n, k, m) = (av.rows, av.cols, bv.cols);
        let mut out = zeroed(n * m);
        kernels::matmul(&av.data, &bv.data, &mut out, n, k, m);
        self.binary(a, b, Tensor::new(n, m, out), Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (&self.node(a).value, &self.node(row).value);
        assert_eq!((1, av.cols), rv.shape(), "row broadcast shape mismatch");
        let mut out = buffer(av.len());
        out.extend_from_slice(&av.data);
        for chunk in out.chunks_exact_mut(av.cols) {
            for (o, &r) in chunk.iter_mut().zip(&rv.data) {
                *o += r;
            }
        }
        let value = Tensor::new(av.rows, av.cols, out);
        self.binary(a, row, value, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.node(a).value.zip(&self.node(b).value, |x, y| x + y);
        self.binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.node(a).value.zip(&self.node(b).value, |x, y| x - y);
        self.binary(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.node(a).value.zip(&self.node(b).value, |x, y| x * y);
        self.binary(a, b, value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.node(a).value.zip(&self.node(b).value, |x, y| x / y);
        self.binary(a, b, value, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.node(a).value.map(|x| -x);
        self.unary(a, value, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.node(a).value.map(|x| c * x);
        self.unary(a, value, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.node(a).value.map(|x| x + c);
        self.unary(a, value, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = &self.node(a).value;
        let mut out = zeroed(av.len());
        kernels::tanh(&av.data, &mut out);
        let value = Tensor::new(av.rows, av.cols, out);
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.node(a).value.map(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.node(a).value.map(|x| x * x);
        self.unary(a, value, Op::Square(a))
    }

    /// `(1 − h²)·dz`, the tangent of `h = tanh(z)` along `dz`.
    pub fn tanh_tangent(&mut self, h: Var, dz: Var) -> Var {
        let value = self.node(h).value.zip(&self.node(dz).value, |h, d| (1.0 - h * h) * d);
        self.binary(h, dz, value, Op::TanhTangent(h, dz))
    }

    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = &self.node(a).value;
        assert_eq!(av.shape(), (1, 1), "broadcast source must be 1x1");
        let value = Tensor::new(rows, cols, vec![av.data[0]; rows * cols]);
        self.unary(a, value, Op::Broadcast(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.node(a).value.data.iter().sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = &self.node(a).value;
        let value = Tensor::scalar(av.data.iter().sum::<f64>() / av.len() as f64);
        self.unary(a, value, Op::Mean(a))
    }

    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Var {
        let av = &self.node(a).value;
        let data = indices.iter().map(|&i| av.data[i]).collect();
        let value = Tensor::column(data);
        self.unary(a, value, Op::Gather(a, indices.to_vec()))
    }

    fn check(&self, v: Var) -> Result<(), AutodiffError> {
        if v.tape != self.id {
            return Err(AutodiffError::ForeignVariable);
        }
        if v.index as usize >= self.nodes.len() {
            return Err(AutodiffError::UnknownVariable(v.index as usize));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        self.check(output)?;
        let out = &self.nodes[output.index()];
        if out.value.shape() != (1, 1) {
            let (rows, cols) = out.value.shape();
            return Err(AutodiffError::NonScalarOutput { rows, cols });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.index() + 1];
        grads[output.index()] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.index()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let mut table = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let entry = match node.op {
                Op::Leaf => Some(
                    grads
                        .get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| Tensor::zeros(node.value.rows, node.value.cols)),
                ),
                _ => None,
            };
            table.push(entry);
        }
        Ok(Gradients {
            tape: self.id,
            grads: table,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.index()].value;
        let wants = |v: Var| self.nodes[v.index()].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows, av.cols, bv.cols);
                if wants(*a) {
                    let bt = kernels::transpose(&bv.data, k, m);
                    let ga = slot(grads, *a, av.shape());
                    kernels::grad_lhs(&g.data, &bt, &mut ga.data, n, k, m);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bv.shape());
                    kernels::grad_rhs(&av.data, &g.data, &mut gb.data, n, k, m);
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    accumulate(grads, *a, g, |x| x);
                }
                if wants(*row) {
                    let gr = slot(grads, *row, (1, g.cols));
                    for chunk in g.data.chunks_exact(g.cols) {
                        for (o, &x) in gr.data.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g, |x| x);
                }
                if wants(*b) {
                    accumulate(grads, *b, g, |x| x);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g, |x| x);
                }
                if wants(*b) {
                    accumulate(grads, *b, g, |x| -x);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate_zip(grads, *a, g, val(*b), |g, y| g * y);
                }
                if wants(*b) {
                    accumulate_zip(grads, *b, g, val(*a), |g, x| g * x);
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if wants(*a) {
                    accumulate_zip(grads, *a, g, bv, |g, y| g / y);
                }
                if wants(*b) {
                    // d(x/y)/dy = −(x/y)/y
                    let q = node.value.zip(bv, |q, y| -q / y);
                    accumulate_zip(grads, *b, g, &q, |g, d| g * d);
                }
            }
            Op::Neg(a) => accumulate(grads, *a, g, |x| -x),
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g, move |x| c * x)
            }
            Op::Offset(a) => accumulate(grads, *a, g, |x| x),
            Op::Tanh(a) => accumulate_zip(grads, *a, g, &node.value, |g, h| g * (1.0 - h * h)),
            Op::Exp(a) => accumulate_zip(grads, *a, g, &node.value, |g, e| g * e),
            Op::Square(a) => accumulate_zip(grads, *a, g, val(*a), |g, x| 2.0 * g * x),
            Op::TanhTangent(h, dz) => {
                let (hv, dv) = (val(*h), val(*dz));
                if wants(*h) {
                    let d = hv.zip(dv, |h, d| -2.0 * h * d);
                    accumulate_zip(grads, *h, g, &d, |g, d| g * d);
                }
                if wants(*dz) {
                    accumulate_zip(grads, *dz, g, hv, |g, h| g * (1.0 - h * h));
                }
            }
            Op::Broadcast(a) => {
                let s: f64 = g.data.iter().sum();
                slot(grads, *a, (1, 1)).data[0] += s;
            }
            Op::Sum(a) => {
                let s = g.data[0];
                let shape = val(*a).shape();
                slot(grads, *a, shape).data.iter_mut().for_each(|x| *x += s);
            }
            Op::Mean(a) => {
                let av = val(*a);
                let s = g.data[0] / av.len() as f64;
                slot(grads, *a, av.shape()).data.iter_mut().for_each(|x| *x += s);
            }
            Op::Gather(a, indices) => {
                let shape = val(*a).shape();
                let ga = slot(grads, *a, shape);
                for (&i, &x) in indices.iter().zip(&g.data) {
                    ga.data[i] += x;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.index()].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor, f: impl Fn(f64) -> f64) {
    match &mut grads[v.index()] {
        Some(t) => t.data.iter_mut().zip(&g.data).for_each(|(o, &x)| *o += f(x)),
        empty => *empty = Some(g.map(f)),
    }
}

fn accumulate_zip(
    grads: &mut [Option<Tensor>],
    v: Var,
    g: &Tensor,
    other: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) {
    match &mut grads[v.index()] {
        Some(t) => t
            .data
            .iter_mut()
            .zip(g.data.iter().zip(&other.data))
            .for_each(|(o, (&x, &y))| *o += f(x, y)),
        empty => *empty = Some(g.zip(other, f)),
    }
}

/// Gradients of one scalar output with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf. Constants, foreign variables and indices past the
    /// end of the record are usage errors.
    pub fn wrt(&self, v: Var) -> Result<&Tensor, AutodiffError> {
        if v.tape != self.tape {
            return Err(AutodiffError::ForeignVariable);
        }
        match self.grads.get(v.index()) {
            None => Err(AutodiffError::UnknownVariable(v.index())),
            Some(None) => Err(AutodiffError::NotDifferentiable(v.index())),
            Some(Some(g)) => Ok(g),
        }
    }
}
