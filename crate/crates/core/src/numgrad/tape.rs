//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation is evaluated eagerly when it is recorded, so a [`Var`]
//! always refers to a node whose value is already known. Nodes are appended
//! in evaluation order, which makes the node list a topological order and
//! lets [`Tape::backward`] run as a single reverse sweep.

use std::sync::Arc;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Norm(Var),
    RowNorms(Var),
    Hinge(Var),
    Square(Var),
    XLogX(Var),
    Transpose(Var),
    Concat(Var, Var),
    RepeatRows(Var, usize),
    PairwiseDist(Var, Var),
    Mix(Var, Var),
    RowJacobian(Var, Arc<Vec<Matrix>>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Norm(_) => "norm",
            Op::RowNorms(_) => "row_norms",
            Op::Hinge(_) => "hinge",
            Op::Square(_) => "square",
            Op::XLogX(_) => "xlogx",
            Op::Transpose(_) => "transpose",
            Op::Concat(..) => "concat",
            Op::RepeatRows(..) => "repeat_rows",
            Op::PairwiseDist(..) => "pairwise_dist",
            Op::Mix(..) => "mix",
            Op::RowJacobian(..) => "row_jacobian",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Recorded computation. Single owner; not shared across threads while
/// being built.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn broadcast_ok(lhs: &Matrix, rhs: &Matrix) -> bool {
    rhs.shape() == lhs.shape()
        || (rhs.rows() == 1 && rhs.cols() == lhs.cols())
        || rhs.shape() == (1, 1)
}

fn broadcast_zip(lhs: &Matrix, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    if rhs.shape() == lhs.shape() {
        Matrix::from_fn(lhs.rows(), lhs.cols(), |i, j| f(lhs.get(i, j), rhs.get(i, j)))
    } else if rhs.shape() == (1, 1) {
        let b = rhs.item();
        lhs.map(|a| f(a, b))
    } else {
        Matrix::from_fn(lhs.rows(), lhs.cols(), |i, j| f(lhs.get(i, j), rhs.get(0, j)))
    }
}

/// Reduces an adjoint of `lhs`'s shape onto the (possibly broadcast) rhs shape.
fn unbroadcast(grad: &Matrix, shape: (usize, usize)) -> Matrix {
    if grad.shape() == shape {
        grad.clone()
    } else if shape == (1, 1) {
        Matrix::scalar(grad.sum())
    } else {
        Matrix::row_vector(&grad.col_sums())
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::dim(op, detail)
}

fn eval(op: &Op, nodes: &[Node]) -> Result<Matrix> {
    let v = |x: &Var| &nodes[x.0].value;
    let name = op.name();
    Ok(match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => v(a).matmul(v(b))?,
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (l, r) = (v(a), v(b));
            if !broadcast_ok(l, r) {
                return Err(shape_err(
                    name,
                    format!("{:?} with {:?}", l.shape(), r.shape()),
                ));
            }
            if matches!(op, Op::Add(..)) {
                broadcast_zip(l, r, |x, y| x + y)
            } else {
                broadcast_zip(l, r, |x, y| x - y)
            }
        }
        Op::Mul(a, b) => v(a).hadamard(v(b))?,
        Op::Scale(a, c) => v(a).scale(*c),
        Op::AddScalar(a, c) => v(a).map(|x| x + c),
        Op::Tanh(a) => v(a).map(f64::tanh),
        Op::Relu(a) => v(a).map(|x| x.max(0.0)),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => v(a).map(f64::ln),
        Op::Softmax(a) => v(a).softmax_rows(),
        Op::LogSoftmax(a) => v(a).log_softmax_rows(),
        Op::Sum(a) => Matrix::scalar(v(a).sum()),
        Op::Mean(a) => {
            let m = v(a);
            if m.is_empty() {
                return Err(shape_err(name, "mean of an empty matrix".into()));
            }
            Matrix::scalar(m.sum() / m.len() as f64)
        }
        Op::Norm(a) => Matrix::scalar(v(a).frobenius_norm()),
        Op::RowNorms(a) => {
            let m = v(a);
            Matrix::from_fn(m.rows(), 1, |i, _| {
                m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()
            })
        }
        Op::Hinge(a) => v(a).map(|x| x.max(0.0)),
        Op::Square(a) => v(a).map(|x| x * x),
        Op::XLogX(a) => v(a).map(|x| if x == 0.0 { 0.0 } else { x * x.ln() }),
        Op::Transpose(a) => v(a).transpose(),
        Op::Concat(a, b) => v(a).hstack(v(b))?,
        Op::RepeatRows(a, k) => {
            let m = v(a);
            let idx: Vec<usize> = (0..m.rows()).flat_map(|i| std::iter::repeat_n(i, *k)).collect();
            m.select_rows(&idx)
        }
        Op::PairwiseDist(a, b) => {
            let (u, w) = (v(a), v(b));
            if u.cols() != w.cols() {
                return Err(shape_err(
                    name,
                    format!("feature dims {} vs {}", u.cols(), w.cols()),
                ));
            }
            Matrix::from_fn(u.rows(), w.rows(), |i, j| {
                u.row(i)
                    .iter()
                    .zip(w.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
        }
        Op::Mix(p, l) => {
            let (p, l) = (v(p), v(l));
            let (n, k) = p.shape();
            if l.rows() != n * k {
                return Err(shape_err(
                    name,
                    format!("weights {n}x{k} need {} kernel rows, got {}", n * k, l.rows()),
                ));
            }
            let m = l.cols();
            let mut out = Matrix::zeros(n, m);
            for i in 0..n {
                for z in 0..k {
                    let w = p.get(i, z);
                    let lr = l.row(i * k + z);
                    for (o, &x) in out.row_mut(i).iter_mut().zip(lr) {
                        *o += w * x;
                    }
                }
            }
            out
        }
        Op::RowJacobian(a, jacs) => {
            let m = v(a);
            if jacs.len() != m.rows() {
                return Err(shape_err(
                    name,
                    format!("{} jacobians for {} rows", jacs.len(), m.rows()),
                ));
            }
            let d = jacs.first().map_or(0, |j| j.cols());
            let mut out = Matrix::zeros(m.rows(), d);
            for (i, j) in jacs.iter().enumerate() {
                if j.rows() != m.cols() || j.cols() != d {
                    return Err(shape_err(
                        name,
                        format!("jacobian {i} is {:?}, expected {}x{d}", j.shape(), m.cols()),
                    ));
                }
                let r = Matrix::row_vector(m.row(i)).matmul(j)?;
                out.row_mut(i).copy_from_slice(r.as_slice());
            }
            out
        }
    })
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Records an input. Gradients are available for every leaf.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let node = self.nodes.len();
        let name = op.name();
        let value = eval(&op, &self.nodes).map_err(|e| match e {
            Error::Dimension { op, detail, .. } => Error::Dimension { node, op, detail },
            other => other,
        })?;
        if !value.is_finite() {
            return Err(Error::NonFinite { node, op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(node))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    /// `a + b`; `b` may also be a 1xc row or a 1x1 scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, c))
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax(a))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }
    /// Euclidean (Frobenius) norm of the whole matrix.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Norm(a))
    }
    /// Euclidean norm of every row, as an n x 1 column.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowNorms(a))
    }
    /// max(0, x).
    pub fn hinge(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Hinge(a))
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }
    /// x ln x with 0 ln 0 = 0.
    pub fn xlogx(&mut self, a: Var) -> Result<Var> {
        self.push(Op::XLogX(a))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }
    /// Column concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Concat(a, b))
    }
    /// Repeats each row `k` times consecutively (row i lands at i*k..(i+1)*k).
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        self.push(Op::RepeatRows(a, k))
    }
    /// `out[i][j] = ||a_i - b_j||_2`.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::PairwiseDist(a, b))
    }
    /// `out[i] = sum_k weights[i][k] * rows[i*K + k]`, with `weights` n x K
    /// and `rows` (n*K) x M.
    pub fn mix(&mut self, weights: Var, rows: Var) -> Result<Var> {
        self.push(Op::Mix(weights, rows))
    }
    /// `out[i] = a[i] * jacs[i]` for constant per-row matrices.
    pub fn row_jacobian(&mut self, a: Var, jacs: Arc<Vec<Matrix>>) -> Result<Var> {
        self.push(Op::RowJacobian(a, jacs))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let (rows, cols) = self.nodes[out.0].value.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalar {
                node: out.0,
                rows,
                cols,
            });
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Matrix::scalar(1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Matrix| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => *existing = existing.add(&d)?,
                slot @ None => *slot = Some(d),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul(&val(b).transpose())?)?;
                acc(*b, val(a).transpose().matmul(g)?)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, unbroadcast(g, val(b).shape()))?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, unbroadcast(g, val(b).shape()).scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.hadamard(val(b))?)?;
                acc(*b, g.hadamard(val(a))?)?;
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::AddScalar(a, _) => acc(*a, g.clone())?,
            Op::Tanh(a) => acc(*a, g.hadamard(&y.map(|t| 1.0 - t * t))?)?,
            Op::Relu(a) | Op::Hinge(a) => {
                let mask = val(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(*a, g.hadamard(&mask)?)?
            }
            Op::Exp(a) => acc(*a, g.hadamard(y)?)?,
            Op::Log(a) => acc(*a, g.hadamard(&val(a).map(|x| 1.0 / x))?)?,
            Op::Softmax(a) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                acc(*a, d)?
            }
            Op::LogSoftmax(a) => {
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    for c in 0..y.cols() {
                        d.set(r, c, g.get(r, c) - y.get(r, c).exp() * s);
                    }
                }
                acc(*a, d)?
            }
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                acc(*a, Matrix::filled(r, c, g.item()))?
            }
            Op::Mean(a) => {
                let (r, c) = val(a).shape();
                acc(*a, Matrix::filled(r, c, g.item() / (r * c) as f64))?
            }
            Op::Norm(a) => {
                let x = val(a);
                let n = y.item();
                let d = if n > 0.0 {
                    x.scale(g.item() / n)
                } else {
                    Matrix::zeros(x.rows(), x.cols())
                };
                acc(*a, d)?
            }
            Op::RowNorms(a) => {
                let x = val(a);
                let d = Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                    let n = y.get(r, 0);
                    if n > 0.0 {
                        g.get(r, 0) * x.get(r, c) / n
                    } else {
                        0.0
                    }
                });
                acc(*a, d)?
            }
            Op::Square(a) => acc(*a, g.hadamard(&val(a).scale(2.0))?)?,
            Op::XLogX(a) => {
                let d = val(a).map(|x| if x > 0.0 { x.ln() + 1.0 } else { 0.0 });
                acc(*a, g.hadamard(&d)?)?
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Concat(a, b) => {
                let ca = val(a).cols();
                let cb = val(b).cols();
                let rows = g.rows();
                acc(*a, Matrix::from_fn(rows, ca, |r, c| g.get(r, c)))?;
                acc(*b, Matrix::from_fn(rows, cb, |r, c| g.get(r, ca + c)))?;
            }
            Op::RepeatRows(a, k) => {
                let x = val(a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    let src = r / k;
                    for (o, &v) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*a, d)?
            }
            Op::PairwiseDist(a, b) => {
                let (u, w) = (val(a), val(b));
                let mut du = Matrix::zeros(u.rows(), u.cols());
                let mut dw = Matrix::zeros(w.rows(), w.cols());
                for i in 0..u.rows() {
                    for j in 0..w.rows() {
                        let dist = y.get(i, j);
                        if dist <= 0.0 {
                            continue;
                        }
                        let s = g.get(i, j) / dist;
                        if s == 0.0 {
                            continue;
                        }
                        for c in 0..u.cols() {
                            let diff = u.get(i, c) - w.get(j, c);
                            du.row_mut(i)[c] += s * diff;
                            dw.row_mut(j)[c] -= s * diff;
                        }
                    }
                }
                acc(*a, du)?;
                acc(*b, dw)?;
            }
            Op::Mix(p, l) => {
                let (pv, lv) = (val(p), val(l));
                let (n, k) = pv.shape();
                let mut dp = Matrix::zeros(n, k);
                let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                for i in 0..n {
                    for z in 0..k {
                        let lr = lv.row(i * k + z);
                        let gr = g.row(i);
                        dp.set(i, z, lr.iter().zip(gr).map(|(a, b)| a * b).sum());
                        let w = pv.get(i, z);
                        for (o, &gv) in dl.row_mut(i * k + z).iter_mut().zip(gr) {
                            *o = w * gv;
                        }
                    }
                }
                acc(*p, dp)?;
                acc(*l, dl)?;
            }
            Op::RowJacobian(a, jacs) => {
                let x = val(a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for (r, j) in jacs.iter().enumerate() {
                    let row = Matrix::row_vector(g.row(r)).matmul(&j.transpose())?;
                    d.row_mut(r).copy_from_slice(row.as_slice());
                }
                acc(*a, d)?
            }
        }
        Ok(())
    }

    /// Re-evaluates every recorded node from the leaf values.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut fresh: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                _ => eval(&node.op, &fresh)?,
            };
            fresh.push(Node {
                op: node.op.clone(),
                value,
            });
        }
        Ok(fresh.into_iter().map(|n| n.value).collect())
    }

    /// Recorded values in node order.
    pub fn values(&self) -> Vec<&Matrix> {
        self.nodes.iter().map(|n| &n.value).collect()
    }

    /// Number of parents of every node; used to check topological order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Concat(a, b)
            | Op::PairwiseDist(a, b)
            | Op::Mix(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Norm(a)
            | Op::RowNorms(a)
            | Op::Hinge(a)
            | Op::Square(a)
            | Op::XLogX(a)
            | Op::Transpose(a)
            | Op::RepeatRows(a, _)
            | Op::RowJacobian(a, _) => vec![*a],
        }
    }
}

/// A finished forward evaluation: the tape, the leaf handles of the inputs
/// in order, and the output node.
#[derive(Clone, Debug)]
pub struct Forward {
    pub tape: Tape,
    pub inputs: Vec<Var>,
    pub output: Var,
}

impl Forward {
    pub fn value(&self) -> &Matrix {
        self.tape.value(self.output)
    }

    /// Gradient of the scalar output with respect to each input.
    pub fn gradients(&self) -> Result<Vec<Matrix>> {
        let g = self.tape.backward(self.output)?;
        Ok(self.inputs.iter().map(|&v| g.get(v)).collect())
    }
}

/// Records `inputs` as leaves and runs `graph` on them.
pub fn forward<F>(inputs: &[Matrix], graph: F) -> Result<Forward>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let output = graph(&mut tape, &vars)?;
    Ok(Forward {
        tape,
        inputs: vars,
        output,
    })
}
