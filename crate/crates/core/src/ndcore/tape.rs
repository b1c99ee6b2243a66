//! Reverse-mode differentiation over dense matrices.
//!
//! Operations are recorded on a [`Tape`] in evaluation order, so node
//! indices are already a topological order and the backward sweep is a
//! single reverse pass.

use std::cell::RefCell;

use super::linalg::{self, Jitter};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    SafeSqrt(usize),
    Square(usize),
    Softplus(usize),
    InvSoftplus(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Transpose(usize),
    MatMul(usize, usize),
    Slice {
        src: usize,
        r0: usize,
        c0: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Broadcast(usize),
    Diag(usize),
    Cholesky {
        src: usize,
        factor: f64,
    },
    TriSolve {
        l: usize,
        b: usize,
        transposed: bool,
    },
    RbfGram {
        x: usize,
        z: usize,
        lengthscales: usize,
        variance: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
///
/// Tapes are single-threaded; independent tapes may live on different threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}[{}x{}]", self.id, self.rows, self.cols)
    }
}

fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a[0], b[0]), dim(a[1], b[1])) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(Error::Dimension { op, lhs: a, rhs: b }),
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, shape: [usize; 2], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == shape && b.shape() == shape {
        return a.zip_map(b, f).expect("same shape");
    }
    let (ar, ac) = (a.rows() > 1, a.cols() > 1);
    let (br, bc) = (b.rows() > 1, b.cols() > 1);
    Tensor::from_fn(shape[0], shape[1], |r, c| {
        let x = a.get(if ar { r } else { 0 }, if ac { c } else { 0 });
        let y = b.get(if br { r } else { 0 }, if bc { c } else { 0 });
        f(x, y)
    })
}

/// Sums `g` down to `shape` along broadcast dimensions.
fn reduce_to(g: Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    let (kr, kc) = (shape[0] > 1, shape[1] > 1);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let (rr, cc) = (if kr { r } else { 0 }, if kc { c } else { 0 });
            let v = out.get(rr, cc) + g.get(r, c);
            out.set(rr, cc, v);
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(exp(y) − 1)`, the inverse of softplus on `y > 0`.
pub fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Scalar softplus, `log(1 + exp(x))`.
pub fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
}

fn tril(t: &Tensor) -> Tensor {
    Tensor::from_fn(t.rows(), t.cols(), |r, c| if c <= r { t.get(r, c) } else { 0.0 })
}

/// Gradient of `A ↦ chol(A + f·mean(diag A)·I)` for a symmetric input.
fn cholesky_backward(l: &Tensor, gl: &Tensor, factor: f64) -> Result<Tensor> {
    let n = l.rows();
    // phi(Lᵀ·tril(Ḡ)) with halved diagonal
    let mut phi = tril(&l.transpose().matmul(&tril(gl))?);
    for i in 0..n {
        let v = phi.get(i, i) * 0.5;
        phi.set(i, i, v);
    }
    // S = L⁻ᵀ Φ L⁻¹
    let left = linalg::solve_lower_transposed(l, &phi)?;
    let s = linalg::solve_lower_transposed(l, &left.transpose())?.transpose();
    let mut ga = Tensor::from_fn(n, n, |r, c| 0.5 * (s.get(r, c) + s.get(c, r)));
    if factor != 0.0 && n > 0 {
        let tr: f64 = ga.diag().iter().sum();
        let bump = factor * tr / n as f64;
        for i in 0..n {
            let v = ga.get(i, i) + bump;
            ga.set(i, i, v);
        }
    }
    Ok(ga)
}

fn rbf_forward(x: &Tensor, z: &Tensor, ls: &Tensor, var: f64) -> Tensor {
    let d = x.cols();
    let inv: Vec<f64> = ls.data().iter().map(|l| 1.0 / (l * l)).collect();
    Tensor::from_fn(x.rows(), z.rows(), |i, j| {
        let xi = x.row_slice(i);
        let zj = z.row_slice(j);
        let mut s = 0.0;
        for k in 0..d {
            let diff = xi[k] - zj[k];
            s += diff * diff * inv[k];
        }
        var * (-0.5 * s).exp()
    })
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node recorded after `mark`.
    ///
    /// Handles to dropped nodes must not be used afterwards. Inference loops
    /// use this to keep memory flat across integration steps.
    pub fn truncate(&self, mark: usize) {
        self.nodes.borrow_mut().truncate(mark);
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let [rows, cols] = value.shape();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id,
            rows,
            cols,
        }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    ///
    /// Nodes that do not influence `loss` receive no entry; [`Gradients::wrt`]
    /// reports zeros for them.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if loss.rows != 1 || loss.cols != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let val = |i: usize| &nodes[i].value;
            let send = |grads: &mut Vec<Option<Tensor>>, i: usize, t: Tensor| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                &Op::Add(a, b) => {
                    send(&mut grads, a, reduce_to(g.clone(), val(a).shape()));
                    send(&mut grads, b, reduce_to(g, val(b).shape()));
                }
                &Op::Sub(a, b) => {
                    send(&mut grads, a, reduce_to(g.clone(), val(a).shape()));
                    send(&mut grads, b, reduce_to(g.scale(-1.0), val(b).shape()));
                }
                &Op::Mul(a, b) => {
                    let shape = g.shape();
                    let ga = broadcast_zip(&g, val(b), shape, |g, y| g * y);
                    let gb = broadcast_zip(&g, val(a), shape, |g, x| g * x);
                    send(&mut grads, a, reduce_to(ga, val(a).shape()));
                    send(&mut grads, b, reduce_to(gb, val(b).shape()));
                }
                &Op::Div(a, b) => {
                    let shape = g.shape();
                    let ga = broadcast_zip(&g, val(b), shape, |g, y| g / y);
                    // d(x/y)/dy = -out/y
                    let q = broadcast_zip(&node.value, val(b), shape, |o, y| -o / y);
                    let gb = g.zip_map(&q, |g, q| g * q)?;
                    send(&mut grads, a, reduce_to(ga, val(a).shape()));
                    send(&mut grads, b, reduce_to(gb, val(b).shape()));
                }
                &Op::Neg(a) => send(&mut grads, a, g.scale(-1.0)),
                &Op::Scale(a, s) => send(&mut grads, a, g.scale(s)),
                &Op::AddScalar(a) => send(&mut grads, a, g),
                &Op::Exp(a) => send(&mut grads, a, g.zip_map(&node.value, |g, o| g * o)?),
                &Op::Ln(a) => send(&mut grads, a, g.zip_map(val(a), |g, x| g / x)?),
                &Op::Sqrt(a) => send(
                    &mut grads,
                    a,
                    g.zip_map(&node.value, |g, o| 0.5 * g / o)?,
                ),
                &Op::SafeSqrt(a) => send(
                    &mut grads,
                    a,
                    g.zip_map(&node.value, |g, o| if o > 0.0 { 0.5 * g / o } else { 0.0 })?,
                ),
                &Op::Square(a) => send(&mut grads, a, g.zip_map(val(a), |g, x| 2.0 * g * x)?),
                &Op::Softplus(a) => send(&mut grads, a, g.zip_map(val(a), |g, x| g * sigmoid(x))?),
                &Op::InvSoftplus(a) => send(
                    &mut grads,
                    a,
                    // d/dy log(e^y − 1) = 1 / (1 − e^{−y})
                    g.zip_map(val(a), |g, y| g / (-(-y).exp_m1()))?,
                ),
                &Op::Sum(a) => {
                    let s = g.item();
                    let [r, c] = val(a).shape();
                    send(&mut grads, a, Tensor::full(r, c, s));
                }
                &Op::SumRows(a) => {
                    let [r, c] = val(a).shape();
                    send(&mut grads, a, Tensor::from_fn(r, c, |_, j| g.get(0, j)));
                }
                &Op::SumCols(a) => {
                    let [r, c] = val(a).shape();
                    send(&mut grads, a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
                }
                &Op::Transpose(a) => send(&mut grads, a, g.transpose()),
                &Op::MatMul(a, b) => {
                    if nodes[a].requires_grad {
                        send(&mut grads, a, g.matmul(&val(b).transpose())?);
                    }
                    if nodes[b].requires_grad {
                        send(&mut grads, b, val(a).transpose().matmul(&g)?);
                    }
                }
                &Op::Slice { src, r0, c0 } => {
                    let [r, c] = val(src).shape();
                    let mut full = Tensor::zeros(r, c);
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            full.set(r0 + i, c0 + j, g.get(i, j));
                        }
                    }
                    send(&mut grads, src, full);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = val(p).rows();
                        send(&mut grads, p, g.slice(offset..offset + rows, 0..g.cols()));
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = val(p).cols();
                        send(&mut grads, p, g.slice(0..g.rows(), offset..offset + cols));
                        offset += cols;
                    }
                }
                &Op::Reshape(a) => {
                    let [r, c] = val(a).shape();
                    send(&mut grads, a, g.reshape(r, c)?);
                }
                &Op::Broadcast(a) => {
                    let shape = val(a).shape();
                    send(&mut grads, a, reduce_to(g, shape));
                }
                &Op::Diag(a) => {
                    let n = val(a).rows();
                    let mut full = Tensor::zeros(n, n);
                    for i in 0..n {
                        full.set(i, i, g.get(i, 0));
                    }
                    send(&mut grads, a, full);
                }
                &Op::Cholesky { src, factor } => {
                    send(&mut grads, src, cholesky_backward(&node.value, &g, factor)?);
                }
                &Op::TriSolve { l, b, transposed } => {
                    let lv = val(l);
                    let x = &node.value;
                    // H = L⁻ᵀG (plain) or L⁻¹G (transposed)
                    let h = if transposed {
                        linalg::solve_lower(lv, &g)?
                    } else {
                        linalg::solve_lower_transposed(lv, &g)?
                    };
                    if nodes[l].requires_grad {
                        let gl = if transposed {
                            x.matmul(&h.transpose())?
                        } else {
                            h.matmul(&x.transpose())?
                        };
                        send(&mut grads, l, tril(&gl).scale(-1.0));
                    }
                    send(&mut grads, b, h);
                }
                &Op::RbfGram {
                    x,
                    z,
                    lengthscales,
                    variance,
                } => {
                    let (xv, zv, lv) = (val(x), val(z), val(lengthscales));
                    let var = val(variance).item();
                    let k = &node.value;
                    let d = xv.cols();
                    let (n, m) = (xv.rows(), zv.rows());
                    let w = g.zip_map(k, |g, k| g * k)?;
                    let inv: Vec<f64> = lv.data().iter().map(|l| 1.0 / (l * l)).collect();
                    let mut gx = Tensor::zeros(n, d);
                    let mut gz = Tensor::zeros(m, d);
                    let mut gl = Tensor::zeros(1, d);
                    for i in 0..n {
                        for j in 0..m {
                            let wij = w.get(i, j);
                            if wij == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                let diff = xv.get(i, c) - zv.get(j, c);
                                let t = wij * diff * inv[c];
                                gx.set(i, c, gx.get(i, c) - t);
                                gz.set(j, c, gz.get(j, c) + t);
                                gl.set(0, c, gl.get(0, c) + t * diff / lv.get(0, c));
                            }
                        }
                    }
                    send(&mut grads, x, gx);
                    send(&mut grads, z, gz);
                    send(&mut grads, lengthscales, gl);
                    send(&mut grads, variance, Tensor::scalar(w.sum() / var));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.grads
            .get(v.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(v.rows, v.cols))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Value of a `1×1` node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let shape = broadcast_shape(name, self.shape(), other.shape())?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            broadcast_zip(&nodes[self.id].value, &nodes[other.id].value, shape, f)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    /// Elementwise sum with broadcasting over unit dimensions.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |t| t.scale(-1.0))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, s), |t| t.scale(s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::AddScalar(self.id), |t| t.map(|v| v + s))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Ln(self.id), |t| t.map(f64::ln))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sqrt(self.id), |t| t.map(f64::sqrt))
    }

    /// `sqrt(max(x, 0))` with zero gradient where the input is not positive.
    pub fn safe_sqrt(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::SafeSqrt(self.id), |t| t.map(|v| v.max(0.0).sqrt()))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Square(self.id), |t| t.map(|v| v * v))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Softplus(self.id), |t| t.map(softplus))
    }

    pub fn inv_softplus(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::InvSoftplus(self.id), |t| t.map(inv_softplus))
    }

    /// Sum of all entries as `1×1`.
    pub fn sum(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Sum(self.id), |t| Tensor::scalar(t.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = (self.rows * self.cols) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column sums, `r×c → 1×c`.
    pub fn sum_rows(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumRows(self.id), |t| {
            let mut out = Tensor::zeros(1, t.cols());
            for r in 0..t.rows() {
                for (o, v) in out.data_mut().iter_mut().zip(t.row_slice(r)) {
                    *o += v;
                }
            }
            out
        })
    }

    /// Row sums, `r×c → r×1`.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumCols(self.id), |t| {
            Tensor::from_fn(t.rows(), 1, |r, _| t.row_slice(r).iter().sum())
        })
    }

    pub fn t(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    pub fn slice(
        self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<Var<'t>> {
        if rows.end > self.rows || cols.end > self.cols || rows.start > rows.end || cols.start > cols.end {
            return Err(Error::Dimension {
                op: "slice",
                lhs: self.shape(),
                rhs: [rows.end, cols.end],
            });
        }
        let (r0, c0) = (rows.start, cols.start);
        Ok(self.tape.unary(
            self.id,
            Op::Slice {
                src: self.id,
                r0,
                c0,
            },
            |t| t.slice(rows.clone(), cols.clone()),
        ))
    }

    pub fn cols_range(self, cols: std::ops::Range<usize>) -> Result<Var<'t>> {
        self.slice(0..self.rows, cols)
    }

    pub fn rows_range(self, rows: std::ops::Range<usize>) -> Result<Var<'t>> {
        self.slice(rows, 0..self.cols)
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        if rows * cols != self.rows * self.cols {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(),
                rhs: [rows, cols],
            });
        }
        Ok(self
            .tape
            .unary(self.id, Op::Reshape(self.id), |t| t.reshape(rows, cols).expect("checked")))
    }

    /// Explicit broadcast over unit dimensions.
    pub fn broadcast(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let shape = broadcast_shape("broadcast", [rows, cols], self.shape())?;
        if shape != [rows, cols] {
            return Err(Error::Dimension {
                op: "broadcast",
                lhs: self.shape(),
                rhs: [rows, cols],
            });
        }
        Ok(self.tape.unary(self.id, Op::Broadcast(self.id), |t| {
            broadcast_zip(t, &Tensor::zeros(1, 1), [rows, cols], |a, _| a)
        }))
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(self) -> Result<Var<'t>> {
        if self.rows != self.cols {
            return Err(Error::Dimension {
                op: "diag",
                lhs: self.shape(),
                rhs: [self.cols, self.rows],
            });
        }
        Ok(self
            .tape
            .unary(self.id, Op::Diag(self.id), |t| Tensor::column(&t.diag())))
    }

    /// Lower Cholesky factor of the (symmetric) input under a jitter policy.
    pub fn cholesky(self, jitter: Jitter) -> Result<Var<'t>> {
        let (l, factor) = linalg::cholesky(&self.tape.nodes.borrow()[self.id].value, jitter)?;
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(
            l,
            Op::Cholesky {
                src: self.id,
                factor,
            },
            rg,
        ))
    }

    /// Solves `self·x = b` where `self` is lower-triangular.
    pub fn solve_lower(self, b: Var<'t>) -> Result<Var<'t>> {
        self.trisolve(b, false)
    }

    /// Solves `selfᵀ·x = b` where `self` is lower-triangular.
    pub fn solve_lower_t(self, b: Var<'t>) -> Result<Var<'t>> {
        self.trisolve(b, true)
    }

    fn trisolve(self, b: Var<'t>, transposed: bool) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (l, bv) = (&nodes[self.id].value, &nodes[b.id].value);
            if transposed {
                linalg::solve_lower_transposed(l, bv)?
            } else {
                linalg::solve_lower(l, bv)?
            }
        };
        let rg = self.tape.rg(&[self.id, b.id]);
        Ok(self.tape.push(
            value,
            Op::TriSolve {
                l: self.id,
                b: b.id,
                transposed,
            },
            rg,
        ))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<Tensor> = parts.iter().map(|p| nodes[p.id].value.clone()).collect();
            Tensor::concat_rows(&vals)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.rg(&ids);
        Ok(tape.push(value, Op::ConcatRows(ids), rg))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<Tensor> = parts.iter().map(|p| nodes[p.id].value.clone()).collect();
            Tensor::concat_cols(&vals)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.rg(&ids);
        Ok(tape.push(value, Op::ConcatCols(ids), rg))
    }

    /// Squared-exponential ARD cross-covariance between the rows of `x` and `z`.
    ///
    /// `lengthscales` is `1×d` (already positive), `variance` is `1×1`.
    pub fn rbf_gram(
        x: Var<'t>,
        z: Var<'t>,
        lengthscales: Var<'t>,
        variance: Var<'t>,
    ) -> Result<Var<'t>> {
        if x.cols != z.cols || lengthscales.shape() != [1, x.cols] || variance.shape() != [1, 1] {
            return Err(Error::Dimension {
                op: "rbf_gram",
                lhs: x.shape(),
                rhs: z.shape(),
            });
        }
        let tape = x.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            rbf_forward(
                &nodes[x.id].value,
                &nodes[z.id].value,
                &nodes[lengthscales.id].value,
                nodes[variance.id].value.item(),
            )
        };
        let rg = tape.rg(&[x.id, z.id, lengthscales.id, variance.id]);
        Ok(tape.push(
            value,
            Op::RbfGram {
                x: x.id,
                z: z.id,
                lengthscales: lengthscales.id,
                variance: variance.id,
            },
            rg,
        ))
    }
}
