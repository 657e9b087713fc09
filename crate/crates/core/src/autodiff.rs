//! Reverse-mode differentiation over the [`Backend`] operation set.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates adjoints.
//! Everything runs in f64.

use std::cell::RefCell;

use crate::numerics::{
    broadcast_binary, concat_cols, concat_rows, kernels, sum_cols, sum_rows,
    Backend, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Cos(usize),
    Abs(usize),
    Powf(usize, f64),
    Sigmoid(usize),
    Softplus(usize),
    Gelu(usize),
    SumRows(usize),
    SumCols(usize),
    SumAll(usize),
    SoftmaxRows(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    DwConv(usize, usize),
    GuardedRecip(usize, f64),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | DwConv(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Cos(a) | Abs(a) | Powf(a, _)
            | Sigmoid(a) | Softplus(a) | Gelu(a) | SumRows(a) | SumCols(a) | SumAll(a)
            | SoftmaxRows(a) | SliceCols(a, _) | GuardedRecip(a, _) => vec![*a],
            ConcatCols(p) | ConcatRows(p) => p.clone(),
        }
    }
}

struct Node {
    value: Tensor<f64>,
    op: Op,
    /// Whether any leaf reaches this node; constants and their pure
    /// functions get no adjoint.
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints indexed by [`Var`]; `None` for nodes the output does not depend on.
pub struct Gradients {
    grads: Vec<Option<Tensor<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`, zeros when the output does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => op.inputs().iter().any(|&i| nodes[i].needs_grad),
        };
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: &Var) -> Tensor<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn with_val<R>(&self, v: &Var, f: impl FnOnce(&Tensor<f64>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Leaf variable (parameter or input).
    pub fn leaf(&self, t: Tensor<f64>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Value that receives no gradient.
    pub fn constant_value(&self, t: Tensor<f64>) -> Var {
        self.push(t, Op::Constant)
    }

    /// Binds each tensor as a leaf when `trainable(key)` holds and as a
    /// constant otherwise. `keys` must list the tree's leaves in the order
    /// its `map` visits them.
    pub fn binder<'a>(
        &'a self,
        keys: &'a [String],
        trainable: &'a dyn Fn(&str) -> bool,
    ) -> impl FnMut(&Tensor<f64>) -> Var + 'a {
        let mut i = 0;
        move |t: &Tensor<f64>| {
            let k = &keys[i];
            i += 1;
            if trainable(k) {
                self.leaf(t.clone())
            } else {
                self.constant_value(t.clone())
            }
        }
    }

    fn unary(&self, a: &Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.with_val(a, |t| t.map(f));
        self.push(v, op)
    }

    fn binary(&self, a: &Var, b: &Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            broadcast_binary(&nodes[a.0].value, &nodes[b.0].value, f)
        };
        self.push(v, op)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = self.with_val(&root, |t| {
            assert_eq!(t.len(), 1, "backward() needs a scalar root; use backward_with");
            Tensor::scalar(1.0)
        });
        self.backward_with(root, seed)
    }

    /// Reverse sweep seeded with an explicit upstream adjoint for `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor<f64>) -> Gradients {
        let nodes = self.nodes.borrow();
        let shapes: Vec<(usize, usize)> = nodes.iter().map(|n| n.value.dims()).collect();
        assert_eq!(shapes[root.0], seed.dims(), "seed shape");
        let mut grads: Vec<Option<Tensor<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |j: usize| &nodes[j].value;
            let mut acc = |j: usize, d: Tensor<f64>| {
                if !nodes[j].needs_grad {
                    return;
                }
                let slot = &mut grads[j];
                match slot {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(d.data()) {
                            *e += v;
                        }
                    }
                    None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(*a, kernels::matmul(&g, &kernels::transpose(val(*b))).unwrap());
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, kernels::matmul(&kernels::transpose(val(*a)), &g).unwrap());
                    }
                }
                Op::Transpose(a) => acc(*a, kernels::transpose(&g)),
                Op::Add(a, b) => {
                    acc(*a, reduce_to(&g, shapes[*a]));
                    acc(*b, reduce_to(&g, shapes[*b]));
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to(&g, shapes[*a]));
                    acc(*b, reduce_to(&g.scale(-1.0), shapes[*b]));
                }
                Op::Mul(a, b) => {
                    let ga = broadcast_binary(&g, val(*b), |x, y| x * y);
                    let gb = broadcast_binary(&g, val(*a), |x, y| x * y);
                    acc(*a, reduce_to(&ga, shapes[*a]));
                    acc(*b, reduce_to(&gb, shapes[*b]));
                }
                Op::Div(a, b) => {
                    // out = a / b
                    let ga = broadcast_binary(&g, val(*b), |x, y| x / y);
                    let gout = broadcast_binary(&g, &node.value, |x, y| x * y);
                    let gb = broadcast_binary(&gout, val(*b), |x, y| -x / y);
                    acc(*a, reduce_to(&ga, shapes[*a]));
                    acc(*b, reduce_to(&gb, shapes[*b]));
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::AddScalar(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, zip(&g, &node.value, |gv, y| gv * y)),
                Op::Cos(a) => acc(*a, zip(&g, val(*a), |gv, x| -gv * x.sin())),
                Op::Abs(a) => acc(*a, zip(&g, val(*a), |gv, x| gv * sign(x))),
                Op::Powf(a, p) => {
                    let p = *p;
                    acc(*a, zip(&g, val(*a), |gv, x| gv * p * x.powf(p - 1.0)))
                }
                Op::Sigmoid(a) => acc(*a, zip(&g, &node.value, |gv, y| gv * y * (1.0 - y))),
                Op::Softplus(a) => acc(*a, zip(&g, val(*a), |gv, x| gv * kernels::sigmoid(x))),
                Op::Gelu(a) => acc(*a, zip(&g, val(*a), |gv, x| gv * kernels::gelu_derivative(x))),
                Op::SumRows(a) => {
                    let (r, c) = shapes[*a];
                    acc(*a, Tensor::from_fn(r, c, |_, j| g.at(0, j)))
                }
                Op::SumCols(a) => {
                    let (r, c) = shapes[*a];
                    acc(*a, Tensor::from_fn(r, c, |i, _| g.at(i, 0)))
                }
                Op::SumAll(a) => {
                    let (r, c) = shapes[*a];
                    acc(*a, Tensor::filled(r, c, g.at(0, 0)))
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (&yv, &gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(*a, ga)
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = shapes[*a];
                    let w = g.cols();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                    }
                    acc(*a, ga)
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = shapes[p].1;
                        acc(p, g.slice_cols(offset, offset + w));
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = shapes[p].0;
                        acc(p, g.slice_rows(offset, offset + h));
                        offset += h;
                    }
                }
                Op::DwConv(x, k) => {
                    let (gx, gk) = dwconv_backward(val(*x), val(*k), &g);
                    acc(*x, gx);
                    acc(*k, gk);
                }
                Op::GuardedRecip(a, eps) => {
                    let eps = *eps;
                    acc(
                        *a,
                        zip(&g, val(*a), |gv, x| if x >= eps { -gv / (x * x) } else { 0.0 }),
                    )
                }
            }
        }
        Gradients { grads, shapes }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::matrix(a.rows(), a.cols(), data)
}

/// Sum a broadcast gradient back down to the operand's shape.
fn reduce_to(g: &Tensor<f64>, shape: (usize, usize)) -> Tensor<f64> {
    let mut out = g.clone();
    if shape.0 == 1 && out.rows() != 1 {
        out = sum_rows(&out);
    }
    if shape.1 == 1 && out.cols() != 1 {
        out = sum_cols(&out);
    }
    out
}

fn dwconv_backward(
    x: &Tensor<f64>,
    kernel: &Tensor<f64>,
    g: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>) {
    let (n, d) = x.dims();
    let k = kernel.rows();
    let mut gx = Tensor::zeros(n, d);
    let mut gk = Tensor::zeros(k, d);
    for t in 0..n {
        for j in 0..k {
            let back = k - 1 - j;
            if back > t {
                continue;
            }
            let src = t - back;
            for c in 0..d {
                let gv = g.at(t, c);
                gk.set(j, c, gk.at(j, c) + gv * x.at(src, c));
                gx.set(src, c, gx.at(src, c) + gv * kernel.at(j, c));
            }
        }
    }
    (gx, gk)
}

impl Backend for Tape {
    type M = Var;

    fn constant(&self, t: Tensor<f64>) -> Var {
        self.constant_value(t)
    }

    fn value(&self, m: &Var) -> Tensor<f64> {
        self.val(m)
    }

    fn dims(&self, m: &Var) -> (usize, usize) {
        self.with_val(m, |t| t.dims())
    }

    fn matmul(&self, a: &Var, b: &Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            kernels::matmul(&nodes[a.0].value, &nodes[b.0].value).expect("matmul shape")
        };
        self.push(v, Op::MatMul(a.0, b.0))
    }

    fn transpose(&self, a: &Var) -> Var {
        let v = self.with_val(a, kernels::transpose);
        self.push(v, Op::Transpose(a.0))
    }

    fn add(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    fn sub(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    fn mul(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn div(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn scale(&self, a: &Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a.0, s))
    }

    fn add_scalar(&self, a: &Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a.0))
    }

    fn exp(&self, a: &Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    fn cos(&self, a: &Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a.0))
    }

    fn abs(&self, a: &Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a.0))
    }

    fn powf(&self, a: &Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a.0, p))
    }

    fn sigmoid(&self, a: &Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a.0))
    }

    fn softplus(&self, a: &Var) -> Var {
        self.unary(a, kernels::softplus, Op::Softplus(a.0))
    }

    fn gelu(&self, a: &Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a.0))
    }

    fn sum_rows(&self, a: &Var) -> Var {
        let v = self.with_val(a, sum_rows);
        self.push(v, Op::SumRows(a.0))
    }

    fn sum_cols(&self, a: &Var) -> Var {
        let v = self.with_val(a, sum_cols);
        self.push(v, Op::SumCols(a.0))
    }

    fn sum_all(&self, a: &Var) -> Var {
        let v = self.with_val(a, |t| Tensor::scalar(t.sum()));
        self.push(v, Op::SumAll(a.0))
    }

    fn softmax_rows(&self, a: &Var) -> Var {
        let v = self.with_val(a, kernels::softmax_rows);
        self.push(v, Op::SoftmaxRows(a.0))
    }

    fn slice_cols(&self, a: &Var, start: usize, end: usize) -> Var {
        let v = self.with_val(a, |t| t.slice_cols(start, end));
        self.push(v, Op::SliceCols(a.0, start))
    }

    fn concat_cols(&self, parts: &[Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            concat_cols(&parts.iter().map(|p| &nodes[p.0].value).collect::<Vec<_>>())
        };
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    fn concat_rows(&self, parts: &[Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            concat_rows(&parts.iter().map(|p| &nodes[p.0].value).collect::<Vec<_>>())
        };
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    fn causal_dwconv(&self, x: &Var, kernel: &Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            kernels::causal_dwconv(&nodes[x.0].value, &nodes[kernel.0].value).expect("dwconv shape")
        };
        self.push(v, Op::DwConv(x.0, kernel.0))
    }

    fn guarded_recip(&self, a: &Var, eps: f64) -> Var {
        self.unary(
            a,
            |x| if x >= eps { 1.0 / x } else { 0.0 },
            Op::GuardedRecip(a.0, eps),
        )
    }
}
