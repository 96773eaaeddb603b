//! Define-by-run computation graph.
//!
//! Operations are recorded on a [`Graph`] and evaluated later against a set of
//! named leaf bindings. Nodes are stored in creation order, which is already a
//! topological order, so evaluation is a single forward sweep and backward is
//! a single reverse sweep that visits every node at most once.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::kernels::{self, Bcast};
use crate::{GradError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction direction for axis-wise operations on matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce down the rows: `R x C -> 1 x C`.
    Rows,
    /// Reduce across the columns: `R x C -> R x 1`.
    Cols,
}

/// Gradients keyed by leaf name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Source of leaf values for [`Graph::eval`].
pub trait Binder {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Binder for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Binder for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl<A: Binder, B: Binder> Binder for (&A, &B) {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}

/// A differentiable operation implemented outside the built-in set.
///
/// `backward` receives the forward inputs and output and must return one
/// entry per input; entries for inputs whose `wants` flag is false may be
/// `None`.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, GradError>;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        wants: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>, GradError>;
}

#[derive(Clone)]
enum Op {
    Leaf(String),
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, Axis),
    MeanAxis(Var, Axis),
    ProdAxis(Var, Axis),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    Sin(Var),
    Cos(Var),
    SmoothL1(Var, f64),
    ClampMin(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Reshape(Var, Vec<usize>),
    RowNorm(Var),
    Custom(Rc<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> String {
        let s = match self {
            Op::Leaf(_) => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::ProdAxis(..) => "prod_axis",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::SmoothL1(..) => "smooth_l1",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Reshape(..) => "reshape",
            Op::RowNorm(..) => "row_norm",
            Op::Custom(op, _) => return op.name().to_string(),
        };
        s.to_string()
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf(_) | Op::Const => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::ProdAxis(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::SmoothL1(a, _)
            | Op::ClampMin(a, _)
            | Op::Softmax(a)
            | Op::SliceCols(a, ..)
            | Op::SliceRows(a, ..)
            | Op::Reshape(a, _)
            | Op::RowNorm(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(v) | Op::ConcatRows(v) | Op::Custom(_, v) => v.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

/// Recorded computation. Build with the operation methods, then call
/// [`Graph::eval`] and optionally [`Graph::backward`].
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    leaves: RefCell<HashMap<String, Var>>,
    evaluated: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), leaves: RefCell::new(HashMap::new()), evaluated: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value: None, needs_grad: false });
        self.evaluated.set(false);
        Var(nodes.len() - 1)
    }

    /// Named leaf, bound at evaluation time. Repeated calls with the same name
    /// return the same node, so gradients from every use accumulate.
    pub fn input(&self, name: &str) -> Var {
        if let Some(v) = self.leaves.borrow().get(name) {
            return *v;
        }
        let v = self.push(Op::Leaf(name.to_string()));
        self.leaves.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Constant folded into the graph; never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Const, value: Some(value), needs_grad: false });
        self.evaluated.set(false);
        Var(nodes.len() - 1)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn leaf_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.leaves.borrow().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&self, a: Var, b: Var) -> Var {
        self.push(Op::Div(a, b))
    }
    pub fn scale(&self, a: Var, factor: f64) -> Var {
        self.push(Op::Scale(a, factor))
    }
    pub fn neg(&self, a: Var) -> Var {
        self.push(Op::Scale(a, -1.0))
    }
    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.push(Op::AddScalar(a, c))
    }
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&self, a: Var) -> Var {
        self.push(Op::Transpose(a))
    }
    pub fn sum(&self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }
    pub fn mean(&self, a: Var) -> Var {
        self.push(Op::Mean(a))
    }
    pub fn sum_axis(&self, a: Var, axis: Axis) -> Var {
        self.push(Op::SumAxis(a, axis))
    }
    pub fn mean_axis(&self, a: Var, axis: Axis) -> Var {
        self.push(Op::MeanAxis(a, axis))
    }
    pub fn prod_axis(&self, a: Var, axis: Axis) -> Var {
        self.push(Op::ProdAxis(a, axis))
    }
    pub fn relu(&self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }
    pub fn sigmoid(&self, a: Var) -> Var {
        self.push(Op::Sigmoid(a))
    }
    pub fn softplus(&self, a: Var) -> Var {
        self.push(Op::Softplus(a))
    }
    pub fn exp(&self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }
    pub fn log(&self, a: Var) -> Var {
        self.push(Op::Log(a))
    }
    pub fn abs(&self, a: Var) -> Var {
        self.push(Op::Abs(a))
    }
    pub fn sqrt(&self, a: Var) -> Var {
        self.push(Op::Sqrt(a))
    }
    pub fn square(&self, a: Var) -> Var {
        self.push(Op::Square(a))
    }
    pub fn sin(&self, a: Var) -> Var {
        self.push(Op::Sin(a))
    }
    pub fn cos(&self, a: Var) -> Var {
        self.push(Op::Cos(a))
    }
    /// Elementwise Huber-style smooth L1 with transition point `beta`.
    pub fn smooth_l1(&self, a: Var, beta: f64) -> Var {
        self.push(Op::SmoothL1(a, beta))
    }
    pub fn clamp_min(&self, a: Var, floor: f64) -> Var {
        self.push(Op::ClampMin(a, floor))
    }
    /// Row-wise softmax.
    pub fn softmax(&self, a: Var) -> Var {
        self.push(Op::Softmax(a))
    }
    /// Row-wise layer normalization with affine `gamma`, `beta` (each `1 x C`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        self.push(Op::ConcatCols(parts.to_vec()))
    }
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        self.push(Op::ConcatRows(parts.to_vec()))
    }
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        self.push(Op::SliceCols(a, start, end))
    }
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        self.push(Op::SliceRows(a, start, end))
    }
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        self.push(Op::Reshape(a, shape.to_vec()))
    }
    /// Euclidean norm of each row, `R x C -> R x 1`; subgradient 0 at 0.
    pub fn row_norm(&self, a: Var) -> Var {
        self.push(Op::RowNorm(a))
    }
    pub fn custom(&self, op: Rc<dyn CustomOp>, inputs: &[Var]) -> Var {
        self.push(Op::Custom(op, inputs.to_vec()))
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Runs the forward sweep and returns the value of `output`.
    pub fn eval<B: Binder + ?Sized>(&self, bindings: &B, output: Var) -> Result<Tensor, GradError> {
        self.eval_all(bindings)?;
        self.value(output)
    }

    /// Runs the forward sweep over every recorded node.
    pub fn eval_all<B: Binder + ?Sized>(&self, bindings: &B) -> Result<(), GradError> {
        let count = self.nodes.borrow().len();
        for idx in 0..count {
            let (value, needs_grad) = {
                let nodes = self.nodes.borrow();
                let node = &nodes[idx];
                match &node.op {
                    Op::Leaf(name) => {
                        let bound = bindings.lookup(name).ok_or_else(|| GradError::Unbound(name.clone()))?;
                        let mut t = Tensor::from_parts(bound.shape().to_vec(), bound.data().to_vec());
                        t.set_requires_grad(false);
                        (t, bound.requires_grad())
                    }
                    Op::Const => continue,
                    op => {
                        let v = forward(&nodes, op).map_err(|e| annotate(e, idx))?;
                        let ng = op.inputs().iter().any(|i| nodes[i.0].needs_grad);
                        (v, ng)
                    }
                }
            };
            if !value.is_finite() {
                let nodes = self.nodes.borrow();
                return Err(GradError::NonFinite { node: idx, op: nodes[idx].op.name() });
            }
            let mut nodes = self.nodes.borrow_mut();
            nodes[idx].value = Some(value);
            nodes[idx].needs_grad = needs_grad;
        }
        self.evaluated.set(true);
        Ok(())
    }

    /// Value of a node after evaluation.
    pub fn value(&self, v: Var) -> Result<Tensor, GradError> {
        let nodes = self.nodes.borrow();
        let node = nodes.get(v.0).ok_or(GradError::NotEvaluated)?;
        node.value.clone().ok_or(GradError::NotEvaluated)
    }

    /// Borrowed value of a node after evaluation.
    pub fn value_ref(&self, v: Var) -> Result<Ref<'_, Tensor>, GradError> {
        let nodes = self.nodes.borrow();
        if nodes.get(v.0).and_then(|n| n.value.as_ref()).is_none() {
            return Err(GradError::NotEvaluated);
        }
        Ok(Ref::map(nodes, |n| n[v.0].value.as_ref().expect("checked above")))
    }

    /// Reverse sweep from a scalar root. Every bound leaf whose tensor has
    /// `requires_grad` gets an entry, zero-filled when unreachable.
    pub fn backward(&self, root: Var) -> Result<Gradients, GradError> {
        if !self.evaluated.get() {
            return Err(GradError::NotEvaluated);
        }
        let nodes = self.nodes.borrow();
        let root_val = nodes.get(root.0).and_then(|n| n.value.as_ref()).ok_or(GradError::NotEvaluated)?;
        if root_val.len() != 1 {
            return Err(GradError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            let contributions = backward_node(&nodes, idx, &g).map_err(|e| annotate(e, idx))?;
            for (input, contrib) in contributions {
                if !nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => kernels::add_assign(acc, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let mut out = Gradients::new();
        for (name, var) in self.leaves.borrow().iter() {
            let node = &nodes[var.0];
            if !node.needs_grad {
                continue;
            }
            let value = node.value.as_ref().expect("evaluated leaf");
            let data = grads.get(var.0).cloned().flatten().unwrap_or_else(|| vec![0.0; value.len()]);
            out.insert(name.clone(), Tensor::from_parts(value.shape().to_vec(), data));
        }
        Ok(out)
    }
}

fn annotate(err: GradError, node: usize) -> GradError {
    match err {
        GradError::Shape { op, detail } => GradError::Shape { op, detail: format!("{detail} (node {node})") },
        other => other,
    }
}

fn shape_err(op: &str, detail: String) -> GradError {
    GradError::Shape { op: op.to_string(), detail }
}

fn val(nodes: &[Node], v: Var) -> &Tensor {
    nodes[v.0].value.as_ref().expect("inputs are evaluated before their consumers")
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn forward(nodes: &[Node], op: &Op) -> Result<Tensor, GradError> {
    let name = op.name();
    Ok(match op {
        Op::Leaf(_) | Op::Const => unreachable!("leaves are bound, constants are stored"),
        Op::Add(a, b) => binary(&name, val(nodes, *a), val(nodes, *b), |x, y| x + y)?,
        Op::Sub(a, b) => binary(&name, val(nodes, *a), val(nodes, *b), |x, y| x - y)?,
        Op::Mul(a, b) => binary(&name, val(nodes, *a), val(nodes, *b), |x, y| x * y)?,
        Op::Div(a, b) => binary(&name, val(nodes, *a), val(nodes, *b), |x, y| x / y)?,
        Op::Scale(a, c) => unary(val(nodes, *a), |x| x * c),
        Op::AddScalar(a, c) => unary(val(nodes, *a), |x| x + c),
        Op::MatMul(a, b) => {
            let (x, y) = (val(nodes, *a), val(nodes, *b));
            let ((m, k), (k2, n)) = (x.dims2(), y.dims2());
            if k != k2 || x.shape().len() > 2 || y.shape().len() > 2 {
                return Err(shape_err(&name, format!("{:?} x {:?}", x.shape(), y.shape())));
            }
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, x.data(), false, y.data(), false, &mut out, 0.0);
            Tensor::from_parts(vec![m, n], out)
        }
        Op::Transpose(a) => {
            let x = val(nodes, *a);
            let (r, c) = x.dims2();
            Tensor::from_parts(vec![c, r], kernels::transpose(x.data(), r, c))
        }
        Op::Sum(a) => Tensor::scalar(kernels::sum(val(nodes, *a).data())),
        Op::Mean(a) => {
            let x = val(nodes, *a);
            if x.is_empty() {
                return Err(shape_err(&name, "mean of empty tensor".into()));
            }
            Tensor::scalar(kernels::sum(x.data()) / x.len() as f64)
        }
        Op::SumAxis(a, axis) => reduce_axis(val(nodes, *a), *axis, false),
        Op::MeanAxis(a, axis) => reduce_axis(val(nodes, *a), *axis, true),
        Op::ProdAxis(a, axis) => {
            let x = val(nodes, *a);
            let (r, c) = x.dims2();
            match axis {
                Axis::Rows => {
                    let mut out = vec![1.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j] *= x.data()[i * c + j];
                        }
                    }
                    Tensor::from_parts(vec![1, c], out)
                }
                Axis::Cols => {
                    let out = (0..r).map(|i| x.data()[i * c..(i + 1) * c].iter().product()).collect();
                    Tensor::from_parts(vec![r, 1], out)
                }
            }
        }
        Op::Relu(a) => unary(val(nodes, *a), |x| if x > 0.0 { x } else { 0.0 }),
        Op::Sigmoid(a) => unary(val(nodes, *a), kernels::sigmoid),
        Op::Softplus(a) => unary(val(nodes, *a), kernels::softplus),
        Op::Exp(a) => unary(val(nodes, *a), f64::exp),
        Op::Log(a) => unary(val(nodes, *a), f64::ln),
        Op::Abs(a) => unary(val(nodes, *a), f64::abs),
        Op::Sqrt(a) => unary(val(nodes, *a), f64::sqrt),
        Op::Square(a) => unary(val(nodes, *a), |x| x * x),
        Op::Sin(a) => unary(val(nodes, *a), f64::sin),
        Op::Cos(a) => unary(val(nodes, *a), f64::cos),
        Op::SmoothL1(a, beta) => {
            let beta = *beta;
            unary(val(nodes, *a), move |x| {
                let ax = x.abs();
                if ax < beta {
                    0.5 * x * x / beta
                } else {
                    ax - 0.5 * beta
                }
            })
        }
        Op::ClampMin(a, floor) => unary(val(nodes, *a), |x| x.max(*floor)),
        Op::Softmax(a) => {
            let x = val(nodes, *a);
            let (r, c) = x.dims2();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c.max(1)).take(r) {
                kernels::softmax_in_place(row);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (xv, gv, bv) = (val(nodes, *x), val(nodes, *gamma), val(nodes, *beta));
            let (r, c) = xv.dims2();
            if gv.len() != c || bv.len() != c {
                return Err(shape_err(&name, format!("input {:?} with gamma {:?} beta {:?}", xv.shape(), gv.shape(), bv.shape())));
            }
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &xv.data()[i * c..(i + 1) * c];
                let (mu, inv) = kernels::row_moments(row, *eps);
                for j in 0..c {
                    out[i * c + j] = (row[j] - mu) * inv * gv.data()[j] + bv.data()[j];
                }
            }
            Tensor::from_parts(xv.shape().to_vec(), out)
        }
        Op::ConcatCols(parts) => {
            let vals: Vec<&Tensor> = parts.iter().map(|p| val(nodes, *p)).collect();
            let rows = vals.first().map(|t| t.rows()).unwrap_or(0);
            if vals.iter().any(|t| t.rows() != rows) {
                let shapes: Vec<_> = vals.iter().map(|t| t.shape().to_vec()).collect();
                return Err(shape_err(&name, format!("row counts differ: {shapes:?}")));
            }
            let total: usize = vals.iter().map(|t| t.cols()).sum();
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for t in &vals {
                    out.extend_from_slice(t.row_slice(i));
                }
            }
            Tensor::from_parts(vec![rows, total], out)
        }
        Op::ConcatRows(parts) => {
            let vals: Vec<&Tensor> = parts.iter().map(|p| val(nodes, *p)).collect();
            let cols = vals.first().map(|t| t.cols()).unwrap_or(0);
            if vals.iter().any(|t| t.cols() != cols) {
                let shapes: Vec<_> = vals.iter().map(|t| t.shape().to_vec()).collect();
                return Err(shape_err(&name, format!("column counts differ: {shapes:?}")));
            }
            let rows: usize = vals.iter().map(|t| t.rows()).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for t in &vals {
                out.extend_from_slice(t.data());
            }
            Tensor::from_parts(vec![rows, cols], out)
        }
        Op::SliceCols(a, s, e) => {
            let x = val(nodes, *a);
            let (r, c) = x.dims2();
            if s > e || *e > c {
                return Err(shape_err(&name, format!("columns {s}..{e} of {:?}", x.shape())));
            }
            let w = e - s;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&x.data()[i * c + s..i * c + e]);
            }
            Tensor::from_parts(vec![r, w], out)
        }
        Op::SliceRows(a, s, e) => {
            let x = val(nodes, *a);
            let (r, c) = x.dims2();
            if s > e || *e > r {
                return Err(shape_err(&name, format!("rows {s}..{e} of {:?}", x.shape())));
            }
            Tensor::from_parts(vec![e - s, c], x.data()[s * c..e * c].to_vec())
        }
        Op::Reshape(a, shape) => {
            let x = val(nodes, *a);
            if shape.iter().product::<usize>() != x.len() {
                return Err(shape_err(&name, format!("{:?} into {:?}", x.shape(), shape)));
            }
            Tensor::from_parts(shape.clone(), x.data().to_vec())
        }
        Op::RowNorm(a) => {
            let x = val(nodes, *a);
            let (r, c) = x.dims2();
            let out = (0..r).map(|i| x.data()[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            Tensor::from_parts(vec![r, 1], out)
        }
        Op::Custom(custom, inputs) => {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| val(nodes, *v)).collect();
            custom.forward(&vals)?
        }
    })
}

fn binary(op: &str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, GradError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let bc =
        Bcast::new(a.shape(), b.shape()).ok_or_else(|| shape_err(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))?;
    let mut out = Vec::with_capacity(bc.rows * bc.cols);
    // bias-style row broadcast is the hot case
    if a.dims2() == (bc.rows, bc.cols) && b.dims2() == (1, bc.cols) && bc.cols > 0 {
        for row in a.data().chunks(bc.cols) {
            out.extend(row.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor::from_parts(vec![bc.rows, bc.cols], out));
    }
    for i in 0..bc.rows {
        for j in 0..bc.cols {
            out.push(f(a.data()[bc.index_a(i, j)], b.data()[bc.index_b(i, j)]));
        }
    }
    Ok(Tensor::from_parts(vec![bc.rows, bc.cols], out))
}

fn reduce_axis(x: &Tensor, axis: Axis, mean: bool) -> Tensor {
    let (r, c) = x.dims2();
    match axis {
        Axis::Rows => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += x.data()[i * c + j];
                }
            }
            if mean && r > 0 {
                out.iter_mut().for_each(|v| *v /= r as f64);
            }
            Tensor::from_parts(vec![1, c], out)
        }
        Axis::Cols => {
            let out = (0..r)
                .map(|i| {
                    let s = kernels::sum(&x.data()[i * c..(i + 1) * c]);
                    if mean && c > 0 {
                        s / c as f64
                    } else {
                        s
                    }
                })
                .collect();
            Tensor::from_parts(vec![r, 1], out)
        }
    }
}

/// Gradient of each input of node `idx` given the gradient of its output.
fn backward_node(nodes: &[Node], idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>, GradError> {
    let node = &nodes[idx];
    let out = node.value.as_ref().expect("evaluated");
    let wants = |v: &Var| nodes[v.0].needs_grad;
    let mut res = Vec::new();
    match &node.op {
        Op::Leaf(_) | Op::Const => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let (x, y) = (val(nodes, *a), val(nodes, *b));
            if wants(a) {
                res.push((*a, kernels::reduce_to(g, out.shape(), x.shape())));
            }
            if wants(b) {
                let mut gb = kernels::reduce_to(g, out.shape(), y.shape());
                if sign < 0.0 {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                res.push((*b, gb));
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(node.op, Op::Div(..));
            let (x, y) = (val(nodes, *a), val(nodes, *b));
            let full = |f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
                if x.shape() == y.shape() {
                    g.iter().zip(x.data()).zip(y.data()).map(|((&gv, &xv), &yv)| f(gv, xv, yv)).collect()
                } else {
                    let bc = Bcast::new(x.shape(), y.shape()).expect("validated in forward");
                    let mut v = Vec::with_capacity(g.len());
                    for i in 0..bc.rows {
                        for j in 0..bc.cols {
                            v.push(f(g[i * bc.cols + j], x.data()[bc.index_a(i, j)], y.data()[bc.index_b(i, j)]));
                        }
                    }
                    v
                }
            };
            if wants(a) {
                let ga = if is_div { full(&|gv, _, yv| gv / yv) } else { full(&|gv, _, yv| gv * yv) };
                res.push((*a, kernels::reduce_to(&ga, out.shape(), x.shape())));
            }
            if wants(b) {
                let gb = if is_div { full(&|gv, xv, yv| -gv * xv / (yv * yv)) } else { full(&|gv, xv, _| gv * xv) };
                res.push((*b, kernels::reduce_to(&gb, out.shape(), y.shape())));
            }
        }
        Op::Scale(a, c) => res.push((*a, g.iter().map(|v| v * c).collect())),
        Op::AddScalar(a, _) | Op::Reshape(a, _) => res.push((*a, g.to_vec())),
        Op::MatMul(a, b) => {
            let (x, y) = (val(nodes, *a), val(nodes, *b));
            let ((m, k), (_, n)) = (x.dims2(), y.dims2());
            if wants(a) {
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, false, y.data(), true, &mut ga, 0.0);
                res.push((*a, ga));
            }
            if wants(b) {
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, x.data(), true, g, false, &mut gb, 0.0);
                res.push((*b, gb));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = out.dims2();
            res.push((*a, kernels::transpose(g, r, c)));
        }
        Op::Sum(a) => {
            let n = val(nodes, *a).len();
            res.push((*a, vec![g[0]; n]));
        }
        Op::Mean(a) => {
            let n = val(nodes, *a).len();
            res.push((*a, vec![g[0] / n as f64; n]));
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let x = val(nodes, *a);
            let (r, c) = x.dims2();
            let mean = matches!(node.op, Op::MeanAxis(..));
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = match axis {
                        Axis::Rows => g[j] / if mean { r as f64 } else { 1.0 },
                        Axis::Cols => g[i] / if mean { c as f64 } else { 1.0 },
                    };
                }
            }
            res.push((*a, ga));
        }
        Op::ProdAxis(a, axis) => {
            let x = val(nodes, *a);
            let (r, c) = x.dims2();
            let mut ga = vec![0.0; r * c];
            // exclusive products via prefix/suffix sweeps handle zero entries exactly
            let (lines, len, stride_line, stride_elem) = match axis {
                Axis::Rows => (c, r, 1, c),
                Axis::Cols => (r, c, c, 1),
            };
            let mut prefix = vec![1.0; len];
            for line in 0..lines {
                let at = |e: usize| line * stride_line + e * stride_elem;
                let mut acc = 1.0;
                for e in 0..len {
                    prefix[e] = acc;
                    acc *= x.data()[at(e)];
                }
                let mut suffix = 1.0;
                for e in (0..len).rev() {
                    ga[at(e)] = g[line] * prefix[e] * suffix;
                    suffix *= x.data()[at(e)];
                }
            }
            res.push((*a, ga));
        }
        Op::Relu(a) => {
            let x = val(nodes, *a);
            res.push((*a, g.iter().zip(x.data()).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect()));
        }
        Op::Sigmoid(a) => {
            res.push((*a, g.iter().zip(out.data()).map(|(&gv, &y)| gv * y * (1.0 - y)).collect()));
        }
        Op::Softplus(a) => {
            let x = val(nodes, *a);
            res.push((*a, g.iter().zip(x.data()).map(|(&gv, &xv)| gv * kernels::sigmoid(xv)).collect()));
        }
        Op::Exp(a) => res.push((*a, g.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect())),
        Op::Log(a) => {
            let x = val(nodes, *a);
            res.push((*a, g.iter().zip(x.data()).map(|(&gv, &xv)| gv / xv).collect()));
        }
        Op::Abs(a) => {
            let x = val(nodes, *a);
            res.push((*a, g.iter().zip(x.data()).map(|(&gv, &xv)| gv * kernels::sign(xv)).collect()));
        }
        Op::Sqrt(a) => {
            res.push((*a, g.iter().zip(out.data()).map(|(&gv, &y)| if y > 0.0 { 0.5 * gv / y } else { 0.0 }).collect()));
        }
        Op::Square(a) => {
            let x = val(nodes, *a);
            res.push((*a, g.iter().zip(x.data()).map(|(&gv, &xv)| 2.0 * gv * xv).collect()));
        }
        Op::Sin(a) => {
            let x = val(nodes, *a);
            res.push((*a, g.iter().zip(x.data()).map(|(&gv, &xv)| gv * xv.cos()).collect()));
        }
        Op::Cos(a) => {
            let x = val(nodes, *a);
            res.push((*a, g.iter().zip(x.data()).map(|(&gv, &xv)| -gv * xv.sin()).collect()));
        }
        Op::SmoothL1(a, beta) => {
            let x = val(nodes, *a);
            res.push((
                *a,
                g.iter().zip(x.data()).map(|(&gv, &xv)| if xv.abs() < *beta { gv * xv / beta } else { gv * kernels::sign(xv) }).collect(),
            ));
        }
        Op::ClampMin(a, floor) => {
            let x = val(nodes, *a);
            res.push((*a, g.iter().zip(x.data()).map(|(&gv, &xv)| if xv > *floor { gv } else { 0.0 }).collect()));
        }
        Op::Softmax(a) => {
            let (r, c) = out.dims2();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                let y = &out.data()[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    ga[i * c + j] = y[j] * (gr[j] - dot);
                }
            }
            res.push((*a, ga));
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (xv, gv) = (val(nodes, *x), val(nodes, *gamma));
            let (r, c) = xv.dims2();
            let mut gx = vec![0.0; r * c];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            let mut xhat = vec![0.0; c];
            let mut gxhat = vec![0.0; c];
            for i in 0..r {
                let row = &xv.data()[i * c..(i + 1) * c];
                let (mu, inv) = kernels::row_moments(row, *eps);
                for j in 0..c {
                    xhat[j] = (row[j] - mu) * inv;
                    let go = g[i * c + j];
                    ggamma[j] += go * xhat[j];
                    gbeta[j] += go;
                    gxhat[j] = go * gv.data()[j];
                }
                let mean_g = gxhat.iter().sum::<f64>() / c as f64;
                let mean_gx = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    gx[i * c + j] = inv * (gxhat[j] - mean_g - xhat[j] * mean_gx);
                }
            }
            if wants(x) {
                res.push((*x, gx));
            }
            if wants(gamma) {
                res.push((*gamma, ggamma));
            }
            if wants(beta) {
                res.push((*beta, gbeta));
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = out.dims2();
            let mut offset = 0;
            for p in parts {
                let w = val(nodes, *p).cols();
                if wants(p) {
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    res.push((*p, gp));
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(nodes, *p).len();
                if wants(p) {
                    res.push((*p, g[offset..offset + n].to_vec()));
                }
                offset += n;
            }
        }
        Op::SliceCols(a, s, e) => {
            let x = val(nodes, *a);
            let (r, c) = x.dims2();
            let w = e - s;
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                ga[i * c + s..i * c + e].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            res.push((*a, ga));
        }
        Op::SliceRows(a, s, e) => {
            let x = val(nodes, *a);
            let c = x.cols();
            let mut ga = vec![0.0; x.len()];
            ga[s * c..e * c].copy_from_slice(g);
            res.push((*a, ga));
        }
        Op::RowNorm(a) => {
            let x = val(nodes, *a);
            let (r, c) = x.dims2();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                let n = out.data()[i];
                if n > 0.0 {
                    for j in 0..c {
                        ga[i * c + j] = g[i] * x.data()[i * c + j] / n;
                    }
                }
            }
            res.push((*a, ga));
        }
        Op::Custom(custom, inputs) => {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| val(nodes, *v)).collect();
            let flags: Vec<bool> = inputs.iter().map(wants).collect();
            let grads = custom.backward(&vals, out, g, &flags)?;
            for ((input, grad), (flag, v)) in inputs.iter().zip(grads).zip(flags.iter().zip(&vals)) {
                if !flag {
                    continue;
                }
                let grad = grad.ok_or_else(|| GradError::Custom(format!("{} returned no gradient for a required input", custom.name())))?;
                if grad.len() != v.len() {
                    return Err(shape_err(custom.name(), format!("gradient of length {} for input of shape {:?}", grad.len(), v.shape())));
                }
                res.push((*input, grad));
            }
        }
    }
    Ok(res)
}
