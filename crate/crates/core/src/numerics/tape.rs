//! Tape-based reverse-mode differentiation.
//!
//! Every backward rule is itself written with tape ops, so a gradient can be
//! recorded (`create_graph = true`) and differentiated again. The divergence
//! penalty needs exactly that: the norm of an input gradient, differentiated
//! with respect to critic weights.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use super::tensor::{numel_of, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    BroadcastTo(usize),
    SumTo(usize),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Pad {
        src: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        srcs: Vec<usize>,
        axis: usize,
    },
    Gather {
        src: usize,
        idx: Rc<[usize]>,
    },
    ScatterAdd {
        src: usize,
        idx: Rc<[usize]>,
    },
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Pow(usize, f64),
    Abs(usize),
    LeakyRelu(usize, f64),
    Huber(usize, f64),
    Clamp(usize, f64),
    MulConst(usize, Rc<Tensor>),
    StraightThrough(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
///
/// Single-threaded by construction; build one tape per thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    no_grad: Cell<bool>,
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Primitive and composite operations reachable through [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Mean,
    Sum,
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
    LayerNorm,
    Exp,
    Log,
    Abs,
    Pow(f64),
    L1Norm,
    L2Norm,
}

/// Gradients of a scalar with respect to every tracked leaf, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    /// Gradient for `var`, or zeros if the loss never touched it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.by_id
            .get(&var.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            no_grad: Cell::new(false),
        }
    }

    /// A tape whose leaves never track gradients (pure inference).
    pub fn inference() -> Self {
        let t = Self::new();
        t.no_grad.set(true);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A gradient-tracked input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let requires_grad = !self.no_grad.get();
        self.insert(value, Op::Leaf, requires_grad)
    }

    /// An untracked input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn insert(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let requires_grad = !self.no_grad.get() && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.insert(value, op, requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of the scalar `output` with respect to `wrt`.
    ///
    /// With `create_graph` the backward pass is itself recorded so the returned
    /// gradients can be differentiated again. Inputs that `output` does not
    /// depend on receive zeros.
    pub fn grad<'t>(
        &'t self,
        output: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>> {
        let grads = self.run_backward(output, create_graph)?;
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect())
    }

    /// Gradients of `loss` for every tracked leaf on the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let grads = self.run_backward(loss, false)?;
        let nodes = self.nodes.borrow();
        let mut by_id = BTreeMap::new();
        for (id, g) in grads.iter().enumerate() {
            if let (Some(g), Op::Leaf, true) = (g, &nodes[id].op, nodes[id].requires_grad) {
                by_id.insert(id, (*nodes[g.id].value).clone());
            }
        }
        Ok(Gradients { by_id })
    }

    fn run_backward<'t>(
        &'t self,
        output: Var<'t>,
        create_graph: bool,
    ) -> Result<Vec<Option<Var<'t>>>> {
        if output.value().numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                output.shape()
            )));
        }
        let mut grads: Vec<Option<Var<'t>>> = vec![None; output.id + 1];
        if !self.requires(output.id) {
            return Ok(grads);
        }
        let saved = self.no_grad.replace(!create_graph);
        let result = self.backward_inner(output, &mut grads);
        self.no_grad.set(saved);
        result.map(|_| grads)
    }

    fn backward_inner<'t>(&'t self, output: Var<'t>, grads: &mut [Option<Var<'t>>]) -> Result<()> {
        grads[output.id] = Some(self.constant(Tensor::ones(output.value().shape())));
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id] else { continue };
            let (op, requires) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].requires_grad)
            };
            if !requires {
                continue;
            }
            let out = self.var(id);
            let mut acc = |target: usize, contrib: Var<'t>| -> Result<()> {
                if !self.requires(target) {
                    return Ok(());
                }
                grads[target] = Some(match grads[target] {
                    Some(prev) => prev.add(contrib)?,
                    None => contrib,
                });
                Ok(())
            };
            let v = |i: usize| self.var(i);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(a, g.sum_to(&v(a).shape())?)?;
                    acc(b, g.sum_to(&v(b).shape())?)?;
                }
                Op::Sub(a, b) => {
                    acc(a, g.sum_to(&v(a).shape())?)?;
                    acc(b, g.neg().sum_to(&v(b).shape())?)?;
                }
                Op::Mul(a, b) => {
                    if self.requires(a) {
                        acc(a, g.mul(v(b))?.sum_to(&v(a).shape())?)?;
                    }
                    if self.requires(b) {
                        acc(b, g.mul(v(a))?.sum_to(&v(b).shape())?)?;
                    }
                }
                Op::Div(a, b) => {
                    if self.requires(a) {
                        acc(a, g.div(v(b))?.sum_to(&v(a).shape())?)?;
                    }
                    if self.requires(b) {
                        acc(b, g.mul(out)?.div(v(b))?.neg().sum_to(&v(b).shape())?)?;
                    }
                }
                Op::Neg(a) => acc(a, g.neg())?,
                Op::Scale(a, c) => acc(a, g.scale(c))?,
                Op::Shift(a) => acc(a, g)?,
                Op::MatMul(a, b) => {
                    if self.requires(a) {
                        acc(a, g.matmul(v(b).t()?)?)?;
                    }
                    if self.requires(b) {
                        acc(b, v(a).t()?.matmul(g)?)?;
                    }
                }
                Op::Transpose(a) => acc(a, g.t()?)?,
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    acc(a, g.permute(&inv)?)?;
                }
                Op::Reshape(a) => acc(a, g.reshape(&v(a).shape())?)?,
                Op::BroadcastTo(a) => acc(a, g.sum_to(&v(a).shape())?)?,
                Op::SumTo(a) => acc(a, g.broadcast_to(&v(a).shape())?)?,
                Op::Slice { src, axis, start } => {
                    let full = v(src).shape()[axis];
                    acc(src, g.pad(axis, start, full)?)?;
                }
                Op::Pad { src, axis, start } => {
                    let len = v(src).shape()[axis];
                    acc(src, g.slice(axis, start, len)?)?;
                }
                Op::Concat { srcs, axis } => {
                    let mut offset = 0;
                    for s in srcs {
                        let len = v(s).shape()[axis];
                        if self.requires(s) {
                            acc(s, g.slice(axis, offset, len)?)?;
                        }
                        offset += len;
                    }
                }
                Op::Gather { src, idx } => {
                    let rows = v(src).shape()[0];
                    acc(src, g.scatter_add_rows(idx, rows)?)?;
                }
                Op::ScatterAdd { src, idx } => acc(src, g.gather_rows_rc(idx)?)?,
                Op::Exp(a) => acc(a, g.mul(out)?)?,
                Op::Log(a) => acc(a, g.div(v(a))?)?,
                Op::Tanh(a) => acc(a, g.mul(out.square().neg().shift(1.0))?)?,
                Op::Sigmoid(a) => acc(a, g.mul(out)?.mul(out.neg().shift(1.0))?)?,
                Op::Pow(a, p) => acc(a, g.mul(v(a).pow_unchecked(p - 1.0).scale(p))?)?,
                Op::Abs(a) => {
                    let sign = v(a).value().map(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(a, g.mul_const(Rc::new(sign))?)?;
                }
                Op::LeakyRelu(a, slope) => {
                    let mask = v(a).value().map(|x| if x > 0.0 { 1.0 } else { slope });
                    acc(a, g.mul_const(Rc::new(mask))?)?;
                }
                Op::Huber(a, t) => acc(a, g.mul(v(a).clamp_sym(t))?)?,
                Op::Clamp(a, t) => {
                    let mask = v(a).value().map(|x| if x.abs() < t { 1.0 } else { 0.0 });
                    acc(a, g.mul_const(Rc::new(mask))?)?;
                }
                Op::MulConst(a, c) => acc(a, g.mul_const(c)?)?,
                Op::StraightThrough(e) => acc(e, g)?,
            }
        }
        Ok(())
    }

    /// Applies an operation by kind. Binary kinds take two operands,
    /// `Concat` any number, everything else one.
    pub fn apply<'t>(&'t self, kind: OpKind, operands: &[Var<'t>]) -> Result<Var<'t>> {
        let arity = |n: usize| -> Result<()> {
            if operands.len() == n {
                Ok(())
            } else {
                Err(Error::shape(
                    "apply",
                    format!("{kind:?} takes {n} operand(s), got {}", operands.len()),
                ))
            }
        };
        match kind {
            OpKind::Concat { axis } => Var::concat(operands, axis),
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul => {
                arity(2)?;
                let (a, b) = (operands[0], operands[1]);
                match kind {
                    OpKind::MatMul => a.matmul(b),
                    OpKind::Add => a.add(b),
                    OpKind::Sub => a.sub(b),
                    _ => a.mul(b),
                }
            }
            _ => {
                arity(1)?;
                let a = operands[0];
                Ok(match kind {
                    OpKind::Slice { axis, start, len } => a.slice(axis, start, len)?,
                    OpKind::Mean => a.mean(),
                    OpKind::Sum => a.sum(),
                    OpKind::Tanh => a.tanh(),
                    OpKind::Sigmoid => a.sigmoid(),
                    OpKind::Relu => a.relu(),
                    OpKind::Softmax => a.softmax()?,
                    OpKind::LayerNorm => a.layernorm(1e-5)?,
                    OpKind::Exp => a.exp(),
                    OpKind::Log => a.log()?,
                    OpKind::Abs => a.abs(),
                    OpKind::Pow(p) => a.pow(p)?,
                    OpKind::L1Norm => a.l1norm(),
                    OpKind::L2Norm => a.l2norm()?,
                    _ => unreachable!(),
                })
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let value = self.value().zip_broadcast(&other.value(), op, f)?;
        Ok(self
            .tape
            .push(value, mk(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.value().map(|x| -x);
        self.unary(v, Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    /// Adds a constant to every element.
    pub fn shift(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Shift(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    /// Product over the last two axes. A rank-2 right operand is applied to
    /// every leading index of a higher-rank left operand.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() > 2 && sb.len() == 2 {
            let k = sa[sa.len() - 1];
            let rows = numel_of(&sa[..sa.len() - 1]);
            let flat = self.reshape(&[rows, k])?.matmul(other)?;
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(sb[1]);
            return flat.reshape(&out);
        }
        let value = self.value().matmul(&other.value())?;
        Ok(self
            .tape
            .push(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Swaps the last two axes.
    pub fn t(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape(
                "transpose",
                format!("rank {r} has no matrix axes"),
            ));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        let value = self.value().permuted(&perm)?;
        Ok(self.unary(value, Op::Transpose(self.id)))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let value = self.value().permuted(perm)?;
        Ok(self.unary(value, Op::Permute(self.id, perm.to_vec())))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        if self.value().shape() == shape {
            return Ok(self);
        }
        let value = self.value().reshaped(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        if self.value().shape() == shape {
            return Ok(self);
        }
        let value = self.value().broadcast_to(shape)?;
        Ok(self.unary(value, Op::BroadcastTo(self.id)))
    }

    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'t>> {
        if self.value().shape() == shape {
            return Ok(self);
        }
        let value = self.value().sum_to(shape)?;
        Ok(self.unary(value, Op::SumTo(self.id)))
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum(self) -> Var<'t> {
        self.sum_to(&[]).expect("any shape reduces to a scalar")
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let mut shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        shape[axis] = 1;
        let s = self.sum_to(&shape)?;
        if keepdim {
            Ok(s)
        } else {
            shape.remove(axis);
            s.reshape(&shape)
        }
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let n = self.shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = self.value().slice_axis(axis, start, len)?;
        if value.shape() == self.value().shape() {
            return Ok(self);
        }
        Ok(self.unary(
            value,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn pad(self, axis: usize, start: usize, full: usize) -> Result<Var<'t>> {
        if axis >= self.shape().len() {
            return Err(Error::shape("pad", format!("axis {axis} out of range")));
        }
        let value = self.value().pad_axis(axis, start, full)?;
        Ok(self.unary(
            value,
            Op::Pad {
                src: self.id,
                axis,
                start,
            },
        ))
    }

    /// Picks index `i` on `axis` and drops that axis.
    pub fn select(self, axis: usize, i: usize) -> Result<Var<'t>> {
        let mut shape = self.shape();
        let s = self.slice(axis, i, 1)?;
        shape.remove(axis);
        s.reshape(&shape)
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(
            value,
            Op::Concat {
                srcs: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// Stacks equally shaped vars along a new axis.
    pub fn stack(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let expanded = parts
            .iter()
            .map(|p| {
                let mut s = p.shape();
                if axis > s.len() {
                    return Err(Error::shape("stack", format!("axis {axis} out of range")));
                }
                s.insert(axis, 1);
                p.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&expanded, axis)
    }

    /// Rows of `self` (axis 0) at `idx`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        self.gather_rows_rc(Rc::from(idx))
    }

    fn gather_rows_rc(self, idx: Rc<[usize]>) -> Result<Var<'t>> {
        let value = self.value().gather_rows(&idx)?;
        Ok(self.unary(value, Op::Gather { src: self.id, idx }))
    }

    fn scatter_add_rows(self, idx: Rc<[usize]>, rows: usize) -> Result<Var<'t>> {
        let value = self.value().scatter_add_rows(&idx, rows)?;
        Ok(self.unary(value, Op::ScatterAdd { src: self.id, idx }))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t>> {
        let value = self.value();
        if let Some(bad) = value.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::domain(
                "log",
                format!("argument {bad} is not positive"),
            ));
        }
        let v = value.map(f64::ln);
        Ok(self.unary(v, Op::Log(self.id)))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    /// Elementwise power. Negative bases need an integer exponent and zero
    /// bases a non-negative one.
    pub fn pow(self, p: f64) -> Result<Var<'t>> {
        let value = self.value();
        for &x in value.data() {
            if x < 0.0 && p.fract() != 0.0 {
                return Err(Error::domain(
                    "pow",
                    format!("negative base {x} with fractional exponent {p}"),
                ));
            }
            if x == 0.0 && p < 0.0 {
                return Err(Error::domain(
                    "pow",
                    format!("zero base with negative exponent {p}"),
                ));
            }
        }
        Ok(self.pow_unchecked(p))
    }

    fn pow_unchecked(self, p: f64) -> Var<'t> {
        let v = self.value().map(|x| x.powf(p));
        self.unary(v, Op::Pow(self.id, p))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&x| x < 0.0) {
            return Err(Error::domain("sqrt", "negative argument"));
        }
        Ok(self.pow_unchecked(0.5))
    }

    /// Elementwise Huber penalty of `self` with transition at `threshold`.
    pub fn huber_elem(self, threshold: f64) -> Var<'t> {
        let t = threshold;
        let v = self.value().map(|x| {
            if x.abs() <= t {
                0.5 * x * x
            } else {
                t * (x.abs() - 0.5 * t)
            }
        });
        self.unary(v, Op::Huber(self.id, t))
    }

    /// Clamps to `[-t, t]`.
    fn clamp_sym(self, t: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(-t, t));
        self.unary(v, Op::Clamp(self.id, t))
    }

    /// Multiplies by an untracked tensor of the same shape (masks, signs).
    pub fn mul_const(self, c: Rc<Tensor>) -> Result<Var<'t>> {
        if c.shape() != self.value().shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs constant {:?}", self.shape(), c.shape()),
            ));
        }
        let value = self.value().zip_broadcast(&c, "mul_const", |a, b| a * b)?;
        Ok(self.unary(value, Op::MulConst(self.id, c)))
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    /// Forward value of `quantized`; backward passes the gradient to `self`
    /// unchanged and gives `quantized` nothing.
    pub fn straight_through(self, quantized: Var<'t>) -> Result<Var<'t>> {
        if self.value().shape() != quantized.value().shape() {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", self.shape(), quantized.shape()),
            ));
        }
        let value = (*quantized.value()).clone();
        Ok(self.unary(value, Op::StraightThrough(self.id)))
    }

    /// Softmax over the last axis, shifted by the (untracked) row max.
    pub fn softmax(self) -> Result<Var<'t>> {
        let shifted = self.sub(self.tape.constant(self.value().max_last()))?;
        let e = shifted.exp();
        let last = self.shape().len().saturating_sub(1);
        e.div(e.sum_axis(last, true)?)
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        let shifted = self.sub(self.tape.constant(self.value().max_last()))?;
        let last = self.shape().len().saturating_sub(1);
        shifted.sub(shifted.exp().sum_axis(last, true)?.log()?)
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layernorm(self, eps: f64) -> Result<Var<'t>> {
        let last = self.shape().len().saturating_sub(1);
        let centered = self.sub(self.mean_axis(last, true)?)?;
        let var = centered.square().mean_axis(last, true)?;
        centered.mul(var.shift(eps).pow(-0.5)?)
    }

    pub fn l1norm(self) -> Var<'t> {
        self.abs().sum()
    }

    pub fn l2norm(self) -> Result<Var<'t>> {
        self.square().sum().sqrt()
    }
}

/// Mean elementwise Huber penalty of `a - b`.
pub fn huber<'t>(a: Var<'t>, b: Var<'t>, threshold: f64) -> Result<Var<'t>> {
    if threshold <= 0.0 {
        return Err(Error::domain(
            "huber",
            format!("threshold {threshold} must be positive"),
        ));
    }
    if a.value().shape() != b.value().shape() {
        return Err(Error::shape(
            "huber",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.sub(b)?.huber_elem(threshold).mean())
}
