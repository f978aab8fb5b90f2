//! Reverse-mode tape.
//!
//! A [`Graph`] records every primitive application in creation order, which
//! is already a topological order. [`Graph::grad`] walks it backwards.
//! Backward rules are themselves written with taped ops, so passing
//! `create_graph = true` records the backward pass and allows a second
//! differentiation (needed by the gradient penalty). Rules for the
//! convolutional primitives and batchnorm compute their gradients with raw
//! kernels; they are first-order only and report
//! [`Error::HigherOrderUnsupported`] when asked to build a graph.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { ta: bool, tb: bool },
    AddBias,
    ChannelBias,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    MulConst(Tensor),
    Relu,
    Sigmoid,
    Exp,
    Sqrt,
    SafeRecip,
    Square,
    Softplus,
    Sum,
    Mean,
    Expand,
    SumRows,
    SumCols,
    BroadcastRows,
    BroadcastCols,
    Reshape,
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize },
    PadSlice { axis: usize, start: usize },
    Conv1d { stride: usize, pad: usize },
    Conv1dTranspose { stride: usize, pad: usize },
    MaxPool2 { argmax: Arc<Vec<usize>> },
    Upsample2,
    BatchNormTrain { xhat: Tensor, inv_std: Arc<Vec<f64>> },
    BatchNormEval { xhat: Tensor, inv_std: Arc<Vec<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// The tape. Create one per forward/backward pass and drop it afterwards.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Output of a train-mode batchnorm: the normalized activations plus the
/// batch statistics used to update running estimates.
pub struct BatchNormOut<'g> {
    pub out: Var<'g>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Viewing a conv tensor: `[B, C, L]`, or `[C, L]` as a batch of one.
fn conv_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [b, c, l] => Some((b, c, l)),
        [c, l] => Some((1, c, l)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, parents: Vec<usize>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let (op, parents, requires_grad) = if self.recording.get() {
            let rg = parents.iter().any(|&p| nodes[p].requires_grad);
            if rg {
                (op, parents, true)
            } else {
                (Op::Leaf, Vec::new(), false)
            }
        } else {
            (Op::Leaf, Vec::new(), false)
        };
        nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: true,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: false,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Gradients of the scalar `loss` w.r.t. each of `wrt`.
    ///
    /// Leaves that do not influence `loss` get a zero gradient. With
    /// `create_graph` the returned gradients are themselves differentiable.
    pub fn grad<'g>(&'g self, loss: Var<'g>, wrt: &[Var<'g>], create_graph: bool) -> Result<Vec<Var<'g>>> {
        let loss_shape = loss.shape();
        if loss.numel() != 1 {
            return Err(Error::shape("backward", &loss_shape, &[1]));
        }
        let n = loss.id + 1;
        let mut reach = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id < n {
                    reach[w.id] = true;
                }
            }
            for i in 0..n {
                if !reach[i] && nodes[i].requires_grad {
                    reach[i] = nodes[i].parents.iter().any(|&p| reach[p]);
                }
            }
        }

        let mut grads: Vec<Option<Var<'g>>> = vec![None; n];
        let prev = self.recording.replace(create_graph);
        let result = (|| {
            if reach[loss.id] {
                grads[loss.id] = Some(self.constant(Tensor::full(&loss_shape, 1.0)));
            }
            for i in (0..n).rev() {
                let Some(g_out) = grads[i] else { continue };
                let (op, parents) = {
                    let nodes = self.nodes.borrow();
                    (nodes[i].op.clone(), nodes[i].parents.clone())
                };
                if parents.is_empty() {
                    continue;
                }
                let need: Vec<bool> = parents.iter().map(|&p| reach[p]).collect();
                if !need.iter().any(|&b| b) {
                    continue;
                }
                let pg = self.backward_rule(i, &op, &parents, &need, g_out, create_graph)?;
                for ((&p, g), &nd) in parents.iter().zip(pg).zip(need.iter()) {
                    if !nd {
                        continue;
                    }
                    if let Some(g) = g {
                        grads[p] = Some(match grads[p] {
                            None => g,
                            Some(acc) => acc.add(g)?,
                        });
                    }
                }
            }
            Ok::<_, Error>(())
        })();
        self.recording.set(prev);
        result?;

        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&w.shape())),
            })
            .collect())
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_rule<'g>(
        &'g self,
        id: usize,
        op: &Op,
        parents: &[usize],
        need: &[bool],
        g: Var<'g>,
        create_graph: bool,
    ) -> Result<Vec<Option<Var<'g>>>> {
        let p = |k: usize| self.var(parents[k]);
        let out = self.var(id);
        let first_order_only = |name| {
            if create_graph {
                Err(Error::HigherOrderUnsupported(name))
            } else {
                Ok(())
            }
        };
        Ok(match op {
            Op::Leaf => vec![],
            Op::MatMul { ta, tb } => {
                let (a, b) = (p(0), p(1));
                let da = if !need[0] {
                    None
                } else if !ta {
                    Some(g.matmul_t(b, false, !tb)?)
                } else {
                    Some(b.matmul_t(g, *tb, true)?)
                };
                let db = if !need[1] {
                    None
                } else if !tb {
                    Some(a.matmul_t(g, !ta, false)?)
                } else {
                    Some(g.matmul_t(a, true, *ta)?)
                };
                vec![da, db]
            }
            Op::AddBias => vec![Some(g), Some(g.sum_rows()?)],
            Op::ChannelBias => {
                first_order_only("channel_bias")?;
                let gv = g.value();
                let (b, c, l) = conv_dims(gv.shape()).expect("checked at forward");
                let mut db = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        db[ci] += gv.data()[(bi * c + ci) * l..(bi * c + ci + 1) * l].iter().sum::<f64>();
                    }
                }
                vec![Some(g), Some(self.constant(Tensor::vector(db)))]
            }
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => vec![Some(g), Some(g.scale(-1.0))],
            Op::Mul => vec![
                if need[0] { Some(g.mul(p(1))?) } else { None },
                if need[1] { Some(g.mul(p(0))?) } else { None },
            ],
            Op::Scale(s) => vec![Some(g.scale(*s))],
            Op::AddScalar => vec![Some(g)],
            Op::MulConst(c) => vec![Some(g.mul_const(c)?)],
            Op::Relu => {
                let mask = p(0).value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![Some(g.mul_const(&mask)?)]
            }
            Op::Sigmoid => {
                // y (1 − y)
                let d = out.mul(out.scale(-1.0).add_scalar(1.0))?;
                vec![Some(g.mul(d)?)]
            }
            Op::Exp => vec![Some(g.mul(out)?)],
            Op::Sqrt => vec![Some(g.mul(out.safe_recip())?.scale(0.5))],
            Op::SafeRecip => {
                let r = out;
                vec![Some(g.mul(r.mul(r)?)?.scale(-1.0))]
            }
            Op::Square => vec![Some(g.mul(p(0))?.scale(2.0))],
            Op::Softplus => vec![Some(g.mul(p(0).sigmoid())?)],
            Op::Sum => vec![Some(g.expand(&p(0).shape())?)],
            Op::Mean => {
                let n = p(0).numel() as f64;
                vec![Some(g.expand(&p(0).shape())?.scale(1.0 / n))]
            }
            Op::Expand => vec![Some(g.sum()?)],
            Op::SumRows => {
                let m = p(0).shape()[0];
                vec![Some(g.broadcast_rows(m)?)]
            }
            Op::SumCols => {
                let n = p(0).shape()[1];
                vec![Some(g.broadcast_cols(n)?)]
            }
            Op::BroadcastRows => vec![Some(g.sum_rows()?)],
            Op::BroadcastCols => vec![Some(g.sum_cols()?)],
            Op::Reshape => vec![Some(g.reshape(&p(0).shape())?)],
            Op::Concat { axis, sizes } => {
                let mut start = 0;
                let mut v = Vec::with_capacity(sizes.len());
                for (k, &s) in sizes.iter().enumerate() {
                    v.push(if need[k] { Some(g.slice(*axis, start, s)?) } else { None });
                    start += s;
                }
                v
            }
            Op::Slice { axis, start } => {
                let full = p(0).shape()[*axis];
                vec![Some(g.pad_slice(*axis, *start, full)?)]
            }
            Op::PadSlice { axis, start } => {
                let len = p(0).shape()[*axis];
                vec![Some(g.slice(*axis, *start, len)?)]
            }
            Op::Conv1d { stride, pad } => {
                first_order_only("conv1d")?;
                let (x, w) = (p(0).value(), p(1).value());
                let geom = conv_geom(x.shape(), w.shape(), *stride, *pad, false)?;
                let gv = g.value();
                let dx = if need[0] {
                    let d = kernels::conv1d_input_grad(gv.data(), w.data(), &geom);
                    Some(self.constant(Tensor::from_parts(x.shape().to_vec(), d)))
                } else {
                    None
                };
                let dw = if need[1] {
                    let d = kernels::conv1d_weight_grad(x.data(), gv.data(), &geom);
                    Some(self.constant(Tensor::from_parts(w.shape().to_vec(), d)))
                } else {
                    None
                };
                vec![dx, dw]
            }
            Op::Conv1dTranspose { stride, pad } => {
                first_order_only("conv1d_transpose")?;
                let (x, w) = (p(0).value(), p(1).value());
                // As a conv from the output back to the input: c_in of that
                // conv is this op's output channel count.
                let gv = g.value();
                let (b, c_out, l_out) = conv_dims(gv.shape()).expect("checked at forward");
                let (_, c_in, l_in) = conv_dims(x.shape()).expect("checked at forward");
                let geom = ConvGeom {
                    batch: b,
                    c_in: c_out,
                    c_out: c_in,
                    len_in: l_out,
                    len_out: l_in,
                    kernel: w.shape()[2],
                    stride: *stride,
                    pad: *pad,
                };
                let dx = if need[0] {
                    let d = kernels::conv1d_forward(gv.data(), w.data(), &geom);
                    Some(self.constant(Tensor::from_parts(x.shape().to_vec(), d)))
                } else {
                    None
                };
                let dw = if need[1] {
                    let d = kernels::conv1d_weight_grad(gv.data(), x.data(), &geom);
                    Some(self.constant(Tensor::from_parts(w.shape().to_vec(), d)))
                } else {
                    None
                };
                vec![dx, dw]
            }
            Op::MaxPool2 { argmax } => {
                first_order_only("maxpool1d")?;
                let x_shape = p(0).shape();
                let gv = g.value();
                let mut dx = vec![0.0; x_shape.iter().product()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gv.data()[o];
                }
                vec![Some(self.constant(Tensor::from_parts(x_shape, dx)))]
            }
            Op::Upsample2 => {
                first_order_only("upsample2")?;
                let x_shape = p(0).shape();
                let len = *x_shape.last().unwrap();
                let rows = p(0).numel() / len;
                let d = kernels::upsample2_grad(g.value().data(), rows, len);
                vec![Some(self.constant(Tensor::from_parts(x_shape, d)))]
            }
            Op::BatchNormTrain { xhat, inv_std } => {
                first_order_only("batchnorm1d")?;
                let gamma = p(1).value();
                let gv = g.value();
                let (b, c, l) = bn_dims(xhat.shape());
                let n = (b * l) as f64;
                let (sum_g, sum_gx) = kernels::channel_sums(gv.data(), xhat.data(), b, c, l);
                let mut dx = vec![0.0; gv.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * l;
                        let k = gamma.data()[ci] * inv_std[ci] / n;
                        for t in 0..l {
                            dx[off + t] = k * (n * gv.data()[off + t] - sum_g[ci] - xhat.data()[off + t] * sum_gx[ci]);
                        }
                    }
                }
                vec![
                    Some(self.constant(Tensor::from_parts(xhat.shape().to_vec(), dx))),
                    Some(self.constant(Tensor::vector(sum_gx))),
                    Some(self.constant(Tensor::vector(sum_g))),
                ]
            }
            Op::BatchNormEval { xhat, inv_std } => {
                first_order_only("batchnorm1d_eval")?;
                let gamma = p(1).value();
                let gv = g.value();
                let (b, c, l) = bn_dims(xhat.shape());
                let (sum_g, sum_gx) = kernels::channel_sums(gv.data(), xhat.data(), b, c, l);
                let mut dx = gv.data().to_vec();
                for bi in 0..b {
                    for ci in 0..c {
                        let k = gamma.data()[ci] * inv_std[ci];
                        dx[(bi * c + ci) * l..(bi * c + ci + 1) * l].iter_mut().for_each(|v| *v *= k);
                    }
                }
                vec![
                    Some(self.constant(Tensor::from_parts(xhat.shape().to_vec(), dx))),
                    Some(self.constant(Tensor::vector(sum_gx))),
                    Some(self.constant(Tensor::vector(sum_g))),
                ]
            }
        })
    }
}

/// Batchnorm accepts `[B, C, L]` or `[B, C]` (treated as `L = 1`).
fn bn_dims(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [b, c, l] => (b, c, l),
        [b, c] => (b, c, 1),
        _ => unreachable!("checked at forward"),
    }
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize, transpose: bool) -> Result<ConvGeom> {
    let name = if transpose { "conv1d_transpose" } else { "conv1d" };
    if stride == 0 {
        return Err(Error::invalid(format!("{name}: stride must be positive")));
    }
    let (b, c, l) = conv_dims(x).ok_or_else(|| Error::shape(name, x, w))?;
    if w.len() != 3 || w[if transpose { 0 } else { 1 }] != c {
        return Err(Error::shape(name, x, w));
    }
    if transpose {
        let len_out = kernels::conv_transpose_out_len(l, w[2], stride, pad).ok_or_else(|| Error::shape(name, x, w))?;
        // geometry of the forward conv this op is the adjoint of
        Ok(ConvGeom {
            batch: b,
            c_in: w[1],
            c_out: c,
            len_in: len_out,
            len_out: l,
            kernel: w[2],
            stride,
            pad,
        })
    } else {
        let len_out = kernels::conv_out_len(l, w[2], stride, pad).ok_or_else(|| Error::shape(name, x, w))?;
        Ok(ConvGeom {
            batch: b,
            c_in: c,
            c_out: w[0],
            len_in: l,
            len_out,
            kernel: w[2],
            stride,
            pad,
        })
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let v = self.value().map(f);
        self.graph.push(v, op, vec![self.id])
    }

    fn binary(self, other: Var<'g>, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        let v = self.value().zip_map(&other.value(), name, f)?;
        Ok(self.graph.push(v, op, vec![self.id, other.id]))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` with optional transposes of either operand.
    pub fn matmul_t(self, other: Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (ar, ac) = a.dims2().map_err(|_| Error::shape("matmul", a.shape(), b.shape()))?;
        let (br, bc) = b.dims2().map_err(|_| Error::shape("matmul", a.shape(), b.shape()))?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), ta, b.data(), tb, 0.0, &mut c);
        Ok(self.graph.push(Tensor::from_parts(vec![m, n], c), Op::MatMul { ta, tb }, vec![self.id, other.id]))
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        let (x, b) = (self.value(), bias.value());
        let (m, n) = x.dims2()?;
        if b.shape() != [n] {
            return Err(Error::shape("add_bias", x.shape(), b.shape()));
        }
        let mut d = x.data().to_vec();
        for r in 0..m {
            for (v, bv) in d[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        Ok(self.graph.push(Tensor::from_parts(vec![m, n], d), Op::AddBias, vec![self.id, bias.id]))
    }

    /// Dense layer `x · w + b`.
    pub fn dense(self, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
        self.matmul(w)?.add_bias(b)
    }

    /// `[B, C, L] + [C]` broadcast over batch and length.
    pub fn channel_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        let (x, bv) = (self.value(), bias.value());
        let (b, c, l) = conv_dims(x.shape()).ok_or_else(|| Error::shape("channel_bias", x.shape(), bv.shape()))?;
        if bv.shape() != [c] {
            return Err(Error::shape("channel_bias", x.shape(), bv.shape()));
        }
        let mut d = x.data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                d[(bi * c + ci) * l..(bi * c + ci + 1) * l].iter_mut().for_each(|v| *v += bv.data()[ci]);
            }
        }
        Ok(self.graph.push(Tensor::from_parts(x.shape().to_vec(), d), Op::ChannelBias, vec![self.id, bias.id]))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.unary(Op::Scale(s), |v| v * s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        self.unary(Op::AddScalar, |v| v + s)
    }

    /// Elementwise product with a constant tensor (masks, fixed weights).
    pub fn mul_const(self, c: &Tensor) -> Result<Var<'g>> {
        let v = self.value().zip_map(c, "mul_const", |a, b| a * b)?;
        Ok(self.graph.push(v, Op::MulConst(c.clone()), vec![self.id]))
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu, |v| v.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    /// `1/x`, with `0` mapped to `0`.
    pub fn safe_recip(self) -> Var<'g> {
        self.unary(Op::SafeRecip, |v| if v == 0.0 { 0.0 } else { 1.0 / v })
    }

    pub fn square(self) -> Var<'g> {
        self.unary(Op::Square, |v| v * v)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(self) -> Var<'g> {
        self.unary(Op::Softplus, softplus)
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let v = Tensor::scalar(self.value().sum());
        Ok(self.graph.push(v, Op::Sum, vec![self.id]))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let v = Tensor::scalar(self.value().mean());
        Ok(self.graph.push(v, Op::Mean, vec![self.id]))
    }

    /// Broadcasts a one-element node to `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'g>> {
        if self.numel() != 1 {
            return Err(Error::shape("expand", &self.shape(), shape));
        }
        let v = Tensor::full(shape, self.item());
        Ok(self.graph.push(v, Op::Expand, vec![self.id]))
    }

    /// `[m, n]` → `[n]`, summing over rows.
    pub fn sum_rows(self) -> Result<Var<'g>> {
        let x = self.value();
        let (m, n) = x.dims2()?;
        let mut s = vec![0.0; n];
        for r in 0..m {
            for (a, v) in s.iter_mut().zip(&x.data()[r * n..(r + 1) * n]) {
                *a += v;
            }
        }
        Ok(self.graph.push(Tensor::vector(s), Op::SumRows, vec![self.id]))
    }

    /// `[m, n]` → `[m]`, summing each row.
    pub fn sum_cols(self) -> Result<Var<'g>> {
        let x = self.value();
        let (m, n) = x.dims2()?;
        let s = (0..m).map(|r| x.data()[r * n..(r + 1) * n].iter().sum()).collect();
        Ok(self.graph.push(Tensor::vector(s), Op::SumCols, vec![self.id]))
    }

    /// `[n]` → `[m, n]`.
    pub fn broadcast_rows(self, m: usize) -> Result<Var<'g>> {
        let x = self.value();
        if x.ndim() != 1 {
            return Err(Error::shape("broadcast_rows", x.shape(), &[m]));
        }
        let n = x.numel();
        let mut d = Vec::with_capacity(m * n);
        for _ in 0..m {
            d.extend_from_slice(x.data());
        }
        Ok(self.graph.push(Tensor::from_parts(vec![m, n], d), Op::BroadcastRows, vec![self.id]))
    }

    /// `[m]` → `[m, n]`.
    pub fn broadcast_cols(self, n: usize) -> Result<Var<'g>> {
        let x = self.value();
        if x.ndim() != 1 {
            return Err(Error::shape("broadcast_cols", x.shape(), &[n]));
        }
        let m = x.numel();
        let mut d = Vec::with_capacity(m * n);
        for &v in x.data() {
            d.extend(std::iter::repeat_n(v, n));
        }
        Ok(self.graph.push(Tensor::from_parts(vec![m, n], d), Op::BroadcastCols, vec![self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.graph.push(v, Op::Reshape, vec![self.id]))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let graph = first.graph;
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        for v in &vals[1..] {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in vals.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(graph.push(
            Tensor::from_parts(shape, data),
            Op::Concat { axis, sizes },
            parts.iter().map(|p| p.id).collect(),
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.ndim() || start + len > x.shape()[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) on axis {axis} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let (outer, full, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.graph.push(Tensor::from_parts(shape, data), Op::Slice { axis, start }, vec![self.id]))
    }

    /// Embeds `self` at offset `start` of a zero tensor with `full` entries
    /// along `axis` (the adjoint of [`Var::slice`]).
    pub fn pad_slice(self, axis: usize, start: usize, full: usize) -> Result<Var<'g>> {
        let x = self.value();
        if axis >= x.ndim() || start + x.shape()[axis] > full {
            return Err(Error::invalid(format!("pad_slice to {full} on axis {axis} of {:?}", x.shape())));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut data = vec![0.0; outer * full * inner];
        for o in 0..outer {
            data[(o * full + start) * inner..(o * full + start + len) * inner]
                .copy_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = full;
        Ok(self.graph.push(Tensor::from_parts(shape, data), Op::PadSlice { axis, start }, vec![self.id]))
    }

    /// 1-D convolution (cross-correlation) with symmetric zero padding.
    /// `self`: `[B, Cin, L]` or `[Cin, L]`; `w`: `[Cout, Cin, K]`.
    pub fn conv1d(self, w: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (x, wv) = (self.value(), w.value());
        let geom = conv_geom(x.shape(), wv.shape(), stride, pad, false)?;
        let y = kernels::conv1d_forward(x.data(), wv.data(), &geom);
        let shape = if x.ndim() == 2 {
            vec![geom.c_out, geom.len_out]
        } else {
            vec![geom.batch, geom.c_out, geom.len_out]
        };
        Ok(self.graph.push(Tensor::from_parts(shape, y), Op::Conv1d { stride, pad }, vec![self.id, w.id]))
    }

    /// Transposed convolution, the adjoint of [`Var::conv1d`].
    /// `self`: `[B, Cin, L]`; `w`: `[Cin, Cout, K]`;
    /// output length `(L − 1)·stride − 2·pad + K`.
    pub fn conv1d_transpose(self, w: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (x, wv) = (self.value(), w.value());
        let geom = conv_geom(x.shape(), wv.shape(), stride, pad, true)?;
        let y = kernels::conv1d_input_grad(x.data(), wv.data(), &geom);
        let shape = if x.ndim() == 2 {
            vec![geom.c_in, geom.len_in]
        } else {
            vec![geom.batch, geom.c_in, geom.len_in]
        };
        Ok(self.graph.push(
            Tensor::from_parts(shape, y),
            Op::Conv1dTranspose { stride, pad },
            vec![self.id, w.id],
        ))
    }

    /// Max-pool, window 2, stride 2, over the last axis.
    pub fn maxpool2(self) -> Result<Var<'g>> {
        let x = self.value();
        let len = *x.shape().last().ok_or_else(|| Error::shape("maxpool1d", x.shape(), &[2]))?;
        if len < 2 {
            return Err(Error::shape("maxpool1d", x.shape(), &[2]));
        }
        let rows = x.numel() / len;
        let (y, arg) = kernels::maxpool2(x.data(), rows, len);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len / 2;
        Ok(self.graph.push(
            Tensor::from_parts(shape, y),
            Op::MaxPool2 { argmax: Arc::new(arg) },
            vec![self.id],
        ))
    }

    /// Nearest-neighbour upsampling ×2 over the last axis.
    pub fn upsample2(self) -> Result<Var<'g>> {
        let x = self.value();
        let len = *x.shape().last().ok_or_else(|| Error::shape("upsample2", x.shape(), &[1]))?;
        let rows = x.numel() / len;
        let y = kernels::upsample2(x.data(), rows, len);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len * 2;
        Ok(self.graph.push(Tensor::from_parts(shape, y), Op::Upsample2, vec![self.id]))
    }

    /// Train-mode batchnorm over `[B, C, L]` or `[B, C]` using batch
    /// statistics.
    pub fn batchnorm_train(self, gamma: Var<'g>, beta: Var<'g>) -> Result<BatchNormOut<'g>> {
        let x = self.value();
        let (b, c, l) = match *x.shape() {
            [b, c, l] => (b, c, l),
            [b, c] => (b, c, 1),
            _ => return Err(Error::shape("batchnorm1d", x.shape(), &gamma.shape())),
        };
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("batchnorm1d", x.shape(), &gamma.shape()));
        }
        let n = b * l;
        if n < 2 {
            return Err(Error::invalid("batchnorm1d: train mode needs at least 2 values per channel"));
        }
        let (mean, var) = kernels::channel_stats(x.data(), b, c, l);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (y, xhat) = kernels::channel_affine(x.data(), b, c, l, &mean, &inv_std, gamma.value().data(), beta.value().data());
        let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
        let out = self.graph.push(
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::BatchNormTrain {
                xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
                inv_std: Arc::new(inv_std),
            },
            vec![self.id, gamma.id, beta.id],
        );
        Ok(BatchNormOut {
            out,
            batch_mean: mean,
            batch_var: unbiased,
        })
    }

    /// Eval-mode batchnorm with frozen running statistics.
    pub fn batchnorm_eval(self, gamma: Var<'g>, beta: Var<'g>, running_mean: &[f64], running_var: &[f64]) -> Result<Var<'g>> {
        let x = self.value();
        let (b, c, l) = match *x.shape() {
            [b, c, l] => (b, c, l),
            [b, c] => (b, c, 1),
            _ => return Err(Error::shape("batchnorm1d_eval", x.shape(), &gamma.shape())),
        };
        if gamma.shape() != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm1d_eval", x.shape(), &gamma.shape()));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (y, xhat) = kernels::channel_affine(x.data(), b, c, l, running_mean, &inv_std, gamma.value().data(), beta.value().data());
        Ok(self.graph.push(
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::BatchNormEval {
                xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
                inv_std: Arc::new(inv_std),
            },
            vec![self.id, gamma.id, beta.id],
        ))
    }

    /// Inverted dropout. In train mode each entry is zeroed with
    /// probability `rate` (mask drawn from `seed`) and survivors are scaled
    /// by `1/(1 − rate)`; in eval mode this is the identity.
    pub fn dropout(self, rate: f64, seed: u64, train: bool) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(self);
        }
        let mask = dropout_mask(&self.shape(), rate, seed);
        self.mul_const(&mask)
    }
}

pub fn dropout_mask(shape: &[usize], rate: f64, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = crate::rng::seeded(seed);
    let keep = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}
