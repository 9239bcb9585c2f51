//! Reverse-mode automatic differentiation on a tape.
//!
//! Every backward rule is expressed with tape operations, so gradients can be
//! recorded and differentiated again (`create_graph = true`). The R1 penalty
//! needs this: its parameter gradient is a derivative of an input gradient.
//!
//! There is no implicit broadcasting. Operands of elementwise ops must have
//! identical shapes; broadcasts are explicit linear ops.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::tensor::{self, Tensor};

/// A linear map together with enough shape information to build its adjoint.
#[derive(Clone, Debug)]
pub enum LinearOp {
    Reshape { from: Vec<usize>, to: Vec<usize> },
    /// Sum of all entries, output shape `[1]`.
    SumAll { shape: Vec<usize> },
    /// Broadcast a one-element tensor to `shape`.
    Expand { shape: Vec<usize> },
    /// `[c] -> [n, c, h, w]`.
    ChannelBcast { n: usize, c: usize, h: usize, w: usize },
    /// `[n, c, h, w] -> [c]`.
    ChannelSum { n: usize, c: usize, h: usize, w: usize },
    /// `[n, c] -> [n, c, h, w]`.
    SpatialBcast { n: usize, c: usize, h: usize, w: usize },
    /// `[n, c, h, w] -> [n, c]`.
    SpatialSum { n: usize, c: usize, h: usize, w: usize },
    AvgPool2 { h: usize, w: usize },
    AvgPool2T { h: usize, w: usize },
    Up2,
    Up2T,
    /// `out[i] = in[idx[i]]`.
    Gather { idx: Rc<Vec<usize>>, in_shape: Vec<usize>, out_shape: Vec<usize> },
    /// `out[idx[i]] += in[i]`.
    Scatter { idx: Rc<Vec<usize>>, in_shape: Vec<usize>, out_shape: Vec<usize> },
}

impl LinearOp {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            LinearOp::Reshape { to, .. } => x.clone().reshape(to.clone()),
            LinearOp::SumAll { .. } => Tensor::scalar(x.sum()),
            LinearOp::Expand { shape } => Tensor::full(shape.clone(), x.item()),
            &LinearOp::ChannelBcast { n, c, h, w } => {
                assert_eq!(x.shape(), [c], "channel broadcast expects [{c}]");
                let mut out = Vec::with_capacity(n * c * h * w);
                for _ in 0..n {
                    for &v in x.data() {
                        out.extend(std::iter::repeat(v).take(h * w));
                    }
                }
                Tensor::new([n, c, h, w], out)
            }
            &LinearOp::ChannelSum { n, c, h, w } => {
                assert_eq!(x.shape(), [n, c, h, w]);
                let mut out = vec![0.0; c];
                for (p, plane) in x.data().chunks(h * w).enumerate() {
                    out[p % c] += plane.iter().sum::<f64>();
                }
                Tensor::new([c], out)
            }
            &LinearOp::SpatialBcast { n, c, h, w } => {
                assert_eq!(x.shape(), [n, c]);
                let mut out = Vec::with_capacity(n * c * h * w);
                for &v in x.data() {
                    out.extend(std::iter::repeat(v).take(h * w));
                }
                Tensor::new([n, c, h, w], out)
            }
            &LinearOp::SpatialSum { n, c, h, w } => {
                assert_eq!(x.shape(), [n, c, h, w]);
                Tensor::new([n, c], x.data().chunks(h * w).map(|p| p.iter().sum()).collect())
            }
            LinearOp::AvgPool2 { .. } => tensor::avg_pool2(x),
            &LinearOp::AvgPool2T { h, w } => tensor::avg_pool2_adjoint(x, h, w),
            LinearOp::Up2 => tensor::up2(x),
            LinearOp::Up2T => tensor::up2_adjoint(x),
            LinearOp::Gather { idx, in_shape, out_shape } => {
                assert_eq!(x.shape(), &in_shape[..], "gather input shape");
                let d = x.data();
                Tensor::new(out_shape.clone(), idx.iter().map(|&i| d[i]).collect())
            }
            LinearOp::Scatter { idx, in_shape, out_shape } => {
                assert_eq!(x.shape(), &in_shape[..], "scatter input shape");
                let mut out = Tensor::zeros(out_shape.clone());
                let o = out.data_mut();
                for (&i, &v) in idx.iter().zip(x.data()) {
                    o[i] += v;
                }
                out
            }
        }
    }

    pub fn adjoint(&self) -> LinearOp {
        match self.clone() {
            LinearOp::Reshape { from, to } => LinearOp::Reshape { from: to, to: from },
            LinearOp::SumAll { shape } => LinearOp::Expand { shape },
            LinearOp::Expand { shape } => LinearOp::SumAll { shape },
            LinearOp::ChannelBcast { n, c, h, w } => LinearOp::ChannelSum { n, c, h, w },
            LinearOp::ChannelSum { n, c, h, w } => LinearOp::ChannelBcast { n, c, h, w },
            LinearOp::SpatialBcast { n, c, h, w } => LinearOp::SpatialSum { n, c, h, w },
            LinearOp::SpatialSum { n, c, h, w } => LinearOp::SpatialBcast { n, c, h, w },
            LinearOp::AvgPool2 { h, w } => LinearOp::AvgPool2T { h, w },
            LinearOp::AvgPool2T { h, w } => LinearOp::AvgPool2 { h, w },
            LinearOp::Up2 => LinearOp::Up2T,
            LinearOp::Up2T => LinearOp::Up2,
            LinearOp::Gather { idx, in_shape, out_shape } => {
                LinearOp::Scatter { idx, in_shape: out_shape, out_shape: in_shape }
            }
            LinearOp::Scatter { idx, in_shape, out_shape } => {
                LinearOp::Gather { idx, in_shape: out_shape, out_shape: in_shape }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulConst(usize, Rc<Tensor>),
    PowF(usize, f64),
    Exp(usize),
    Ln(usize),
    Sigmoid(usize),
    Softplus(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Conv { x: usize, w: usize, stride: usize, pad: usize },
    ConvInputGrad { g: usize, w: usize, stride: usize, pad: usize },
    ConvWeightGrad { x: usize, g: usize, stride: usize, pad: usize },
    Linear(usize, LinearOp),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: Cell::new(true) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf, requires_grad)
    }

    fn push(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn op_node(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let rg = self.recording.get() && parents.iter().any(|&p| self.requires(p));
        if rg {
            self.push(Rc::new(value), op, true)
        } else {
            self.push(Rc::new(value), Op::Leaf, false)
        }
    }

    fn parents(op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) => vec![a, b],
            &Op::Scale(a, _) | &Op::AddScalar(a) | &Op::MulConst(a, _) | &Op::PowF(a, _) => vec![a],
            &Op::Exp(a) | &Op::Ln(a) | &Op::Sigmoid(a) | &Op::Softplus(a) | &Op::Linear(a, _) => vec![a],
            &Op::MatMul { a, b, .. } => vec![a, b],
            &Op::Conv { x, w, .. } => vec![x, w],
            &Op::ConvInputGrad { g, w, .. } => vec![g, w],
            &Op::ConvWeightGrad { x, g, .. } => vec![x, g],
        }
    }

    /// Gradients of the scalar `output` with respect to `wrt`.
    ///
    /// With `create_graph` the gradient computation is itself recorded and
    /// can be differentiated. Inputs that do not influence `output` get zeros.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>], create_graph: bool) -> Vec<Var<'t>> {
        assert_eq!(output.value().numel(), 1, "grad() needs a scalar output");
        let end = output.id + 1;
        let mut needed = vec![false; end];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id < end {
                    needed[w.id] = true;
                }
            }
            for i in 0..end {
                if !needed[i] && nodes[i].requires_grad {
                    needed[i] = Self::parents(&nodes[i].op).iter().any(|&p| needed[p]);
                }
            }
        }
        let prev = self.recording.replace(create_graph);
        let mut adj: Vec<Option<Var<'t>>> = vec![None; end];
        adj[output.id] = Some(self.constant(Tensor::full(output.shape(), 1.0)));
        for i in (0..end).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let this = Var { tape: self, id: i };
            let mut acc = |p: usize, contrib: Var<'t>| {
                if needed[p] {
                    adj[p] = Some(match adj[p] {
                        Some(prev) => prev.add(contrib),
                        None => contrib,
                    });
                }
            };
            let v = |id: usize| Var { tape: self, id };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(a, g);
                    acc(b, g);
                }
                Op::Sub(a, b) => {
                    acc(a, g);
                    if needed[b] {
                        acc(b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if needed[a] {
                        acc(a, g.mul(v(b)));
                    }
                    if needed[b] {
                        acc(b, g.mul(v(a)));
                    }
                }
                Op::Scale(a, c) => acc(a, g.scale(c)),
                Op::AddScalar(a) => acc(a, g),
                Op::MulConst(a, m) => acc(a, g.mul_const(m)),
                Op::PowF(a, p) => acc(a, g.mul(v(a).powf(p - 1.0).scale(p))),
                Op::Exp(a) => acc(a, g.mul(this)),
                Op::Ln(a) => acc(a, g.mul(v(a).powf(-1.0))),
                Op::Sigmoid(a) => {
                    let ds = this.mul(this.scale(-1.0).add_scalar(1.0));
                    acc(a, g.mul(ds));
                }
                Op::Softplus(a) => acc(a, g.mul(v(a).sigmoid())),
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (v(a), v(b));
                    let (da, db) = match (ta, tb) {
                        (false, false) => ((g, vb, false, true), (va, g, true, false)),
                        (false, true) => ((g, vb, false, false), (g, va, true, false)),
                        (true, false) => ((vb, g, false, true), (va, g, false, false)),
                        (true, true) => ((vb, g, true, true), (g, va, true, true)),
                    };
                    if needed[a] {
                        acc(a, da.0.matmul(da.1, da.2, da.3));
                    }
                    if needed[b] {
                        acc(b, db.0.matmul(db.1, db.2, db.3));
                    }
                }
                Op::Conv { x, w, stride, pad } => {
                    let (_, _, h, wd) = v(x).value().dims4();
                    let k = v(w).value().shape()[2];
                    if needed[x] {
                        acc(x, g.conv_input_grad(v(w), h, wd, stride, pad));
                    }
                    if needed[w] {
                        acc(w, v(x).conv_weight_grad(g, k, stride, pad));
                    }
                }
                Op::ConvInputGrad { g: gi, w, stride, pad, .. } => {
                    // z = A_w^T g  =>  dg = A_w z̄,  dw = weight_grad(z̄, g)
                    let k = v(w).value().shape()[2];
                    if needed[gi] {
                        acc(gi, g.conv2d(v(w), stride, pad));
                    }
                    if needed[w] {
                        acc(w, g.conv_weight_grad(v(gi), k, stride, pad));
                    }
                }
                Op::ConvWeightGrad { x, g: gi, stride, pad, .. } => {
                    // <W̄, wg(x, g)> = <g, conv(x, W̄)>
                    let (_, _, h, wd) = v(x).value().dims4();
                    if needed[x] {
                        acc(x, v(gi).conv_input_grad(g, h, wd, stride, pad));
                    }
                    if needed[gi] {
                        acc(gi, v(x).conv2d(g, stride, pad));
                    }
                }
                Op::Linear(a, lin) => acc(a, g.linear(lin.adjoint())),
            }
        }
        self.recording.set(prev);
        wrt.iter()
            .map(|w| match adj.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.shape())),
            })
            .collect()
    }

    /// Plain (non-recorded) gradients as tensors.
    pub fn gradients(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Vec<Tensor> {
        let wrt: Vec<Var<'_>> = wrt.iter().map(|w| Var { tape: self, id: w.id }).collect();
        let out = Var { tape: self, id: output.id };
        self.grad(out, &wrt, false).into_iter().map(|g| (*g.value()).clone()).collect()
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
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// The same value as a constant: gradient does not flow back through it.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push(self.value(), Op::Leaf, false)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.op_node(value, op, &[self.id])
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        self.tape.op_node(value, op, &[self.id, other.id])
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|a| a * c), Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.value().map(|a| a + c), Op::AddScalar(self.id))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, m: Rc<Tensor>) -> Var<'t> {
        let v = self.value().zip_map(&m, |a, b| a * b);
        self.unary(v, Op::MulConst(self.id, m))
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(self.value().map(|a| a.powf(p)), Op::PowF(self.id, p))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value().map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(self.value().map(f64::ln), Op::Ln(self.id))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let x = self.value();
        let mask = x.map(|a| if (lo..=hi).contains(&a) { 1.0 } else { 0.0 });
        let offset = x.map(|a| if a < lo { lo } else if a > hi { hi } else { 0.0 });
        self.mul_const(Rc::new(mask)).add(self.tape().constant(offset))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(self.value().map(sigmoid), Op::Sigmoid(self.id))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Var<'t> {
        self.unary(self.value().map(softplus), Op::Softplus(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let mask = self.value().map(|a| if a > 0.0 { 1.0 } else { slope });
        self.mul_const(Rc::new(mask))
    }

    /// `|x|`, with gradient `sign(x)` (zero at zero).
    pub fn abs(&self) -> Var<'t> {
        let sign = self.value().map(|a| if a > 0.0 { 1.0 } else if a < 0.0 { -1.0 } else { 0.0 });
        self.mul_const(Rc::new(sign))
    }

    pub fn relu(&self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    pub fn matmul(&self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        let v = tensor::matmul(&self.value(), &other.value(), ta, tb);
        self.binary(other, v, Op::MatMul { a: self.id, b: other.id, ta, tb })
    }

    pub fn conv2d(&self, w: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let v = tensor::conv2d(&self.value(), &w.value(), stride, pad);
        self.binary(w, v, Op::Conv { x: self.id, w: w.id, stride, pad })
    }

    pub fn conv_input_grad(&self, w: Var<'t>, h: usize, wd: usize, stride: usize, pad: usize) -> Var<'t> {
        let v = tensor::conv2d_input_grad(&self.value(), &w.value(), h, wd, stride, pad);
        self.binary(w, v, Op::ConvInputGrad { g: self.id, w: w.id, stride, pad })
    }

    pub fn conv_weight_grad(&self, g: Var<'t>, k: usize, stride: usize, pad: usize) -> Var<'t> {
        let v = tensor::conv2d_weight_grad(&self.value(), &g.value(), k, stride, pad);
        self.binary(g, v, Op::ConvWeightGrad { x: self.id, g: g.id, stride, pad })
    }

    pub fn linear(&self, op: LinearOp) -> Var<'t> {
        let v = op.apply(&self.value());
        self.unary(v, Op::Linear(self.id, op))
    }

    pub fn reshape(&self, to: impl Into<Vec<usize>>) -> Var<'t> {
        self.linear(LinearOp::Reshape { from: self.shape(), to: to.into() })
    }

    pub fn sum(&self) -> Var<'t> {
        self.linear(LinearOp::SumAll { shape: self.shape() })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn expand(&self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        self.linear(LinearOp::Expand { shape: shape.into() })
    }

    /// Broadcast a `[c]` vector over an NCHW shape.
    pub fn channel_bcast(&self, n: usize, h: usize, w: usize) -> Var<'t> {
        let c = self.shape()[0];
        self.linear(LinearOp::ChannelBcast { n, c, h, w })
    }

    /// Add a per-channel bias `[c]` to an NCHW tensor.
    pub fn add_channel_bias(&self, bias: Var<'t>) -> Var<'t> {
        let (n, _, h, w) = self.value().dims4();
        self.add(bias.channel_bcast(n, h, w))
    }

    /// `[n, c, h, w] -> [n, c]` mean over spatial positions.
    pub fn spatial_mean(&self) -> Var<'t> {
        let (n, c, h, w) = self.value().dims4();
        self.linear(LinearOp::SpatialSum { n, c, h, w }).scale(1.0 / (h * w) as f64)
    }

    /// `[n, c] -> [n, c, h, w]`.
    pub fn spatial_bcast(&self, h: usize, w: usize) -> Var<'t> {
        let s = self.shape();
        self.linear(LinearOp::SpatialBcast { n: s[0], c: s[1], h, w })
    }

    pub fn avg_pool2(&self) -> Var<'t> {
        let (_, _, h, w) = self.value().dims4();
        self.linear(LinearOp::AvgPool2 { h, w })
    }

    pub fn max_pool2(&self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let idx = tensor::max_pool2_indices(&x);
        self.gather(Rc::new(idx), vec![n, c, h / 2, w / 2])
    }

    pub fn up2(&self) -> Var<'t> {
        self.linear(LinearOp::Up2)
    }

    pub fn gather(&self, idx: Rc<Vec<usize>>, out_shape: Vec<usize>) -> Var<'t> {
        self.linear(LinearOp::Gather { idx, in_shape: self.shape(), out_shape })
    }

    pub fn scatter(&self, idx: Rc<Vec<usize>>, out_shape: Vec<usize>) -> Var<'t> {
        self.linear(LinearOp::Scatter { idx, in_shape: self.shape(), out_shape })
    }

    /// Concatenate NCHW tensors along channels.
    pub fn concat_channels(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let (n, _, h, w) = parts[0].value().dims4();
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut acc: Option<Var<'t>> = None;
        let mut c0 = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.value().dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat shape mismatch");
            let mut idx = Vec::with_capacity(pn * pc * ph * pw);
            for b in 0..n {
                for c in 0..pc {
                    let base = ((b * total) + c0 + c) * h * w;
                    idx.extend(base..base + h * w);
                }
            }
            let placed = p.scatter(Rc::new(idx), vec![n, total, h, w]);
            acc = Some(match acc {
                Some(a) => a.add(placed),
                None => placed,
            });
            c0 += pc;
        }
        acc.unwrap()
    }

    /// Rectangular crop of every image in an NCHW batch.
    pub fn crop(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> Var<'t> {
        let (n, c, h, w) = self.value().dims4();
        assert!(y0 + ch <= h && x0 + cw <= w, "crop out of bounds");
        let mut idx = Vec::with_capacity(n * c * ch * cw);
        for p in 0..n * c {
            for y in 0..ch {
                let base = p * h * w + (y0 + y) * w + x0;
                idx.extend(base..base + cw);
            }
        }
        self.gather(Rc::new(idx), vec![n, c, ch, cw])
    }

    /// Tile each `s x s` block of every image into its own batch entry,
    /// row-major over tiles: `[n, c, h, w] -> [n * (h/s) * (w/s), c, s, s]`.
    pub fn subdivide(&self, s: usize) -> Var<'t> {
        let (n, c, h, w) = self.value().dims4();
        assert!(h % s == 0 && w % s == 0, "tile size {s} does not divide {h}x{w}");
        let (ty, tx) = (h / s, w / s);
        let mut idx = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for by in 0..ty {
                for bx in 0..tx {
                    for ch in 0..c {
                        for y in 0..s {
                            let base = ((b * c + ch) * h + by * s + y) * w + bx * s;
                            idx.extend(base..base + s);
                        }
                    }
                }
            }
        }
        self.gather(Rc::new(idx), vec![n * ty * tx, c, s, s])
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numerical_gradient(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    out
}
