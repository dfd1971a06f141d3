use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::ops::{self, ConvGeom};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

pub type NodeId = usize;

/// Gradient rewrite applied to a group of hooked nodes once their gradients
/// are complete. Receives the member gradients (in member order) and the
/// forward values of the scalar nodes bound to the hook.
pub type HookFn = Box<dyn Fn(&mut [Tensor], &[f64]) + Send + Sync>;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        theta: f64,
    },
    Sigmoid(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    ConcatChannels(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    SliceRows(NodeId, usize),
    SliceChannels(NodeId, usize),
    L2Norm(NodeId),
    Cosine(NodeId, NodeId),
    NormalizeRows(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNormRows(NodeId, f64),
    BroadcastRows(NodeId),
    RepeatChannels(NodeId),
    PermuteRows(NodeId, Vec<usize>),
    Gather(NodeId, Vec<usize>),
    Hook { parent: NodeId, hook: usize },
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
}

struct Hook {
    members: Vec<NodeId>,
    scalars: Vec<NodeId>,
    f: HookFn,
}

/// Record of one forward pass. Single-threaded; discarded after `backward`.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    hooks: RefCell<Vec<Hook>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Handle for binding scalar inputs to a gradient hook after the fact.
#[derive(Clone, Copy, Debug)]
pub struct HookHandle(usize);

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            hooks: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input (parameter or data) on the tape.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push_unchecked(Op::Leaf, value);
        Var { tape: self, id }
    }

    pub fn var(&self, id: NodeId) -> Var<'_> {
        assert!(id < self.len(), "node {id} not on this tape");
        Var { tape: self, id }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    fn push_unchecked(&self, op: Op, value: Tensor) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        nodes.len() - 1
    }

    pub(crate) fn push(&self, op: Op, value: Tensor, name: &'static str) -> Result<Var<'_>> {
        let value = value.ensure_finite(name)?;
        Ok(Var {
            tape: self,
            id: self.push_unchecked(op, value),
        })
    }

    /// Identity nodes over `vars` whose gradients are rewritten by `f` before
    /// they continue into the original nodes.
    ///
    /// All members are recorded contiguously, so every consumer of any member
    /// comes after the last one and the group's gradients are complete when
    /// the last member is visited in reverse order.
    pub fn grad_hook<'t>(
        &'t self,
        vars: &[Var<'t>],
        f: HookFn,
    ) -> Result<(Vec<Var<'t>>, HookHandle)> {
        if vars.is_empty() {
            return Err(Error::InvalidArgument("grad_hook needs at least one var".into()));
        }
        let hook = self.hooks.borrow().len();
        let mut out = Vec::with_capacity(vars.len());
        for v in vars {
            let value = v.value();
            out.push(Var {
                tape: self,
                id: self.push_unchecked(Op::Hook { parent: v.id, hook }, value),
            });
        }
        self.hooks.borrow_mut().push(Hook {
            members: out.iter().map(|v| v.id).collect(),
            scalars: Vec::new(),
            f,
        });
        Ok((out, HookHandle(hook)))
    }

    /// Binds scalar nodes whose forward values are passed to the hook function.
    pub fn bind_hook_scalars(&self, handle: HookHandle, scalars: &[Var<'_>]) -> Result<()> {
        for s in scalars {
            if s.numel() != 1 {
                return shape_err("bind_hook_scalars", format!("non-scalar node {:?}", s.shape()));
            }
        }
        self.hooks.borrow_mut()[handle.0].scalars = scalars.iter().map(|s| s.id).collect();
        Ok(())
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::InvalidArgument("loss belongs to another tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let hooks = self.hooks.borrow();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            self.consumed.set(false);
            return Err(Error::NonScalarLoss(loss_shape));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(&loss_shape));

        for id in (0..=loss.id).rev() {
            if let Op::Hook { hook, .. } = nodes[id].op {
                let h = &hooks[hook];
                if *h.members.last().expect("non-empty hook") == id {
                    apply_hook(h, &nodes, &mut grads);
                }
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn apply_hook(h: &Hook, nodes: &[Node], grads: &mut [Option<Tensor>]) {
    if h.members.iter().all(|&m| grads[m].is_none()) {
        return;
    }
    let mut member_grads: Vec<Tensor> = h
        .members
        .iter()
        .map(|&m| {
            grads[m]
                .take()
                .unwrap_or_else(|| Tensor::zeros(nodes[m].value.shape()))
        })
        .collect();
    let scalars: Vec<f64> = h.scalars.iter().map(|&s| nodes[s].value.data()[0]).collect();
    (h.f)(&mut member_grads, &scalars);
    for (&m, g) in h.members.iter().zip(member_grads) {
        grads[m] = Some(g);
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign_raw(&g),
        slot => *slot = Some(g),
    }
}

fn accumulate_ref(grads: &mut [Option<Tensor>], id: NodeId, g: &Tensor, shape: &[usize]) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign_raw(g),
        slot => *slot = Some(Tensor::from_parts(shape.to_vec(), g.data().to_vec())),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn backprop_node(nodes: &[Node], id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: NodeId| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_ref(grads, *a, g, val(*a).shape());
            accumulate_ref(grads, *b, g, val(*b).shape());
        }
        Op::Sub(a, b) => {
            accumulate_ref(grads, *a, g, val(*a).shape());
            accumulate(grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let ga = zip_map(g, val(*b), |g, y| g * y);
            let gb = zip_map(g, val(*a), |g, x| g * x);
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
        Op::AddConst(a) | Op::Hook { parent: a, .. } => {
            accumulate_ref(grads, *a, g, val(*a).shape())
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let ga = ops::matmul_nt(g.data(), tb.data(), m, n, k);
            let gb = ops::matmul_tn(ta.data(), g.data(), m, k, n);
            accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
            accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            accumulate(grads, *a, Tensor::from_parts(vec![c, r], ops::transpose(g.data(), r, c)));
        }
        Op::Reshape(a) => accumulate_ref(grads, *a, g, val(*a).shape()),
        Op::Conv2d { x, w, bias, theta } => {
            let (tx, tw) = (val(*x), val(*w));
            let geom = ConvGeom::new(tx.shape(), tw.shape());
            let (gx, gw) = ops::conv2d_backward(&geom, tx.data(), tw.data(), g.data(), *theta);
            accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
            accumulate(grads, *w, Tensor::from_parts(tw.shape().to_vec(), gw));
            if let Some(b) = bias {
                let gb = ops::conv2d_bias_backward(&geom, g.data());
                accumulate(grads, *b, Tensor::from_parts(vec![geom.out_ch], gb));
            }
        }
        Op::Sigmoid(a) => accumulate(grads, *a, zip_map(g, out, |g, y| g * y * (1.0 - y))),
        Op::Relu(a) => accumulate(
            grads,
            *a,
            zip_map(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
        ),
        Op::Gelu(a) => accumulate(grads, *a, zip_map(g, val(*a), |g, x| g * ops::gelu_grad(x))),
        Op::Exp(a) => accumulate(grads, *a, zip_map(g, out, |g, y| g * y)),
        Op::Log(a) => accumulate(grads, *a, zip_map(g, val(*a), |g, x| g / x)),
        Op::Mean(a) => {
            let n = val(*a).numel() as f64;
            accumulate(grads, *a, Tensor::full(val(*a).shape(), g.data()[0] / n));
        }
        Op::Sum(a) => accumulate(grads, *a, Tensor::full(val(*a).shape(), g.data()[0])),
        Op::ConcatChannels(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (ga, gb) = ops::split_channels(g.data(), sa, sb);
            accumulate(grads, *a, Tensor::from_parts(sa.to_vec(), ga));
            accumulate(grads, *b, Tensor::from_parts(sb.to_vec(), gb));
        }
        Op::ConcatCols(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (ga, gb) = ops::split_cols(g.data(), sa[0], sa[1], sb[1]);
            accumulate(grads, *a, Tensor::from_parts(sa.to_vec(), ga));
            accumulate(grads, *b, Tensor::from_parts(sb.to_vec(), gb));
        }
        Op::ConcatRows(a, b) => {
            let na = val(*a).numel();
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            accumulate(grads, *a, Tensor::from_parts(sa.to_vec(), g.data()[..na].to_vec()));
            accumulate(grads, *b, Tensor::from_parts(sb.to_vec(), g.data()[na..].to_vec()));
        }
        Op::SliceRows(a, start) => {
            let src = val(*a);
            let row: usize = src.shape()[1..].iter().product();
            let mut ga = vec![0.0; src.numel()];
            ga[start * row..start * row + g.numel()].copy_from_slice(g.data());
            accumulate(grads, *a, Tensor::from_parts(src.shape().to_vec(), ga));
        }
        Op::SliceChannels(a, start) => {
            let src = val(*a);
            let ga = ops::unslice_channels(g.data(), src.shape(), out.shape()[1], *start);
            accumulate(grads, *a, Tensor::from_parts(src.shape().to_vec(), ga));
        }
        Op::L2Norm(a) => {
            let y = out.data()[0];
            let gv = g.data()[0];
            accumulate(grads, *a, val(*a).map(|x| gv * x / y));
        }
        Op::Cosine(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (na, nb) = (ta.norm(), tb.norm());
            let c = out.data()[0];
            let gv = g.data()[0];
            let ga = zip_map(ta, tb, |x, y| gv * (y / (na * nb) - c * x / (na * na)));
            let gb = zip_map(tb, ta, |y, x| gv * (x / (na * nb) - c * y / (nb * nb)));
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::NormalizeRows(a) => {
            let src = val(*a);
            accumulate(grads, *a, ops::normalize_rows_backward(src, out, g));
        }
        Op::SoftmaxRows(a) => {
            let cols = out.shape()[1];
            let mut ga = vec![0.0; out.numel()];
            for ((gr, yr), dst) in g
                .data()
                .chunks(cols)
                .zip(out.data().chunks(cols))
                .zip(ga.chunks_mut(cols))
            {
                let s: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((d, g), y) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = y * (g - s);
                }
            }
            accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), ga));
        }
        Op::LogSoftmaxRows(a) => {
            let cols = out.shape()[1];
            let mut ga = vec![0.0; out.numel()];
            for ((gr, yr), dst) in g
                .data()
                .chunks(cols)
                .zip(out.data().chunks(cols))
                .zip(ga.chunks_mut(cols))
            {
                let s: f64 = gr.iter().sum();
                for ((d, g), y) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = g - y.exp() * s;
                }
            }
            accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), ga));
        }
        Op::LayerNormRows(a, eps) => {
            accumulate(grads, *a, ops::layer_norm_backward(val(*a), g, *eps));
        }
        Op::BroadcastRows(a) => {
            let d = val(*a).numel();
            let mut ga = vec![0.0; d];
            for r in g.data().chunks(d) {
                for (acc, v) in ga.iter_mut().zip(r) {
                    *acc += v;
                }
            }
            accumulate(grads, *a, Tensor::from_parts(val(*a).shape().to_vec(), ga));
        }
        Op::RepeatChannels(a) => {
            let src = val(*a);
            let (b, c) = (out.shape()[0], out.shape()[1]);
            let plane = src.numel() / b;
            let mut ga = vec![0.0; src.numel()];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * plane;
                    for (acc, v) in ga[bi * plane..(bi + 1) * plane]
                        .iter_mut()
                        .zip(&g.data()[off..off + plane])
                    {
                        *acc += v;
                    }
                }
            }
            accumulate(grads, *a, Tensor::from_parts(src.shape().to_vec(), ga));
        }
        Op::PermuteRows(a, perm) => {
            let row = out.numel() / perm.len();
            let mut ga = vec![0.0; out.numel()];
            for (i, &p) in perm.iter().enumerate() {
                for k in 0..row {
                    ga[p * row + k] += g.data()[i * row + k];
                }
            }
            accumulate(grads, *a, Tensor::from_parts(val(*a).shape().to_vec(), ga));
        }
        Op::Gather(a, idx) => {
            let mut ga = vec![0.0; val(*a).numel()];
            for (k, &i) in idx.iter().enumerate() {
                ga[i] += g.data()[k];
            }
            accumulate(grads, *a, Tensor::from_parts(val(*a).shape().to_vec(), ga));
        }
    }
}

/// Result of a reverse pass: gradient per node, zero for unreachable nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zeros when the loss does not depend on it.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        self.wrt_id(var.id())
    }

    pub fn wrt_id(&self, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id]))
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.grads[id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id]))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.with_value(|t| t.numel())
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(|t| t.item())
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{op}: operands on different tapes")))
        }
    }
}
