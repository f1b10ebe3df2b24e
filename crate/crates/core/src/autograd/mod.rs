//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! walks the record in reverse and returns [`Gradients`] for every leaf that
//! requires them. Tapes are short-lived: build one per optimization step.
//!
//! Shape errors inside a tape operation are programming errors and panic;
//! public entry points of the network and loss modules validate their
//! inputs and return [`crate::Error`] instead.

mod conv;
mod elementwise;
mod fused;
mod layout;

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub use conv::ConvGeom;
pub use layout::PadMode;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary<T> {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(T),
    Abs,
    Square,
    Softplus,
    Recip,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    /// `x + s` with `s` a one-element tensor.
    AddScalar(Var, Var),
    /// `x * s` with `s` a one-element tensor.
    MulScalar(Var, Var),
    AddConst(Var),
    MulConst(Var, T),
    Unary(Var, Unary<T>),
    Sum(Var),
    Mean(Var),
    /// `out[i] = src[index[i]]`.
    Gather(Var, Vec<u32>),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        input: Var,
        inv_std: Vec<T>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    AddRowBias(Var, Var),
    L2NormalizeRows {
        input: Var,
        norms: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    frozen: Vec<u16>,
    params: BTreeMap<(u16, usize), Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            frozen: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Parameters of `store` inserted from now on are treated as constants.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        if !self.frozen.contains(&store.group()) {
            self.frozen.push(store.group());
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients (when the tape records them).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push_raw(value, Op::Leaf, rg)
    }

    /// Inserts parameter `id` of `store` as a leaf. Repeated insertion of the
    /// same parameter returns the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.group(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let rg = self.grad_enabled && !self.frozen.contains(&store.group());
        let v = self.push_raw(store.get(id).clone(), Op::Leaf, rg);
        self.params.insert(key, v);
        v
    }

    /// Copies the value of `v` into a fresh constant, severing the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `value` as the result of `op` applied to `inputs`.
    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nodes outside the differentiable graph keep no backward context.
        let op = if rg { op } else { Op::Leaf };
        self.push_raw(value, op, rg)
    }

    /// Gradients of the one-element `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward needs a one-element loss"
        );
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |ga| add_into(ga, g));
                self.acc_with(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, |ga| add_into(ga, g));
                self.acc_with(grads, *b, |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                self.acc_with(grads, *a, |ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.nodes[b.0].value.data();
                self.acc_with(grads, *a, |ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s / y;
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for (((d, &s), &y), &o) in gb.iter_mut().zip(g).zip(bv).zip(out) {
                        *d -= s * o / y;
                    }
                });
            }
            Op::Minimum(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                self.acc_with(grads, *a, |ga| {
                    for (((d, &s), &x), &y) in ga.iter_mut().zip(g).zip(av).zip(bv) {
                        if x <= y {
                            *d += s;
                        }
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for (((d, &s), &x), &y) in gb.iter_mut().zip(g).zip(av).zip(bv) {
                        if y < x {
                            *d += s;
                        }
                    }
                });
            }
            Op::AddScalar(x, s) => {
                self.acc_with(grads, *x, |gx| add_into(gx, g));
                self.acc_with(grads, *s, |gs| gs[0] += g.iter().copied().sum());
            }
            Op::MulScalar(x, s) => {
                let xv = self.nodes[x.0].value.data();
                let sv = self.nodes[s.0].value.item();
                self.acc_with(grads, *x, |gx| {
                    for (d, &v) in gx.iter_mut().zip(g) {
                        *d += v * sv;
                    }
                });
                self.acc_with(grads, *s, |gs| {
                    gs[0] += g.iter().zip(xv).map(|(&a, &b)| a * b).sum();
                });
            }
            Op::AddConst(x) => self.acc_with(grads, *x, |gx| add_into(gx, g)),
            Op::MulConst(x, c) => self.acc_with(grads, *x, |gx| {
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d += v * *c;
                }
            }),
            Op::Unary(x, kind) => {
                let xv = self.nodes[x.0].value.data();
                self.acc_with(grads, *x, |gx| elementwise::unary_backward(*kind, xv, out, g, gx));
            }
            Op::Sum(x) => self.acc_with(grads, *x, |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = T::of(self.nodes[x.0].value.numel() as f64);
                self.acc_with(grads, *x, |gx| {
                    let v = g[0] / n;
                    for d in gx.iter_mut() {
                        *d += v;
                    }
                });
            }
            Op::Gather(src, index) => self.acc_with(grads, *src, |gs| {
                for (&ix, &v) in index.iter().zip(g) {
                    gs[ix as usize] += v;
                }
            }),
            Op::Reshape(x) => self.acc_with(grads, *x, |gx| add_into(gx, g)),
            Op::ConcatChannels(parts) => layout::concat_backward(self, parts, out_shape(node), g, grads),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => conv::conv2d_backward(self, *input, *weight, *bias, geom, g, grads),
            Op::InstanceNorm { input, inv_std } => {
                let shape = node.value.shape();
                self.acc_with(grads, *input, |gx| fused::instance_norm_backward(shape, out, inv_std, g, gx));
            }
            Op::MaxPool2 { input, argmax } => self.acc_with(grads, *input, |gx| {
                for (&ix, &v) in argmax.iter().zip(g) {
                    gx[ix as usize] += v;
                }
            }),
            Op::AvgPool2(x) => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                self.acc_with(grads, *x, |gx| layout::avg_pool2_backward(&xs, g, gx));
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.nodes[x.0].value.dims4().expect("rank-4 input");
                let hw = h * w;
                let inv = T::one() / T::of(hw as f64);
                self.acc_with(grads, *x, |gx| {
                    for (plane, &v) in gx.chunks_mut(hw).zip(g) {
                        for d in plane {
                            *d += v * inv;
                        }
                    }
                });
            }
            Op::MatMul { a, b, ta, tb } => fused::matmul_backward(self, *a, *b, *ta, *tb, g, grads),
            Op::AddRowBias(x, b) => {
                let cols = self.nodes[b.0].value.numel();
                self.acc_with(grads, *x, |gx| add_into(gx, g));
                self.acc_with(grads, *b, |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::L2NormalizeRows { input, norms } => {
                let cols = node.value.shape()[1];
                self.acc_with(grads, *input, |gx| fused::l2_normalize_backward(cols, out, norms, g, gx));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let cols = probs.len() / rows.max(1);
                let scale = g[0] / T::of(rows as f64);
                self.acc_with(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &probs[r * cols..(r + 1) * cols];
                        let dst = &mut gl[r * cols..(r + 1) * cols];
                        for (d, &p) in dst.iter_mut().zip(row) {
                            *d += scale * p;
                        }
                        dst[t as usize] -= scale;
                    }
                });
            }
        }
    }

    /// Runs `f` on the gradient buffer of `v` if `v` participates in the graph.
    pub(crate) fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
        f(buf);
    }

    pub(crate) fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }
}

fn out_shape<T: Real>(node: &Node<T>) -> &[usize] {
    node.value.shape()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<(u16, usize), Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, `None` when it was outside the graph.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients of `store`, indexed like the store.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Vec<T>>> {
        (0..store.len())
            .map(|i| {
                self.params
                    .get(&(store.group(), i))
                    .and_then(|v| self.grads[v.0].clone())
            })
            .collect()
    }

    /// Euclidean norm of all gradients that reached parameters of `store`.
    pub fn store_norm(&self, store: &ParamStore<T>) -> T {
        let mut acc = T::zero();
        for i in 0..store.len() {
            if let Some(g) = self.params.get(&(store.group(), i)).and_then(|v| self.grads[v.0].as_ref()) {
                for &x in g {
                    acc += x * x;
                }
            }
        }
        acc.sqrt()
    }
}
