use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{shape_err, AutodiffError, Result};
use crate::ops::{self, Activation, ConvDims, LinearDims, Reduction};
use crate::tensor::{axis_extents, Tensor};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Records primitive operations in evaluation order so that gradients can be
/// propagated backwards from any scalar node.
///
/// A tape is single-owner and not `Sync`; build one per forward pass.
pub struct Tape {
    id: usize,
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    id: usize,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: usize },
    Conv2d { x: usize, k: usize, b: usize, dims: ConvDims },
    Act { x: usize, kind: Activation },
    Softmax { x: usize, axis: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Exp { x: usize },
    Sum { x: usize },
    Norm { x: usize },
    Reshape { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Mse { a: usize, b: usize, div: f64 },
    CrossEntropy { logits: usize, targets: Rc<[usize]>, div: f64 },
    Kl { mu: usize, logvar: usize, div: f64 },
}

impl Op {
    fn operands(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { x, k, b, .. } => vec![*x, *k, *b],
            Op::Act { x, .. }
            | Op::Softmax { x, .. }
            | Op::Scale { x, .. }
            | Op::Exp { x }
            | Op::Sum { x }
            | Op::Norm { x }
            | Op::Reshape { x }
            | Op::Narrow { x, .. } => vec![*x],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Mse { a, b, .. } => {
                vec![*a, *b]
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Kl { mu, logvar, .. } => vec![*mu, *logvar],
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    tape: usize,
}

impl Gradients {
    /// Gradient of the seed with respect to `v`, if `v` requires gradients
    /// and lies upstream of the seed.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.check(v).expect("var from another tape");
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn push(&self, t: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            id: nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.borrow().len() {
            return Err(AutodiffError::Contract("var does not belong to this tape".into()));
        }
        Ok(())
    }

    fn record(&self, t: Tensor, op: Op) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.operands().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(t, op, requires_grad)
    }

    fn vals<const N: usize>(&self, vars: [Var; N]) -> Result<[Rc<Tensor>; N]> {
        for v in vars {
            self.check(v)?;
        }
        let nodes = self.nodes.borrow();
        Ok(vars.map(|v| Rc::clone(&nodes[v.id].value)))
    }

    /// `x · w + b` for `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [xv, wv, bv] = self.vals([x, w, b])?;
        let (xs, ws, bs) = (xv.shape(), wv.shape(), bv.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err("linear", format!("x [batch, {}]", ws.get(0).copied().unwrap_or(0)), xs));
        }
        if bs != [ws[1]] {
            return Err(shape_err("linear", format!("bias [{}]", ws[1]), bs));
        }
        let d = LinearDims {
            batch: xs[0],
            inputs: xs[1],
            outputs: ws[1],
        };
        let y = ops::linear_forward(&d, xv.data(), wv.data(), bv.data());
        let t = Tensor::new(vec![d.batch, d.outputs], y)?;
        Ok(self.record(t, Op::Linear { x: x.id, w: w.id, b: b.id }))
    }

    /// 2-D cross-correlation: `x: [batch, c_in, h, w]`,
    /// `kernel: [c_out, c_in, kh, kw]`, `bias: [c_out]`.
    pub fn conv2d(&self, x: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(AutodiffError::Parameter {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let [xv, kv, bv] = self.vals([x, kernel, bias])?;
        let (xs, ks) = (xv.shape(), kv.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(shape_err("conv2d", format!("x [batch, {}, h, w]", ks.get(1).copied().unwrap_or(0)), xs));
        }
        if bv.shape() != [ks[0]] {
            return Err(shape_err("conv2d", format!("bias [{}]", ks[0]), bv.shape()));
        }
        let (ph, pw) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if ph < ks[2] || pw < ks[3] {
            return Err(shape_err("conv2d", "input at least as large as the kernel", xs));
        }
        let dims = ConvDims {
            batch: xs[0],
            in_ch: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_ch: ks[0],
            k_h: ks[2],
            k_w: ks[3],
            out_h: (ph - ks[2]) / stride + 1,
            out_w: (pw - ks[3]) / stride + 1,
            stride,
            padding,
        };
        let y = ops::conv_forward(&dims, xv.data(), kv.data(), bv.data());
        let t = Tensor::new(vec![dims.batch, dims.out_ch, dims.out_h, dims.out_w], y)?;
        Ok(self.record(
            t,
            Op::Conv2d {
                x: x.id,
                k: kernel.id,
                b: bias.id,
                dims,
            },
        ))
    }

    pub fn activation(&self, x: Var, kind: Activation) -> Result<Var> {
        let [xv] = self.vals([x])?;
        Ok(self.record(xv.map(|v| kind.apply(v)), Op::Act { x: x.id, kind }))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let [xv] = self.vals([x])?;
        if axis >= xv.shape().len() {
            return Err(shape_err("softmax", format!("more than {axis} axes"), xv.shape()));
        }
        let (outer, dim, inner) = axis_extents(xv.shape(), axis);
        let y = ops::softmax(xv.data(), outer, dim, inner);
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.record(t, Op::Softmax { x: x.id, axis }))
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, usize, usize)> {
        let [av, bv] = self.vals([a, b])?;
        if av.shape() != bv.shape() {
            return Err(shape_err(name, format!("{:?}", av.shape()), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(av.shape().to_vec(), data)?, a.id, b.id))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.record(t, Op::Add { a, b }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.record(t, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.record(t, Op::Mul { a, b }))
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        let [xv] = self.vals([x])?;
        Ok(self.record(xv.map(|v| v * c), Op::Scale { x: x.id, c }))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        let [xv] = self.vals([x])?;
        Ok(self.record(xv.map(f64::exp), Op::Exp { x: x.id }))
    }

    /// Sum of all elements.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let [xv] = self.vals([x])?;
        let s = xv.data().iter().sum();
        Ok(self.record(Tensor::scalar(s), Op::Sum { x: x.id }))
    }

    /// Euclidean norm of all elements.
    pub fn norm(&self, x: Var) -> Result<Var> {
        let [xv] = self.vals([x])?;
        let n = xv.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(self.record(Tensor::scalar(n), Op::Norm { x: x.id }))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let [xv] = self.vals([x])?;
        let t = xv.reshape(shape)?;
        Ok(self.record(t, Op::Reshape { x: x.id }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::Contract("concat of zero tensors".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let values: Vec<Rc<Tensor>> = {
            let nodes = self.nodes.borrow();
            parts.iter().map(|p| Rc::clone(&nodes[p.id].value)).collect()
        };
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("more than {axis} axes"), &base));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let conforms = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !conforms {
                return Err(shape_err("concat", format!("{base:?} off axis {axis}"), s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let span = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.record(
            t,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let [xv] = self.vals([x])?;
        let s = xv.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err("narrow", format!("axis {axis} covering {start}..{}", start + len), s));
        }
        let (outer, dim, inner) = axis_extents(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.record(t, Op::Narrow { x: x.id, axis, start }))
    }

    /// Squared error between equally shaped tensors.
    pub fn mse(&self, a: Var, b: Var, reduction: Reduction) -> Result<Var> {
        let [av, bv] = self.vals([a, b])?;
        if av.shape() != bv.shape() {
            return Err(shape_err("mse", format!("{:?}", av.shape()), bv.shape()));
        }
        let div = reduction.divisor(av.numel(), av.shape()[0]);
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.record(Tensor::scalar(s / div), Op::Mse { a: a.id, b: b.id, div }))
    }

    /// Softmax cross-entropy. `logits: [batch, classes, ...]` with the class
    /// axis at 1; `targets` holds one class index per (batch, ...) position in
    /// row-major order.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let [lv] = self.vals([logits])?;
        let s = lv.shape();
        if s.len() < 2 {
            return Err(shape_err("cross_entropy", "[batch, classes, ...]", s));
        }
        let (batch, classes) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if targets.len() != batch * inner {
            return Err(AutodiffError::Shape {
                op: "cross_entropy",
                expected: format!("{} targets", batch * inner),
                got: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(AutodiffError::Parameter {
                op: "cross_entropy",
                msg: format!("class index {bad} out of range for {classes} classes"),
            });
        }
        let x = lv.data();
        let mut total = 0.0;
        for n in 0..batch {
            for i in 0..inner {
                let idx = |c: usize| (n * classes + c) * inner + i;
                let max = (0..classes).map(|c| x[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..classes).map(|c| (x[idx(c)] - max).exp()).sum::<f64>().ln();
                total += lse - x[idx(targets[n * inner + i])];
            }
        }
        let div = reduction.divisor(targets.len(), batch);
        Ok(self.record(
            Tensor::scalar(total / div),
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.into(),
                div,
            },
        ))
    }

    /// KL divergence of `N(mu, exp(logvar))` from the standard normal,
    /// summed over elements then reduced.
    pub fn gaussian_kl(&self, mu: Var, logvar: Var, reduction: Reduction) -> Result<Var> {
        let [mv, lv] = self.vals([mu, logvar])?;
        if mv.shape() != lv.shape() {
            return Err(shape_err("gaussian_kl", format!("{:?}", mv.shape()), lv.shape()));
        }
        let s: f64 = mv
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&m, &l)| 0.5 * (m * m + l.exp() - 1.0 - l))
            .sum();
        let div = reduction.divisor(mv.numel(), mv.shape()[0]);
        Ok(self.record(
            Tensor::scalar(s / div),
            Op::Kl {
                mu: mu.id,
                logvar: logvar.id,
                div,
            },
        ))
    }

    /// Reverse sweep from a scalar `seed`.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        self.check(seed)?;
        let nodes = self.nodes.borrow();
        if !nodes[seed.id].value.is_scalar() {
            return Err(AutodiffError::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                nodes[seed.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[seed.id] = Some(vec![1.0]);
        for id in (0..=seed.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, &mut grads, node, &g);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads, tape: self.id })
    }
}

/// Runs `f` on the gradient buffer of `id` if that node tracks gradients.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(buf);
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |i: usize| nodes[i].value.as_ref();
    match &node.op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let (xs, ws) = (val(*x).shape(), val(*w).shape());
            let d = LinearDims {
                batch: xs[0],
                inputs: xs[1],
                outputs: ws[1],
            };
            accumulate(nodes, grads, *x, |gx| ops::linear_backward_input(&d, g, val(*w).data(), gx));
            accumulate(nodes, grads, *w, |gw| ops::linear_backward_weight(&d, g, val(*x).data(), gw));
            accumulate(nodes, grads, *b, |gb| ops::linear_backward_bias(&d, g, gb));
        }
        Op::Conv2d { x, k, b, dims } => {
            let (xd, kd) = (val(*x).data(), val(*k).data());
            let mut gx = nodes[*x].requires_grad.then(|| grads[*x].take().unwrap_or_else(|| vec![0.0; xd.len()]));
            let mut gk = nodes[*k].requires_grad.then(|| grads[*k].take().unwrap_or_else(|| vec![0.0; kd.len()]));
            let mut gb = nodes[*b].requires_grad.then(|| grads[*b].take().unwrap_or_else(|| vec![0.0; dims.out_ch]));
            ops::conv_backward(dims, g, xd, kd, gx.as_deref_mut(), gk.as_deref_mut(), gb.as_deref_mut());
            if let Some(v) = gx {
                grads[*x] = Some(v);
            }
            if let Some(v) = gk {
                grads[*k] = Some(v);
            }
            if let Some(v) = gb {
                grads[*b] = Some(v);
            }
        }
        Op::Act { x, kind } => {
            let (xd, yd) = (val(*x).data(), node.value.data());
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * kind.derivative(xd[i], yd[i]);
                }
            });
        }
        Op::Softmax { x, axis } => {
            let (outer, dim, inner) = axis_extents(node.value.shape(), *axis);
            accumulate(nodes, grads, *x, |gx| {
                ops::softmax_backward(node.value.data(), g, gx, outer, dim, inner)
            });
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g, 1.0));
            accumulate(nodes, grads, *b, |gb| add_into(gb, g, 1.0));
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g, 1.0));
            accumulate(nodes, grads, *b, |gb| add_into(gb, g, -1.0));
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bd[i];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * ad[i];
                }
            });
        }
        Op::Scale { x, c } => accumulate(nodes, grads, *x, |gx| add_into(gx, g, *c)),
        Op::Exp { x } => {
            let yd = node.value.data();
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * yd[i];
                }
            });
        }
        Op::Sum { x } => accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
        Op::Norm { x } => {
            let n = node.value.item();
            if n > 0.0 {
                let xd = val(*x).data();
                accumulate(nodes, grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[0] * xd[i] / n;
                    }
                });
            }
        }
        Op::Reshape { x } => accumulate(nodes, grads, *x, |gx| add_into(gx, g, 1.0)),
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_extents(node.value.shape(), *axis);
            let total = node.value.shape()[*axis];
            let mut offset = 0;
            for &p in parts {
                let span = val(p).shape()[*axis] * inner;
                accumulate(nodes, grads, p, |gp| {
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset..][..span];
                        add_into(&mut gp[o * span..(o + 1) * span], src, 1.0);
                    }
                });
                offset += span;
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, dim, inner) = axis_extents(val(*x).shape(), *axis);
            let len = node.value.shape()[*axis];
            accumulate(nodes, grads, *x, |gx| {
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    add_into(&mut gx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner], 1.0);
                }
            });
        }
        Op::Mse { a, b, div } => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let c = 2.0 * g[0] / div;
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += c * (ad[i] - bd[i]);
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] -= c * (ad[i] - bd[i]);
                }
            });
        }
        Op::CrossEntropy { logits, targets, div } => {
            let lv = val(*logits);
            let s = lv.shape();
            let (outer, classes, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
            let probs = ops::softmax(lv.data(), outer, classes, inner);
            let c = g[0] / div;
            accumulate(nodes, grads, *logits, |gl| {
                for n in 0..outer {
                    for i in 0..inner {
                        let t = targets[n * inner + i];
                        for k in 0..classes {
                            let idx = (n * classes + k) * inner + i;
                            let onehot = if k == t { 1.0 } else { 0.0 };
                            gl[idx] += c * (probs[idx] - onehot);
                        }
                    }
                }
            });
        }
        Op::Kl { mu, logvar, div } => {
            let (md, ld) = (val(*mu).data(), val(*logvar).data());
            let c = g[0] / div;
            accumulate(nodes, grads, *mu, |gm| {
                for i in 0..gm.len() {
                    gm[i] += c * md[i];
                }
            });
            accumulate(nodes, grads, *logvar, |gl| {
                for i in 0..gl.len() {
                    gl[i] += c * 0.5 * (ld[i].exp() - 1.0);
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}
