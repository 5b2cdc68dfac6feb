//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass, in creation
//! order, together with a closure computing the vector-Jacobian product of
//! each operation. [`Var`] is a cheap handle into the tape. Nodes that do not
//! depend on any gradient-requiring leaf store no closure.
//!
//! Tensors laid out as `[B, C, L]` are (batch, channel, time).

use std::cell::{Ref, RefCell};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::RealFft;
use crate::tensor::{gemm, Tensor};

/// Data handed to a backward closure.
pub struct Backprop<'a> {
    /// Gradient of the root with respect to this node's output.
    pub grad: &'a [f64],
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    /// Whether each input needs a gradient; closures may skip the others.
    pub needs: Vec<bool>,
}

/// Returns one optional gradient per input, in input order.
pub type BackwardFn = Box<dyn Fn(&Backprop<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients of the root with respect to every gradient-requiring leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
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

    /// A trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of a custom operation.
    ///
    /// Fails with [`Error::NonFinite`] if `value` holds NaN or infinity.
    pub fn record(
        &self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var<'_>],
        backward: BackwardFn,
    ) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op));
        }
        let mut nodes = self.nodes.borrow_mut();
        let parents: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if !std::ptr::eq(root.tape, self) || root.id >= nodes.len() {
            return Err(Error::Contract("root is not on this tape".into()));
        }
        if !nodes[root.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = Backprop {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), nodes[p].value.numel());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match g {
                Some(g) if node.parents.is_empty() && node.requires_grad => {
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ if node.parents.is_empty() && node.requires_grad => {
                    Some(Tensor::zeros(node.value.shape()))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn bcl(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [b, c, l] => Ok((*b, *c, *l)),
        s => Err(Error::dim(op, format!("expected [batch, channel, time], got {s:?}"))),
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

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }

    fn record(&self, op: &'static str, value: Tensor, inputs: &[Var<'t>], f: BackwardFn) -> Result<Var<'t>> {
        self.tape.record(op, value, inputs, f)
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };
        self.record(
            op,
            out,
            &[*self],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let y = ctx.output.data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    fn zip(
        &self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(&[f64], &[f64], &[f64], usize) -> Vec<f64> + 'static,
    ) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape(op, &a, &b)?;
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        self.record(
            op,
            out,
            &[*self, other],
            Box::new(move |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                (0..2)
                    .map(|i| ctx.needs[i].then(|| back(ctx.grad, a, b, i)))
                    .collect()
            }),
        )
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "add", |a, b| a + b, |g, _, _, _| g.to_vec())
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "sub", |a, b| a - b, |g, _, _, i| {
            if i == 0 {
                g.to_vec()
            } else {
                g.iter().map(|v| -v).collect()
            }
        })
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "mul", |a, b| a * b, |g, a, b, i| {
            let o = if i == 0 { b } else { a };
            g.iter().zip(o).map(|(g, o)| g * o).collect()
        })
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.map("scale", |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.map("add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.map("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.map("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.map("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self) -> Result<Var<'t>> {
        self.map("swish", |x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.map("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.record(
            "sum",
            Tensor::scalar(s),
            &[*self],
            Box::new(|ctx| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])]),
        )
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().clone().reshape(shape)?;
        self.record("reshape", out, &[*self], Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (out, m, k, n) = {
            let (a, b) = (self.value(), other.value());
            let (m, k) = a.as_matrix("matmul")?;
            let n = b.as_matrix("matmul")?.1;
            (a.matmul(&b)?, m, k, n)
        };
        self.record(
            "matmul",
            out,
            &[*self, other],
            Box::new(move |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let da = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, ctx.grad, false, b, true, &mut d, false);
                    d
                });
                let db = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, a, true, ctx.grad, false, &mut d, false);
                    d
                });
                vec![da, db]
            }),
        )
    }

    /// Affine map of `[B, d_in]` rows: `x W^T + b` with `W: [d_out, d_in]`.
    pub fn linear(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (out, rows, d_in, d_out) = {
            let (x, w, b) = (self.value(), weight.value(), bias.value());
            let (rows, d_in) = x.as_matrix("linear")?;
            let (d_out, w_in) = w.as_matrix("linear")?;
            if w_in != d_in || b.shape() != [d_out] {
                return Err(Error::dim(
                    "linear",
                    format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
                ));
            }
            let mut y = vec![0.0; rows * d_out];
            for r in 0..rows {
                y[r * d_out..(r + 1) * d_out].copy_from_slice(b.data());
            }
            gemm(rows, d_in, d_out, x.data(), false, w.data(), true, &mut y, true);
            (Tensor::from_parts(vec![rows, d_out], y), rows, d_in, d_out)
        };
        self.record(
            "linear",
            out,
            &[*self, weight, bias],
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let dx = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; rows * d_in];
                    gemm(rows, d_out, d_in, g, false, w, false, &mut d, false);
                    d
                });
                let dw = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; d_out * d_in];
                    gemm(d_out, rows, d_in, g, true, x, false, &mut d, false);
                    d
                });
                let db = ctx.needs[2].then(|| {
                    let mut d = vec![0.0; d_out];
                    for row in g.chunks(d_out) {
                        d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    d
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// Pointwise (kernel size 1) convolution of `[B, C_in, L]` by
    /// `W: [C_out, C_in]` plus a per-output-channel bias.
    pub fn conv1x1(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (out, nb, c_in, c_out, len) = {
            let (x, w, b) = (self.value(), weight.value(), bias.value());
            let (nb, c_in, len) = bcl("conv1x1", &x)?;
            let (c_out, w_in) = w.as_matrix("conv1x1")?;
            if w_in != c_in || b.shape() != [c_out] {
                return Err(Error::dim(
                    "conv1x1",
                    format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
                ));
            }
            let mut y = vec![0.0; nb * c_out * len];
            for (yb, xb) in y.chunks_mut(c_out * len).zip(x.data().chunks(c_in * len)) {
                for (row, &bias) in yb.chunks_mut(len).zip(b.data()) {
                    row.fill(bias);
                }
                gemm(c_out, c_in, len, w.data(), false, xb, false, yb, true);
            }
            (Tensor::from_parts(vec![nb, c_out, len], y), nb, c_in, c_out, len)
        };
        self.record(
            "conv1x1",
            out,
            &[*self, weight, bias],
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let dx = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; nb * c_in * len];
                    for (db, gb) in d.chunks_mut(c_in * len).zip(g.chunks(c_out * len)) {
                        gemm(c_in, c_out, len, w, true, gb, false, db, false);
                    }
                    d
                });
                let dw = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; c_out * c_in];
                    for (xb, gb) in x.chunks(c_in * len).zip(g.chunks(c_out * len)) {
                        gemm(c_out, len, c_in, gb, false, xb, true, &mut d, true);
                    }
                    d
                });
                let dbias = ctx.needs[2].then(|| {
                    let mut d = vec![0.0; c_out];
                    for gb in g.chunks(c_out * len) {
                        for (acc, row) in d.iter_mut().zip(gb.chunks(len)) {
                            *acc += row.iter().sum::<f64>();
                        }
                    }
                    d
                });
                vec![dx, dw, dbias]
            }),
        )
    }

    /// Adds a per-(batch, channel) vector `[B, C]` to every time step of `[B, C, L]`.
    pub fn add_channel_bias(&self, e: Var<'t>) -> Result<Var<'t>> {
        let (out, len) = {
            let (x, ev) = (self.value(), e.value());
            let (nb, c, len) = bcl("add_channel_bias", &x)?;
            if ev.shape() != [nb, c] {
                return Err(Error::dim(
                    "add_channel_bias",
                    format!("x {:?}, bias {:?}", x.shape(), ev.shape()),
                ));
            }
            let mut y = x.data().to_vec();
            for (row, &v) in y.chunks_mut(len).zip(ev.data()) {
                row.iter_mut().for_each(|a| *a += v);
            }
            (Tensor::from_parts(x.shape().to_vec(), y), len)
        };
        self.record(
            "add_channel_bias",
            out,
            &[*self, e],
            Box::new(move |ctx| {
                let de = ctx.needs[1].then(|| ctx.grad.chunks(len).map(|r| r.iter().sum()).collect());
                vec![ctx.needs[0].then(|| ctx.grad.to_vec()), de]
            }),
        )
    }

    /// Layer normalization across channels at every (batch, time) position,
    /// followed by a per-channel gain and bias.
    pub fn layer_norm_channels(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (out, xhat, inv_std, nb, c, len) = {
            let (x, gv, bv) = (self.value(), gain.value(), bias.value());
            let (nb, c, len) = bcl("layer_norm", &x)?;
            if gv.shape() != [c] || bv.shape() != [c] {
                return Err(Error::dim(
                    "layer_norm",
                    format!("x {:?}, gain {:?}, bias {:?}", x.shape(), gv.shape(), bv.shape()),
                ));
            }
            let mut xhat = vec![0.0; nb * c * len];
            let mut inv_std = vec![0.0; nb * len];
            let mut y = vec![0.0; nb * c * len];
            for b in 0..nb {
                let xb = &x.data()[b * c * len..(b + 1) * c * len];
                let mut mean = vec![0.0; len];
                for row in xb.chunks(len) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= c as f64);
                let mut var = vec![0.0; len];
                for row in xb.chunks(len) {
                    var.iter_mut().zip(row.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
                }
                let istd = &mut inv_std[b * len..(b + 1) * len];
                istd.iter_mut().zip(&var).for_each(|(i, v)| *i = 1.0 / (v / c as f64 + eps).sqrt());
                for ch in 0..c {
                    let o = b * c * len + ch * len;
                    let (g, bb) = (gv.data()[ch], bv.data()[ch]);
                    for t in 0..len {
                        let h = (xb[ch * len + t] - mean[t]) * istd[t];
                        xhat[o + t] = h;
                        y[o + t] = g * h + bb;
                    }
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), y), xhat, inv_std, nb, c, len)
        };
        self.record(
            "layer_norm",
            out,
            &[*self, gain, bias],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let gain = ctx.inputs[1].data();
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for b in 0..nb {
                    for ch in 0..c {
                        let o = b * c * len + ch * len;
                        for t in 0..len {
                            dgain[ch] += g[o + t] * xhat[o + t];
                            dbias[ch] += g[o + t];
                        }
                    }
                }
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![0.0; nb * c * len];
                    for b in 0..nb {
                        let mut m1 = vec![0.0; len];
                        let mut m2 = vec![0.0; len];
                        for ch in 0..c {
                            let o = b * c * len + ch * len;
                            for t in 0..len {
                                let dh = g[o + t] * gain[ch];
                                m1[t] += dh;
                                m2[t] += dh * xhat[o + t];
                            }
                        }
                        for ch in 0..c {
                            let o = b * c * len + ch * len;
                            for t in 0..len {
                                let dh = g[o + t] * gain[ch];
                                dx[o + t] = inv_std[b * len + t]
                                    * (dh - m1[t] / c as f64 - xhat[o + t] * m2[t] / c as f64);
                            }
                        }
                    }
                    dx
                });
                vec![dx, ctx.needs[1].then_some(dgain), ctx.needs[2].then_some(dbias)]
            }),
        )
    }

    /// Channels `[start, end)` of a `[B, C, L]` tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (out, nb, c, len) = {
            let x = self.value();
            let (nb, c, len) = bcl("slice_channels", &x)?;
            if start >= end || end > c {
                return Err(Error::dim("slice_channels", format!("[{start}, {end}) of {c} channels")));
            }
            let w = end - start;
            let mut y = Vec::with_capacity(nb * w * len);
            for xb in x.data().chunks(c * len) {
                y.extend_from_slice(&xb[start * len..end * len]);
            }
            (Tensor::from_parts(vec![nb, w, len], y), nb, c, len)
        };
        self.record(
            "slice_channels",
            out,
            &[*self],
            Box::new(move |ctx| {
                let w = end - start;
                let mut d = vec![0.0; nb * c * len];
                for (db, gb) in d.chunks_mut(c * len).zip(ctx.grad.chunks(w * len)) {
                    db[start * len..end * len].copy_from_slice(gb);
                }
                vec![Some(d)]
            }),
        )
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (out, ca, cb, len) = {
            let (a, b) = (self.value(), other.value());
            let (na, ca, la) = bcl("concat_channels", &a)?;
            let (nb, cb, lb) = bcl("concat_channels", &b)?;
            if na != nb || la != lb {
                return Err(Error::dim("concat_channels", format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let mut y = Vec::with_capacity(na * (ca + cb) * la);
            for (xa, xb) in a.data().chunks(ca * la).zip(b.data().chunks(cb * la)) {
                y.extend_from_slice(xa);
                y.extend_from_slice(xb);
            }
            (Tensor::from_parts(vec![na, ca + cb, la], y), ca, cb, la)
        };
        self.record(
            "concat_channels",
            out,
            &[*self, other],
            Box::new(move |ctx| {
                let mut da = Vec::new();
                let mut db = Vec::new();
                for g in ctx.grad.chunks((ca + cb) * len) {
                    da.extend_from_slice(&g[..ca * len]);
                    db.extend_from_slice(&g[ca * len..]);
                }
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Reverses the time axis of `[B, C, L]`.
    pub fn flip_time(&self) -> Result<Var<'t>> {
        fn flip(data: &[f64], len: usize) -> Vec<f64> {
            let mut out = data.to_vec();
            out.chunks_mut(len).for_each(<[f64]>::reverse);
            out
        }
        let (out, len) = {
            let x = self.value();
            let (_, _, len) = bcl("flip_time", &x)?;
            (Tensor::from_parts(x.shape().to_vec(), flip(x.data(), len)), len)
        };
        self.record("flip_time", out, &[*self], Box::new(move |ctx| vec![Some(flip(ctx.grad, len))]))
    }

    /// `tanh(first half) * sigmoid(second half)` over the channel axis.
    pub fn gated_tanh(&self) -> Result<Var<'t>> {
        let (out, tanhs, gates, c, len) = {
            let x = self.value();
            let (nb, c2, len) = bcl("gated_tanh", &x)?;
            if c2 % 2 != 0 {
                return Err(Error::dim("gated_tanh", format!("odd channel count {c2}")));
            }
            let c = c2 / 2;
            let mut tanhs = Vec::with_capacity(nb * c * len);
            let mut gates = Vec::with_capacity(nb * c * len);
            for xb in x.data().chunks(c2 * len) {
                let (f, g) = xb.split_at(c * len);
                tanhs.extend(f.iter().map(|a| a.tanh()));
                gates.extend(g.iter().map(|b| sigmoid(*b)));
            }
            let y = tanhs.iter().zip(&gates).map(|(t, s)| t * s).collect();
            (Tensor::from_parts(vec![nb, c, len], y), tanhs, gates, c, len)
        };
        self.record(
            "gated_tanh",
            out,
            &[*self],
            Box::new(move |ctx| {
                let mut d = Vec::with_capacity(2 * tanhs.len());
                let rows = tanhs.chunks(c * len).zip(gates.chunks(c * len));
                for ((tb, sb), gb) in rows.zip(ctx.grad.chunks(c * len)) {
                    d.extend(tb.iter().zip(sb).zip(gb).map(|((t, s), g)| g * (1.0 - t * t) * s));
                    d.extend(tb.iter().zip(sb).zip(gb).map(|((t, s), g)| g * t * s * (1.0 - s)));
                }
                vec![Some(d)]
            }),
        )
    }

    /// Causal convolution of each channel of `x: [B, H, L]` with its own
    /// kernel `k: [H, L]`, plus feedthrough `d: [H]`:
    /// `y[b,h,t] = sum_{i<=t} k[h,i] x[b,h,t-i] + d[h] x[b,h,t]`.
    ///
    /// Evaluated through real FFTs of length `2L` (rounded up to a power of two).
    pub fn causal_conv(&self, kernel: Var<'t>, feedthrough: Var<'t>) -> Result<Var<'t>> {
        self.fft_conv(kernel, None, feedthrough)
    }

    /// [`Var::causal_conv`] plus an anti-causal term with kernel `kb: [H, L]`:
    /// `y[b,h,t] += sum_{t+i<L} kb[h,i] x[b,h,t+i]`.
    pub fn two_sided_conv(&self, kernel: Var<'t>, reverse_kernel: Var<'t>, feedthrough: Var<'t>) -> Result<Var<'t>> {
        self.fft_conv(kernel, Some(reverse_kernel), feedthrough)
    }

    fn fft_conv(&self, kernel: Var<'t>, reverse: Option<Var<'t>>, feedthrough: Var<'t>) -> Result<Var<'t>> {
        let (out, x_spec, k_spec, nb, h, len, plan) = {
            let (x, k, d) = (self.value(), kernel.value(), feedthrough.value());
            let (nb, h, len) = bcl("causal_conv", &x)?;
            let kb = reverse.map(|r| r.value());
            if k.shape() != [h, len] || d.shape() != [h] || kb.as_ref().is_some_and(|r| r.shape() != [h, len]) {
                return Err(Error::dim(
                    "causal_conv",
                    format!("x {:?}, kernel {:?}, d {:?}", x.shape(), k.shape(), d.shape()),
                ));
            }
            let n = (2 * len).next_power_of_two();
            let plan = RealFft::cached(n)?;
            let bins = plan.bins();
            let zero = Complex64::new(0.0, 0.0);
            let mut k_spec = vec![zero; h * bins];
            let mut circ = vec![0.0; n];
            for (i, (spec, row)) in k_spec.chunks_mut(bins).zip(k.data().chunks(len)).enumerate() {
                circ[..len].copy_from_slice(row);
                if let Some(kb) = &kb {
                    // lag -j sits at index n - j of the circular kernel
                    let rrow = &kb.data()[i * len..(i + 1) * len];
                    circ[0] += rrow[0];
                    for j in 1..len {
                        circ[n - j] = rrow[j];
                    }
                }
                plan.forward(&circ, spec);
            }
            let mut x_spec = vec![zero; nb * h * bins];
            let mut y = vec![0.0; nb * h * len];
            let mut prod = vec![zero; bins];
            for (i, ((xs, xrow), yrow)) in x_spec
                .chunks_mut(bins)
                .zip(x.data().chunks(len))
                .zip(y.chunks_mut(len))
                .enumerate()
            {
                let ch = i % h;
                plan.forward(xrow, xs);
                let ks = &k_spec[ch * bins..(ch + 1) * bins];
                prod.iter_mut().zip(xs.iter().zip(ks)).for_each(|(p, (a, b))| *p = a * b);
                plan.inverse(&prod, yrow);
                let dv = d.data()[ch];
                yrow.iter_mut().zip(xrow).for_each(|(o, v)| *o += dv * v);
            }
            (Tensor::from_parts(vec![nb, h, len], y), x_spec, k_spec, nb, h, len, plan)
        };
        let two_sided = reverse.is_some();
        let mut inputs = vec![*self, kernel, feedthrough];
        inputs.extend(reverse);
        self.record(
            if two_sided { "two_sided_conv" } else { "causal_conv" },
            out,
            &inputs,
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let d = ctx.inputs[2].data();
                let n = plan.len();
                let bins = plan.bins();
                let zero = Complex64::new(0.0, 0.0);
                let need_k = ctx.needs[1] || (two_sided && ctx.needs[3]);
                let mut dx = ctx.needs[0].then(|| vec![0.0; nb * h * len]);
                let mut dk_spec = vec![zero; h * bins];
                let mut dd = vec![0.0; h];
                let mut gs = vec![zero; bins];
                let mut prod = vec![zero; bins];
                for (i, (grow, xrow)) in ctx.grad.chunks(len).zip(x.chunks(len)).enumerate() {
                    let ch = i % h;
                    plan.forward(grow, &mut gs);
                    if need_k {
                        let xs = &x_spec[i * bins..(i + 1) * bins];
                        dk_spec[ch * bins..(ch + 1) * bins]
                            .iter_mut()
                            .zip(gs.iter().zip(xs))
                            .for_each(|(acc, (g, xv))| *acc += g * xv.conj());
                    }
                    if let Some(dx) = dx.as_mut() {
                        let ks = &k_spec[ch * bins..(ch + 1) * bins];
                        prod.iter_mut().zip(gs.iter().zip(ks)).for_each(|(p, (g, k))| *p = g * k.conj());
                        let out = &mut dx[i * len..(i + 1) * len];
                        plan.inverse(&prod, out);
                        out.iter_mut().zip(grow).for_each(|(o, g)| *o += d[ch] * g);
                    }
                    dd[ch] += grow.iter().zip(xrow).map(|(g, v)| g * v).sum::<f64>();
                }
                let mut dk = ctx.needs[1].then(|| vec![0.0; h * len]);
                let mut dkb = (two_sided && ctx.needs[3]).then(|| vec![0.0; h * len]);
                if need_k {
                    let mut circ = vec![0.0; n];
                    for (ch, spec) in dk_spec.chunks(bins).enumerate() {
                        plan.inverse(spec, &mut circ);
                        if let Some(dk) = dk.as_mut() {
                            dk[ch * len..(ch + 1) * len].copy_from_slice(&circ[..len]);
                        }
                        if let Some(dkb) = dkb.as_mut() {
                            let row = &mut dkb[ch * len..(ch + 1) * len];
                            row[0] = circ[0];
                            for j in 1..len {
                                row[j] = circ[n - j];
                            }
                        }
                    }
                }
                let mut grads = vec![dx, dk, ctx.needs[2].then_some(dd)];
                if two_sided {
                    grads.push(dkb);
                }
                grads
            }),
        )
    }
}

/// Central finite-difference checks of tape gradients.
pub mod gradcheck {
    use super::*;

    /// Relative error floor; differences below `FLOOR * tolerance` count as exact.
    pub const FLOOR: f64 = 1e-7;

    /// Worst relative error between the tape gradient and central
    /// differences with step `h`, per entry of `inputs`.
    ///
    /// The relative error of one scalar is `|a - n| / max(|a|, |n|, FLOOR)`.
    pub fn per_input(
        inputs: &[Tensor],
        h: f64,
        build: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&tape, &vars)?;
        let grads = root.backward()?;
        let eval = |ins: &mut [Tensor]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
            let v = build(&tape, &vars)?.value().item();
            Ok(v)
        };
        let mut work = inputs.to_vec();
        let mut out = Vec::with_capacity(inputs.len());
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            let mut worst: f64 = 0.0;
            for j in 0..inputs[i].numel() {
                let x = inputs[i].data()[j];
                work[i].data_mut()[j] = x + h;
                let plus = eval(&mut work)?;
                work[i].data_mut()[j] = x - h;
                let minus = eval(&mut work)?;
                work[i].data_mut()[j] = x;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.data()[j];
                let denom = a.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max((a - numeric).abs() / denom);
            }
            out.push(worst);
        }
        Ok(out)
    }

    /// Worst relative error over all inputs.
    pub fn check(
        inputs: &[Tensor],
        h: f64,
        build: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    ) -> f64 {
        per_input(inputs, h, build)
            .expect("gradient check failed to evaluate")
            .into_iter()
            .fold(0.0, f64::max)
    }
}
