//! Reverse-mode differentiation tape.
//!
//! Every op appends a node holding its forward value and enough information
//! to run its vector-Jacobian product. Inputs always carry smaller ids than
//! the node that consumes them, so a single descending sweep over node ids is
//! a valid reverse topological order.

use super::kernels::{self, ConvGeom};
use super::tensor::{axis_blocks, broadcast_shape, broadcast_strides, for_each_broadcast, strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise operations. Binary kinds broadcast; unary kinds ignore `b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Square,
    Sqrt,
    Exp,
    Ln,
    Sigmoid,
    Scale(f64),
    AddScalar(f64),
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(
            self,
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Relu,
    Square,
    Sqrt,
    Exp,
    Ln,
    Sigmoid,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Norm(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of the operations of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Grads {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients in `backward`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------- elementwise

    /// Applies an elementwise op. Binary ops require `b` and broadcast.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        if op.is_binary() {
            let b = b.ok_or_else(|| Error::contract(format!("{op:?} needs two operands")))?;
            let kind = match op {
                Elementwise::Add => Binary::Add,
                Elementwise::Sub => Binary::Sub,
                Elementwise::Mul => Binary::Mul,
                _ => Binary::Div,
            };
            return self.binary(kind, a, b);
        }
        let kind = match op {
            Elementwise::Relu => Unary::Relu,
            Elementwise::Square => Unary::Square,
            Elementwise::Sqrt => Unary::Sqrt,
            Elementwise::Exp => Unary::Exp,
            Elementwise::Ln => Unary::Ln,
            Elementwise::Sigmoid => Unary::Sigmoid,
            Elementwise::Scale(c) => Unary::Scale(c),
            Elementwise::AddScalar(c) => Unary::AddScalar(c),
            _ => unreachable!(),
        };
        Ok(self.unary(kind, a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), a)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            Error::dim(op, sa, sb)
        })?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![0.0; out_shape.iter().product()];
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(va).zip(vb) {
                *o = apply_binary(kind, x, y);
            }
        } else {
            let ta = broadcast_strides(sa, &out_shape);
            let tb = broadcast_strides(sb, &out_shape);
            for_each_broadcast(&out_shape, &ta, &tb, |o, i, j| {
                out[o] = apply_binary(kind, va[i], vb[j]);
            });
        }
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let v = self.value(a);
        let out = v.map(|x| match kind {
            Unary::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Scale(c) => x * c,
            Unary::AddScalar(c) => x + c,
        });
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Unary(kind, a), rg)
    }

    // ---------------------------------------------------------------- contractions

    /// Batched matrix product `[.., M, K] × [.., K, P] → [.., M, P]` with
    /// broadcasting over the leading batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatmulPlan::new(&sa, &sb)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![0.0; plan.batch_count * plan.m * plan.p];
        for (bi, &(oa, ob)) in plan.offsets.iter().enumerate() {
            kernels::gemm_acc(
                &va[oa * plan.m * plan.k..(oa + 1) * plan.m * plan.k],
                &vb[ob * plan.k * plan.p..(ob + 1) * plan.k * plan.p],
                &mut out[bi * plan.m * plan.p..(bi + 1) * plan.m * plan.p],
                plan.m,
                plan.k,
                plan.p,
            );
        }
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// Cross-correlation `[B, C_in, H, W] ⋆ [C_out, C_in, k, k]` (no kernel flip),
    /// computed by gathering patches and contracting against the flattened kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        let k = sw[2];
        let (h, wd) = (sx[2], sx[3]);
        if k > h + 2 * padding || k > wd + 2 * padding {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h,
            w: wd,
            k,
            stride,
            pad: padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (wd + 2 * padding - k) / stride + 1,
        };
        let c_out = sw[0];
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let plen = geom.patch_len();
        let mut mat = vec![0.0; geom.rows() * c_out];
        kernels::gemm_nt_acc(&cols, self.value(w).data(), &mut mat, geom.rows(), plen, c_out);
        // [B·OH·OW, C_out] -> [B, C_out, OH, OW]
        let hw = geom.oh * geom.ow;
        let mut out = vec![0.0; geom.batch * c_out * hw];
        for b in 0..geom.batch {
            for s in 0..hw {
                let row = &mat[(b * hw + s) * c_out..(b * hw + s + 1) * c_out];
                for (co, &v) in row.iter().enumerate() {
                    out[(b * c_out + co) * hw + s] = v;
                }
            }
        }
        let rg = self.any_grad(&[x, w]);
        let value = Tensor::new(vec![geom.batch, c_out, geom.oh, geom.ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom, cols }, rg))
    }

    /// Non-overlapping `size × size` max pooling over `[B, C, H, W]`; trailing
    /// rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(Error::dim("max_pool2d", &s, &[size, size]));
        }
        let (oh, ow) = (s[2] / size, s[3] / size);
        let v = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let base = pl * s[2] * s[3];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * s[3] + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * s[3] + ox * size + dx;
                            if v[idx] > v[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, rg))
    }

    // ---------------------------------------------------------------- normalizers

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.axis_softmax(a, axis, false)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    /// `log(softmax(a))` along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.axis_softmax(a, axis, true)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a, axis), rg))
    }

    fn axis_softmax(&self, a: Var, axis: usize, log: bool) -> Result<Tensor> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::dim("softmax", t.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_blocks(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|l| (x[at(l)] - max).exp()).sum();
                if log {
                    let lz = z.ln();
                    for l in 0..len {
                        out[at(l)] = x[at(l)] - max - lz;
                    }
                } else {
                    for l in 0..len {
                        out[at(l)] = (x[at(l)] - max).exp() / z;
                    }
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out)
    }

    /// Euclidean norm over the last axis, `sqrt(Σ x² + eps)`.
    pub fn vector_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("vector_norm requires eps > 0"));
        }
        let t = self.value(a);
        let s = t.shape();
        if s.is_empty() {
            return Err(Error::dim("vector_norm", s, &[]));
        }
        let d = s[s.len() - 1];
        let out: Vec<f64> = t
            .data()
            .chunks(d)
            .map(|row| (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt())
            .collect();
        let value = Tensor::new(s[..s.len() - 1].to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Norm(a), rg))
    }

    // ---------------------------------------------------------------- reductions & layout

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::dim("sum_axis", t.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_blocks(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", t.shape(), perm));
        }
        let value = permute_tensor(t, perm);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), rg))
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates gradients of the scalar `loss` into every reachable node
    /// that requires them. The tape itself is left untouched, so repeated
    /// calls return identical results.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {ls:?}"
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { shapes, grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let out_shape = node.value.shape();
                let ta = broadcast_strides(va.shape(), out_shape);
                let tb = broadcast_strides(vb.shape(), out_shape);
                let (xa, xb) = (va.data(), vb.data());
                let need_a = self.requires_grad(*a);
                let need_b = self.requires_grad(*b);
                let mut ga = need_a.then(|| vec![0.0; xa.len()]);
                let mut gb = need_b.then(|| vec![0.0; xb.len()]);
                for_each_broadcast(out_shape, &ta, &tb, |o, i, j| {
                    let go = g[o];
                    let (da, db) = match kind {
                        Binary::Add => (go, go),
                        Binary::Sub => (go, -go),
                        Binary::Mul => (go * xb[j], go * xa[i]),
                        Binary::Div => (go / xb[j], -go * xa[i] / (xb[j] * xb[j])),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[i] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] += db;
                    }
                });
                if let Some(ga) = ga {
                    accumulate(grads, *a, &ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let gi: Vec<f64> = (0..x.len())
                    .map(|k| {
                        let d = match kind {
                            Unary::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * x[k],
                            Unary::Sqrt => 0.5 / out[k],
                            Unary::Exp => out[k],
                            Unary::Ln => 1.0 / x[k],
                            Unary::Sigmoid => out[k] * (1.0 - out[k]),
                            Unary::Scale(c) => *c,
                            Unary::AddScalar(_) => 1.0,
                        };
                        g[k] * d
                    })
                    .collect();
                accumulate(grads, *a, &gi);
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let plan = MatmulPlan::new(va.shape(), vb.shape()).expect("validated in forward");
                let (m, k, p) = (plan.m, plan.k, plan.p);
                let mut ga = self.requires_grad(*a).then(|| vec![0.0; va.len()]);
                let mut gb = self.requires_grad(*b).then(|| vec![0.0; vb.len()]);
                for (bi, &(oa, ob)) in plan.offsets.iter().enumerate() {
                    let gblk = &g[bi * m * p..(bi + 1) * m * p];
                    if let Some(ga) = ga.as_mut() {
                        kernels::gemm_nt_acc(
                            gblk,
                            &vb.data()[ob * k * p..(ob + 1) * k * p],
                            &mut ga[oa * m * k..(oa + 1) * m * k],
                            m,
                            p,
                            k,
                        );
                    }
                    if let Some(gb) = gb.as_mut() {
                        kernels::gemm_tn_acc(
                            &va.data()[oa * m * k..(oa + 1) * m * k],
                            gblk,
                            &mut gb[ob * k * p..(ob + 1) * k * p],
                            m,
                            k,
                            p,
                        );
                    }
                }
                if let Some(ga) = ga {
                    accumulate(grads, *a, &ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let c_out = self.shape(*w)[0];
                let hw = geom.oh * geom.ow;
                let plen = geom.patch_len();
                // [B, C_out, OH, OW] -> [B·OH·OW, C_out]
                let mut gmat = vec![0.0; geom.rows() * c_out];
                for b in 0..geom.batch {
                    for co in 0..c_out {
                        let src = &g[(b * c_out + co) * hw..(b * c_out + co + 1) * hw];
                        for (s, &v) in src.iter().enumerate() {
                            gmat[(b * hw + s) * c_out + co] = v;
                        }
                    }
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; c_out * plen];
                    kernels::gemm_tn_acc(&gmat, cols, &mut gw, geom.rows(), c_out, plen);
                    accumulate(grads, *w, &gw);
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![0.0; geom.rows() * plen];
                    kernels::gemm_acc(&gmat, self.value(*w).data(), &mut gcols, geom.rows(), c_out, plen);
                    let mut gx = vec![0.0; self.value(*x).len()];
                    kernels::col2im_acc(&gcols, geom, &mut gx);
                    accumulate(grads, *x, &gx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (&src, &go) in argmax.iter().zip(g) {
                    gx[src] += go;
                }
                accumulate(grads, *x, &gx);
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, len, inner) = axis_blocks(node.value.shape(), *axis);
                let mut gi = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        if log {
                            let gs: f64 = (0..len).map(|l| g[at(l)]).sum();
                            for l in 0..len {
                                gi[at(l)] = g[at(l)] - out[at(l)].exp() * gs;
                            }
                        } else {
                            let dotp: f64 = (0..len).map(|l| g[at(l)] * out[at(l)]).sum();
                            for l in 0..len {
                                gi[at(l)] = out[at(l)] * (g[at(l)] - dotp);
                            }
                        }
                    }
                }
                accumulate(grads, *a, &gi);
            }
            Op::Norm(a) => {
                let x = self.value(*a).data();
                let d = x.len() / out.len();
                let mut gi = vec![0.0; x.len()];
                for (r, (&n, &go)) in out.iter().zip(g).enumerate() {
                    for c in 0..d {
                        gi[r * d + c] = go * x[r * d + c] / n;
                    }
                }
                accumulate(grads, *a, &gi);
            }
            Op::Sum(a) => {
                let gi = vec![g[0]; self.value(*a).len()];
                accumulate(grads, *a, &gi);
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_blocks(self.shape(*a), *axis);
                let mut gi = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        gi[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                    }
                }
                accumulate(grads, *a, &gi);
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let back = permute_tensor(&gt, &inv);
                accumulate(grads, *a, back.data());
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[inline]
fn apply_binary(kind: Binary, x: f64, y: f64) -> f64 {
    match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let src_strides = strides(s);
    // stride in the source for each output axis
    let walk: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = t.len();
    let x = t.data();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        return t.clone();
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(x[off]);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += walk[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= walk[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute shape")
}

/// Batch broadcasting plan for `matmul`.
struct MatmulPlan {
    m: usize,
    k: usize,
    p: usize,
    batch_count: usize,
    /// `(a matrix index, b matrix index)` for each output matrix.
    offsets: Vec<(usize, usize)>,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::dim("matmul", sa, sb))?;
        let batch_count: usize = batch.iter().product();
        let ta = broadcast_strides(ba, &batch);
        let tb = broadcast_strides(bb, &batch);
        let mut offsets = Vec::with_capacity(batch_count);
        for_each_broadcast(&batch, &ta, &tb, |_, i, j| offsets.push((i, j)));
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(p);
        Ok(MatmulPlan {
            m,
            k,
            p,
            batch_count,
            offsets,
            out_shape,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_sign_cases() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        // subgradient at exactly zero is zero
        assert_eq!(g.get(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn add_and_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = tape.elementwise(Elementwise::Add, a, Some(b)).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);

        let m = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let col = tape.param(t(&[2, 1], &[10.0, 20.0]));
        let sum = tape.add(m, col).unwrap();
        assert_eq!(tape.value(sum).data(), &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
        let l = tape.sum(sum);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(col).data(), &[3.0, 3.0]);
    }

    #[test]
    fn mismatched_shapes_name_both() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4]));
        match tape.add(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
        assert!(tape.elementwise(Elementwise::Mul, a, None).is_err());
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 6.0);
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);

        let eye = tape.constant(Tensor::eye(3));
        let v = tape.constant(t(&[3, 1], &[5.0, -1.0, 2.5]));
        let r = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.value(r).data(), &[5.0, -1.0, 2.5]);

        let bad = tape.constant(Tensor::zeros([3, 2]));
        assert!(matches!(tape.matmul(a, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_broadcasts_batch_axes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([2, 3, 1, 2], |k| k as f64));
        let b = tape.constant(Tensor::from_fn([3, 2, 4], |k| k as f64 * 0.5));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 1, 4]);
        let (va, vb, vc) = (tape.value(a), tape.value(b), tape.value(c));
        for bb in 0..2 {
            for i in 0..3 {
                for p in 0..4 {
                    let want: f64 = (0..2).map(|k| va.get(&[bb, i, 0, k]) * vb.get(&[i, k, p])).sum();
                    assert_eq!(vc.get(&[bb, i, 0, p]), want);
                }
            }
        }
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 1, 4, 4], |k| k as f64));
        let w = tape.constant(Tensor::ones([1, 1, 1, 1]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let x = tape.constant(Tensor::ones([1, 1, 5, 5]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 9.0));

        let big = tape.constant(Tensor::ones([1, 1, 7, 7]));
        assert!(matches!(tape.conv2d(x, big, 1, 0), Err(Error::Dimension { .. })));
        // padding makes the same kernel legal
        assert!(tape.conv2d(x, big, 1, 1).is_ok());
    }

    #[test]
    fn conv_output_extent_and_padding() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([2, 3, 8, 8]));
        let w = tape.constant(Tensor::ones([4, 3, 3, 3]));
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 4]);
        // corner sees a 2×2 window of the 3×3 kernel per channel
        assert_eq!(tape.value(y).get(&[0, 0, 0, 0]), 12.0);
        assert_eq!(tape.value(y).get(&[0, 0, 1, 1]), 27.0);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);

        let c = tape.constant(Tensor::full([5], 7.3));
        let y = tape.softmax(c, 0).unwrap();
        assert!(tape.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));

        let huge = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = tape.softmax(huge, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        assert!(tape.softmax(huge, 1).is_err());
    }

    #[test]
    fn vector_norm_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let n = tape.vector_norm(x, 1e-12).unwrap();
        assert!((tape.value(n).item() - 5.0).abs() < 1e-12);

        let z = tape.param(Tensor::zeros([4]));
        let n = tape.vector_norm(z, 1e-12).unwrap();
        assert!((tape.value(n).item() - 1e-6).abs() < 1e-18);
        let g = tape.backward(n).unwrap();
        assert!(g.get(z).all_finite());
    }

    #[test]
    fn backward_rules() {
        // loss = sum(w · x) with x fixed -> dL/dw = x
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let x = tape.constant(Tensor::vector(vec![4.0, 5.0, 6.0]));
        let wx = tape.mul(w, x).unwrap();
        let l = tape.sum(wx);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).data(), &[4.0, 5.0, 6.0]);
        assert!(!g.is_reached(x));

        // two uses of the same leaf accumulate
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let unused = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 2.0);
        assert_eq!(g.get(unused).data(), &[0.0, 0.0]);

        let v = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn([3, 4], |k| (k as f64 * 0.37).sin()));
        let s = tape.softmax(x, 1).unwrap();
        let e = tape.exp(s);
        let l = tape.sum(e);
        let g1 = tape.backward(l).unwrap().get(x);
        let g2 = tape.backward(l).unwrap().get(x);
        assert_eq!(
            g1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn permute_and_sum_axis() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn([2, 3, 4], |k| k as f64));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        assert_eq!(tape.value(p).get(&[3, 1, 2]), tape.value(x).get(&[1, 2, 3]));
        let s = tape.sum_axis(p, 1).unwrap();
        assert_eq!(tape.shape(s), &[4, 3]);
        assert_eq!(tape.value(s).get(&[1, 2]), 9.0 + 21.0);
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0]));
        let y = tape.max_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0]);
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
