//! Reverse-mode autodiff over a flat operation tape.
//!
//! Every primitive records its output tensor plus enough context to push
//! gradients back to its inputs. Nodes are appended in execution order, so the
//! tape itself is the topological order and backward is a single reverse
//! sweep. Parameter leaves remember their slot in the [`ParamStore`];
//! `backward` accumulates (`+=`) into the store's grad buffers, so repeated
//! calls sum, as an accumulation semantics test expects.
//!
//! Forward values are computed eagerly with plain f64 kernels. The same code
//! path serves gradient-free evaluation (rollouts) and training updates, which
//! keeps the two bitwise identical.

use std::sync::Arc;

use super::{DiffError, ParamStore, Tensor};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Matmul { a: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId },
    TransposeLast { x: NodeId },
    Conv2d { x: NodeId, k: NodeId, stride: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Minimum { a: NodeId, b: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Exp { x: NodeId },
    Ln { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Softmax { x: NodeId, axis: usize },
    LogSoftmaxRows { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    GatherRows { x: NodeId, idx: Arc<Vec<usize>> },
    ConcatLast { a: NodeId, b: NodeId },
    Reshape { x: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward pass. One tape per forward; drop or reuse via `clear`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<(), DiffError> {
        if id.0 >= self.nodes.len() {
            return Err(DiffError::NotOnTape);
        }
        Ok(())
    }

    /// Records a constant leaf (no gradient flows out of it).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Records a parameter leaf backed by the store entry `name`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, DiffError> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        let value = store.by_index(idx).clone();
        Ok(self.push(value, Op::Param(idx)))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::Shape(format!(
                "matmul needs [m,k]x[k,n], got {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(va.data(), vb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    /// Batched matmul: `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(DiffError::Shape(format!(
                "bmm needs [B,m,k]x[B,k,n], got {:?} x {:?}",
                sa, sb
            )));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            matmul_nn(
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![bsz, m, n], out)?;
        Ok(self.push(value, Op::Bmm { a, b }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() < 2 {
            return Err(DiffError::Shape(format!(
                "transpose_last needs rank >= 2, got {:?}",
                vx.shape()
            )));
        }
        let mut shape = vx.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let (m, n) = (vx.shape()[r - 2], vx.shape()[r - 1]);
        let out = transpose_batched(vx.data(), m, n);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::TransposeLast { x }))
    }

    /// Valid (unpadded) cross-correlation. Input is `[Ci,H,W]` or `[B,Ci,H,W]`;
    /// kernel is `[Co,Ci,kH,kW]`; output rank mirrors the input rank.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize) -> Result<NodeId, DiffError> {
        self.check(x)?;
        self.check(k)?;
        let (vx, vk) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
        let dims = ConvDims::resolve(vx.shape(), vk.shape(), stride)?;
        let mut out = vec![0.0; dims.batch * dims.c_out * dims.out_h * dims.out_w];
        conv2d_forward(vx.data(), vk.data(), &dims, &mut out);
        let shape = if vx.shape().len() == 3 {
            vec![dims.c_out, dims.out_h, dims.out_w]
        } else {
            vec![dims.batch, dims.c_out, dims.out_h, dims.out_w]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Conv2d { x, k, stride }))
    }

    // ---- elementwise ----

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(DiffError::Shape(format!(
                "{} needs equal shapes, got {:?} vs {:?}",
                name,
                va.shape(),
                vb.shape()
            )));
        }
        let out: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Elementwise minimum. At exact ties the gradient routes to the first
    /// argument.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_same_shape(a, b, "minimum", f64::min, Op::Minimum { a, b })
    }

    /// `[..., n] + [n]`, bias broadcast over leading axes.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check(x)?;
        self.check(b)?;
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let n = *vx.shape().last().ok_or_else(|| {
            DiffError::Shape("add_bias needs rank >= 1 input".to_string())
        })?;
        if vb.shape() != [n] {
            return Err(DiffError::Shape(format!(
                "add_bias needs bias [{}], got {:?}",
                n,
                vb.shape()
            )));
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddBias { x, b }))
    }

    fn unary(
        &mut self,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let out: Vec<f64> = vx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(value, op))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.unary(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.unary(x, |v| v + c, Op::AddScalar { x })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, f64::exp, Op::Exp { x })
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, f64::ln, Op::Ln { x })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, DiffError> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(DiffError::InvalidArg(format!(
                "clamp bounds inverted: [{}, {}]",
                lo, hi
            )));
        }
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    // ---- normalizers & reductions ----

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        if axis >= vx.shape().len() {
            return Err(DiffError::Shape(format!(
                "softmax axis {} out of range for shape {:?}",
                axis,
                vx.shape()
            )));
        }
        let out = softmax_forward(vx.data(), vx.shape(), axis);
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// Numerically stable `x - logsumexp(x)` along the last axis.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let n = *vx.shape().last().ok_or_else(|| {
            DiffError::Shape("log_softmax_rows needs rank >= 1".to_string())
        })?;
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmaxRows { x }))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let v = &self.nodes[x.0].value;
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean { x }))
    }

    /// Selects `x[b, idx[b]]` per row: `[B,n] -> [B]`.
    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let shape = vx.shape();
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(DiffError::Shape(format!(
                "gather_rows needs [B,n] with B == len(idx), got {:?} / {}",
                shape,
                idx.len()
            )));
        }
        let n = shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(DiffError::InvalidArg(format!(
                "gather index {} out of range 0..{}",
                bad, n
            )));
        }
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(b, &i)| vx.data()[b * n + i])
            .collect();
        let value = Tensor::new(vec![idx.len()], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: Arc::new(idx),
            },
        ))
    }

    /// Concatenates along the last axis; leading dims must match.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != sb.len()
            || sa.is_empty()
            || sa[..sa.len() - 1] != sb[..sb.len() - 1]
        {
            return Err(DiffError::Shape(format!(
                "concat_last needs matching leading dims, got {:?} vs {:?}",
                sa, sb
            )));
        }
        let (na, nb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = va.numel() / na;
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for r in 0..rows {
            out.extend_from_slice(&va.data()[r * na..(r + 1) * na]);
            out.extend_from_slice(&vb.data()[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = na + nb;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConcatLast { a, b }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        self.check(x)?;
        let value = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss; accumulates parameter gradients into
    /// the store (`+=`, no zeroing).
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<(), DiffError> {
        self.check(loss)?;
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(idx) => store.accumulate_grad(*idx, &g),
                Op::Matmul { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    {
                        let ga = grad_slot(&mut grads, a.0, va.numel());
                        matmul_nt(&g, vb.data(), m, n, k, ga);
                    }
                    let gb = grad_slot(&mut grads, b.0, vb.numel());
                    matmul_tn(va.data(), &g, m, k, n, gb);
                }
                Op::Bmm { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (bsz, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let n = vb.shape()[2];
                    {
                        let ga = grad_slot(&mut grads, a.0, va.numel());
                        for i in 0..bsz {
                            matmul_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &vb.data()[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                    let gb = grad_slot(&mut grads, b.0, vb.numel());
                    for i in 0..bsz {
                        matmul_tn(
                            &va.data()[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
                Op::TransposeLast { x } => {
                    let vx = &self.nodes[x.0].value;
                    let r = node.value.shape().len();
                    let (m, n) = (node.value.shape()[r - 2], node.value.shape()[r - 1]);
                    let gt = transpose_batched(&g, m, n);
                    let gx = grad_slot(&mut grads, x.0, vx.numel());
                    for (o, v) in gx.iter_mut().zip(&gt) {
                        *o += v;
                    }
                }
                Op::Conv2d { x, k, stride } => {
                    let (vx, vk) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
                    let dims = ConvDims::resolve(vx.shape(), vk.shape(), *stride)
                        .expect("shapes validated at record time");
                    {
                        let gx = grad_slot(&mut grads, x.0, vx.numel());
                        conv2d_backward_input(&g, vk.data(), &dims, gx);
                    }
                    let gk = grad_slot(&mut grads, k.0, vk.numel());
                    conv2d_backward_kernel(&g, vx.data(), &dims, gk);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, a.0, &g, |gv, _| gv, node.value.numel());
                    accumulate(&mut grads, b.0, &g, |gv, _| gv, node.value.numel());
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, a.0, &g, |gv, _| gv, node.value.numel());
                    accumulate(&mut grads, b.0, &g, |gv, _| -gv, node.value.numel());
                }
                Op::Mul { a, b } => {
                    let vb = self.nodes[b.0].value.clone();
                    let va = self.nodes[a.0].value.clone();
                    accumulate_with(&mut grads, a.0, &g, vb.data(), |gv, o| gv * o);
                    accumulate_with(&mut grads, b.0, &g, va.data(), |gv, o| gv * o);
                }
                Op::Minimum { a, b } => {
                    let va = self.nodes[a.0].value.clone();
                    let vb = self.nodes[b.0].value.clone();
                    {
                        let ga = grad_slot(&mut grads, a.0, va.numel());
                        for ((o, &gv), (&x, &y)) in ga
                            .iter_mut()
                            .zip(&g)
                            .zip(va.data().iter().zip(vb.data()))
                        {
                            if x <= y {
                                *o += gv;
                            }
                        }
                    }
                    let gb = grad_slot(&mut grads, b.0, vb.numel());
                    for ((o, &gv), (&x, &y)) in gb
                        .iter_mut()
                        .zip(&g)
                        .zip(va.data().iter().zip(vb.data()))
                    {
                        if y < x {
                            *o += gv;
                        }
                    }
                }
                Op::AddBias { x, b } => {
                    let vx = &self.nodes[x.0].value;
                    let n = *vx.shape().last().unwrap();
                    accumulate(&mut grads, x.0, &g, |gv, _| gv, vx.numel());
                    let gb = grad_slot(&mut grads, b.0, n);
                    for row in g.chunks(n) {
                        for (o, &gv) in gb.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    accumulate(&mut grads, x.0, &g, move |gv, _| gv * c, g.len());
                }
                Op::AddScalar { x } => {
                    accumulate(&mut grads, x.0, &g, |gv, _| gv, g.len());
                }
                Op::Relu { x } => {
                    let vx = self.nodes[x.0].value.clone();
                    accumulate_with(&mut grads, x.0, &g, vx.data(), |gv, xi| {
                        if xi > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    });
                }
                Op::Sigmoid { x } => {
                    let y = node.value.clone();
                    accumulate_with(&mut grads, x.0, &g, y.data(), |gv, yi| {
                        gv * yi * (1.0 - yi)
                    });
                }
                Op::Tanh { x } => {
                    let y = node.value.clone();
                    accumulate_with(&mut grads, x.0, &g, y.data(), |gv, yi| {
                        gv * (1.0 - yi * yi)
                    });
                }
                Op::Exp { x } => {
                    let y = node.value.clone();
                    accumulate_with(&mut grads, x.0, &g, y.data(), |gv, yi| gv * yi);
                }
                Op::Ln { x } => {
                    let vx = self.nodes[x.0].value.clone();
                    accumulate_with(&mut grads, x.0, &g, vx.data(), |gv, xi| gv / xi);
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let vx = self.nodes[x.0].value.clone();
                    accumulate_with(&mut grads, x.0, &g, vx.data(), move |gv, xi| {
                        if xi >= lo && xi <= hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let gx = softmax_backward(&g, y.data(), y.shape(), *axis);
                    let slot = grad_slot(&mut grads, x.0, y.numel());
                    for (o, v) in slot.iter_mut().zip(&gx) {
                        *o += v;
                    }
                }
                Op::LogSoftmaxRows { x } => {
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let gx = grad_slot(&mut grads, x.0, y.numel());
                    for (r, grow) in g.chunks(n).enumerate() {
                        let gsum: f64 = grow.iter().sum();
                        let yrow = &y.data()[r * n..(r + 1) * n];
                        let orow = &mut gx[r * n..(r + 1) * n];
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += gv - yv.exp() * gsum;
                        }
                    }
                }
                Op::Sum { x } => {
                    let numel = self.nodes[x.0].value.numel();
                    let gv = g[0];
                    let gx = grad_slot(&mut grads, x.0, numel);
                    gx.iter_mut().for_each(|o| *o += gv);
                }
                Op::Mean { x } => {
                    let numel = self.nodes[x.0].value.numel();
                    let gv = g[0] / numel as f64;
                    let gx = grad_slot(&mut grads, x.0, numel);
                    gx.iter_mut().for_each(|o| *o += gv);
                }
                Op::GatherRows { x, idx } => {
                    let vx = &self.nodes[x.0].value;
                    let n = vx.shape()[1];
                    let gx = grad_slot(&mut grads, x.0, vx.numel());
                    for (b, &i) in idx.iter().enumerate() {
                        gx[b * n + i] += g[b];
                    }
                }
                Op::ConcatLast { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let na = *va.shape().last().unwrap();
                    let nb = *vb.shape().last().unwrap();
                    let rows = va.numel() / na;
                    {
                        let ga = grad_slot(&mut grads, a.0, va.numel());
                        for r in 0..rows {
                            let src = &g[r * (na + nb)..r * (na + nb) + na];
                            for (o, &v) in ga[r * na..(r + 1) * na].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    let gb = grad_slot(&mut grads, b.0, vb.numel());
                    for r in 0..rows {
                        let src = &g[r * (na + nb) + na..(r + 1) * (na + nb)];
                        for (o, &v) in gb[r * nb..(r + 1) * nb].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                Op::Reshape { x } => {
                    accumulate(&mut grads, x.0, &g, |gv, _| gv, g.len());
                }
            }
        }
        Ok(())
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], idx: usize, numel: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; numel])
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    idx: usize,
    g: &[f64],
    f: impl Fn(f64, usize) -> f64,
    numel: usize,
) {
    let slot = grad_slot(grads, idx, numel);
    for (i, (o, &gv)) in slot.iter_mut().zip(g).enumerate() {
        *o += f(gv, i);
    }
}

fn accumulate_with(
    grads: &mut [Option<Vec<f64>>],
    idx: usize,
    g: &[f64],
    other: &[f64],
    f: impl Fn(f64, f64) -> f64,
) {
    let slot = grad_slot(grads, idx, other.len());
    for ((o, &gv), &ov) in slot.iter_mut().zip(g).zip(other) {
        *o += f(gv, ov);
    }
}

// ---- kernels ----

/// `out += a x b` for row-major `[m,k] x [k,n]`. The k loop ascends for every
/// output element, so accumulation order is row-independent.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a x b^T` for `[m,n] x [k,n]^T -> [m,k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out += a^T x b` for `[m,k]^T x [m,n] -> [k,n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_batched(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mat = m * n;
    let batches = data.len() / mat;
    let mut out = vec![0.0; data.len()];
    for b in 0..batches {
        let src = &data[b * mat..(b + 1) * mat];
        let dst = &mut out[b * mat..(b + 1) * mat];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    in_h: usize,
    in_w: usize,
    c_out: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvDims {
    fn resolve(xs: &[usize], ks: &[usize], stride: usize) -> Result<Self, DiffError> {
        if stride == 0 {
            return Err(DiffError::InvalidArg("conv2d stride must be >= 1".into()));
        }
        let (batch, c_in, in_h, in_w) = match xs {
            [c, h, w] => (1, *c, *h, *w),
            [b, c, h, w] => (*b, *c, *h, *w),
            _ => {
                return Err(DiffError::Shape(format!(
                    "conv2d input must be [Ci,H,W] or [B,Ci,H,W], got {:?}",
                    xs
                )))
            }
        };
        let [c_out, kc, k_h, k_w] = match ks {
            [a, b, c, d] => [*a, *b, *c, *d],
            _ => {
                return Err(DiffError::Shape(format!(
                    "conv2d kernel must be [Co,Ci,kH,kW], got {:?}",
                    ks
                )))
            }
        };
        if kc != c_in {
            return Err(DiffError::Shape(format!(
                "conv2d channel mismatch: input {} vs kernel {}",
                c_in, kc
            )));
        }
        if k_h > in_h || k_w > in_w {
            return Err(DiffError::Shape(format!(
                "conv2d kernel {}x{} larger than input {}x{}",
                k_h, k_w, in_h, in_w
            )));
        }
        let out_h = (in_h - k_h) / stride + 1;
        let out_w = (in_w - k_w) / stride + 1;
        Ok(ConvDims {
            batch,
            c_in,
            in_h,
            in_w,
            c_out,
            k_h,
            k_w,
            stride,
            out_h,
            out_w,
        })
    }
}

fn conv2d_forward(x: &[f64], k: &[f64], d: &ConvDims, out: &mut [f64]) {
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let k_plane = d.k_h * d.k_w;
    for b in 0..d.batch {
        let xb = &x[b * d.c_in * in_plane..(b + 1) * d.c_in * in_plane];
        let ob = &mut out[b * d.c_out * out_plane..(b + 1) * d.c_out * out_plane];
        for co in 0..d.c_out {
            let kco = &k[co * d.c_in * k_plane..(co + 1) * d.c_in * k_plane];
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let mut acc = 0.0;
                    for ci in 0..d.c_in {
                        let xci = &xb[ci * in_plane..(ci + 1) * in_plane];
                        let kci = &kco[ci * k_plane..(ci + 1) * k_plane];
                        for ky in 0..d.k_h {
                            let xrow = (oy * d.stride + ky) * d.in_w + ox * d.stride;
                            let krow = ky * d.k_w;
                            for kx in 0..d.k_w {
                                acc += xci[xrow + kx] * kci[krow + kx];
                            }
                        }
                    }
                    ob[co * out_plane + oy * d.out_w + ox] = acc;
                }
            }
        }
    }
}

fn conv2d_backward_input(g: &[f64], k: &[f64], d: &ConvDims, gx: &mut [f64]) {
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let k_plane = d.k_h * d.k_w;
    for b in 0..d.batch {
        let gb = &g[b * d.c_out * out_plane..(b + 1) * d.c_out * out_plane];
        let gxb = &mut gx[b * d.c_in * in_plane..(b + 1) * d.c_in * in_plane];
        for co in 0..d.c_out {
            let kco = &k[co * d.c_in * k_plane..(co + 1) * d.c_in * k_plane];
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let gv = gb[co * out_plane + oy * d.out_w + ox];
                    for ci in 0..d.c_in {
                        let gxci = &mut gxb[ci * in_plane..(ci + 1) * in_plane];
                        let kci = &kco[ci * k_plane..(ci + 1) * k_plane];
                        for ky in 0..d.k_h {
                            let xrow = (oy * d.stride + ky) * d.in_w + ox * d.stride;
                            let krow = ky * d.k_w;
                            for kx in 0..d.k_w {
                                gxci[xrow + kx] += gv * kci[krow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel(g: &[f64], x: &[f64], d: &ConvDims, gk: &mut [f64]) {
    let in_plane = d.in_h * d.in_w;
    let out_plane = d.out_h * d.out_w;
    let k_plane = d.k_h * d.k_w;
    for b in 0..d.batch {
        let xb = &x[b * d.c_in * in_plane..(b + 1) * d.c_in * in_plane];
        let gb = &g[b * d.c_out * out_plane..(b + 1) * d.c_out * out_plane];
        for co in 0..d.c_out {
            let gkco = &mut gk[co * d.c_in * k_plane..(co + 1) * d.c_in * k_plane];
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let gv = gb[co * out_plane + oy * d.out_w + ox];
                    for ci in 0..d.c_in {
                        let xci = &xb[ci * in_plane..(ci + 1) * in_plane];
                        let gkci = &mut gkco[ci * k_plane..(ci + 1) * k_plane];
                        for ky in 0..d.k_h {
                            let xrow = (oy * d.stride + ky) * d.in_w + ox * d.stride;
                            let krow = ky * d.k_w;
                            for kx in 0..d.k_w {
                                gkci[krow + kx] += gv * xci[xrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn softmax_forward(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(data[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (data[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
    out
}

fn softmax_backward(g: &[f64], y: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; g.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += g[base + j * inner] * y[base + j * inner];
            }
            for j in 0..len {
                let idx = base + j * inner;
                out[idx] = y[idx] * (g[idx] - dot);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> NodeId {
        tape.constant(Tensor::new(shape.to_vec(), data).unwrap())
    }

    fn param(tape: &mut Tape, store: &mut ParamStore, name: &str, shape: &[usize], data: Vec<f64>) -> NodeId {
        if store.get(name).is_none() {
            store
                .insert(name, Tensor::new(shape.to_vec(), data).unwrap())
                .unwrap();
        }
        tape.param(store, name).unwrap()
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = leaf(&mut tape, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = leaf(&mut tape, &[2, 2], vec![0.0; 4]);
        let out = tape.matmul(z, a).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut tape = Tape::new();
        // fixed pseudo-random values
        let mut v = 0.37f64;
        let mut next = || {
            v = (v * 97.31 + 0.177).fract();
            v - 0.5
        };
        let a_data: Vec<f64> = (0..12).map(|_| next()).collect();
        let b_data: Vec<f64> = (0..8).map(|_| next()).collect();
        let a = leaf(&mut tape, &[3, 4], a_data.clone());
        let b = leaf(&mut tape, &[4, 2], b_data.clone());
        let out = tape.matmul(a, b).unwrap();

        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expect[i * 2 + j] += a_data[i * 4 + k] * b_data[k * 2 + j];
                }
            }
        }
        for (got, want) in tape.value(out).data().iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, &[2, 2], vec![0.0; 4]);
        assert!(matches!(tape.matmul(a, b), Err(DiffError::Shape(_))));
    }

    #[test]
    fn conv_delta_kernel_picks_center() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3, 3], (1..=9).map(f64::from).collect());
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0; // center of 3x3
        let k = leaf(&mut tape, &[1, 1, 3, 3], kdata);
        let out = tape.conv2d(x, k, 1).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(out).data(), &[5.0]);
    }

    #[test]
    fn conv_counting_kernel() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 4, 4], vec![1.0; 16]);
        let k = leaf(&mut tape, &[1, 1, 2, 2], vec![1.0; 4]);
        let out = tape.conv2d(x, k, 2).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 2, 2]);
        assert_eq!(tape.value(out).data(), &[4.0; 4]);
    }

    #[test]
    fn conv_matches_quadruple_loop_oracle() {
        let mut v = 0.8123f64;
        let mut next = || {
            v = (v * 53.17 + 0.3391).fract();
            v - 0.5
        };
        let (ci, co, h, w, kh, kw, s) = (2, 3, 5, 6, 2, 3, 2);
        let xd: Vec<f64> = (0..ci * h * w).map(|_| next()).collect();
        let kd: Vec<f64> = (0..co * ci * kh * kw).map(|_| next()).collect();

        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[ci, h, w], xd.clone());
        let k = leaf(&mut tape, &[co, ci, kh, kw], kd.clone());
        let out = tape.conv2d(x, k, s).unwrap();

        let (oh, ow) = ((h - kh) / s + 1, (w - kw) / s + 1);
        assert_eq!(tape.value(out).shape(), &[co, oh, ow]);
        for c in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += xd[ic * h * w + (oy * s + ky) * w + ox * s + kx]
                                    * kd[c * ci * kh * kw + ic * kh * kw + ky * kw + kx];
                            }
                        }
                    }
                    let got = tape.value(out).data()[c * oh * ow + oy * ow + ox];
                    assert!((got - acc).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2], vec![0.0; 4]);
        let k = leaf(&mut tape, &[1, 1, 3, 3], vec![0.0; 9]);
        assert!(matches!(tape.conv2d(x, k, 1), Err(DiffError::Shape(_))));
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![0.0, 0.0]);
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let a = leaf(&mut tape, &[4], vec![0.3, -1.2, 2.0, 0.4]);
        let b = leaf(&mut tape, &[4], vec![0.3 + 7.0, -1.2 + 7.0, 2.0 + 7.0, 0.4 + 7.0]);
        let ya = tape.softmax(a, 0).unwrap();
        let yb = tape.softmax(b, 0).unwrap();
        for (p, q) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_matches_exp_sum_oracle() {
        let mut tape = Tape::new();
        let data = vec![0.37, -0.91, 1.44, 0.02];
        let x = leaf(&mut tape, &[4], data.clone());
        let y = tape.softmax(x, 0).unwrap();
        let sum: f64 = data.iter().map(|v| v.exp()).sum();
        for (got, v) in tape.value(y).data().iter().zip(&data) {
            assert!((got - v.exp() / sum).abs() <= 1e-12);
        }
        let total: f64 = tape.value(y).data().iter().sum();
        assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn relu_and_sigmoid_basics() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![-1.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let z = leaf(&mut tape, &[1], vec![0.0]);
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let x = param(&mut tape, &mut store, "x", &[3], vec![1.0, -2.0, 0.5]);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_through_zero_scale_kills_grad() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let x = param(&mut tape, &mut store, "x", &[3], vec![1.0, -2.0, 0.5]);
        let y = tape.tanh(x).unwrap();
        let s = tape.sum(y).unwrap();
        let loss = tape.scale(s, 0.0).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_accumulates_exactly_twice() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let x = param(&mut tape, &mut store, "x", &[2], vec![0.7, -0.3]);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let once: Vec<f64> = store.get("x").unwrap().grad().unwrap().to_vec();
        tape.backward(loss, &mut store).unwrap();
        let twice: Vec<f64> = store.get("x").unwrap().grad().unwrap().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let x = param(&mut tape, &mut store, "x", &[2], vec![1.0, 2.0]);
        assert!(matches!(
            tape.backward(x, &mut store),
            Err(DiffError::NotScalar(_))
        ));
    }

    #[test]
    fn backward_rejects_loss_off_tape() {
        let tape = Tape::new();
        let mut store = ParamStore::new();
        assert!(matches!(
            tape.backward(NodeId(3), &mut store),
            Err(DiffError::NotOnTape)
        ));
    }

    #[test]
    fn gather_and_concat_round_trip_gradients() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let a = param(&mut tape, &mut store, "a", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = param(&mut tape, &mut store, "b", &[2, 1], vec![5.0, 6.0]);
        let c = tape.concat_last(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let picked = tape.gather_rows(c, vec![2, 0]).unwrap();
        assert_eq!(tape.value(picked).data(), &[5.0, 3.0]);
        let loss = tape.sum(picked).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("a").unwrap().grad().unwrap(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(store.get("b").unwrap().grad().unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn forward_is_pure() {
        let data = vec![0.25, -1.5, 3.25, 0.125];
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![2, 2], data.clone()).unwrap());
            let y = tape.tanh(x).unwrap();
            let z = tape.softmax(y, 1).unwrap();
            tape.value(z).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b); // bitwise
    }
}
