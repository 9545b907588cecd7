//! Reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded on a [`Tape`] during the forward pass and
//! replayed in exact reverse order to accumulate adjoints. The op set is
//! the closed vocabulary used by the networks in this crate: linear,
//! conv2d, batchnorm (inference statistics), relu, flatten, elementwise
//! add, scalar sigmoid/affine/broadcast-scale, sum, sum-of-squares, and
//! softmax cross-entropy.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicU64, Ordering};
use num_traits::Float;

use crate::tensor::{same_shape, ShapeError, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Reference to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TapeError {
    Shape(ShapeError),
    /// Label index outside `[0, C)`.
    LabelOutOfRange { label: usize, classes: usize },
    /// The node was not produced on this tape.
    ForeignNode,
    /// `backward` requires a single-element loss node.
    NonScalarLoss { numel: usize },
}

impl fmt::Display for TapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapeError::Shape(e) => write!(f, "{e}"),
            TapeError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            TapeError::ForeignNode => write!(f, "node was not recorded on this tape"),
            TapeError::NonScalarLoss { numel } => {
                write!(f, "loss must be scalar, got {numel} elements")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TapeError {}

impl From<ShapeError> for TapeError {
    fn from(e: ShapeError) -> Self {
        TapeError::Shape(e)
    }
}

fn shape_err(msg: String) -> TapeError {
    TapeError::Shape(ShapeError(msg))
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: usize },
    Conv2d { x: usize, k: usize, b: usize, stride: usize, padding: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, var: Vec<f64>, eps: f64 },
    Relu { x: usize },
    Flatten { x: usize },
    Add { a: usize, b: usize },
    SigmoidScalar { x: usize },
    AffineScalar { x: usize, mul: f64 },
    ScaleTensor { s: usize, t: usize },
    Sum { x: usize },
    SumSquares { x: usize },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records forward operations and replays adjoints in reverse order.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Drops all recorded nodes and gradients.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        self.grads.push(None);
        NodeId { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn check(&self, id: NodeId) -> Result<usize, TapeError> {
        if id.tape != self.id || id.idx >= self.nodes.len() {
            return Err(TapeError::ForeignNode);
        }
        Ok(id.idx)
    }

    /// Records a constant: gradients are never tracked through it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Records a trainable leaf: `backward` populates its gradient.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[self.check(id).expect("node from another tape")].value
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        let idx = self.check(id).ok()?;
        self.grads[idx].as_deref()
    }

    fn req(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// `x·W + b` with the bias broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let xv = &self.nodes[xi].value;
        let wv = &self.nodes[wi].value;
        let bv = &self.nodes[bi].value;
        if xv.shape.len() != 2 || wv.shape.len() != 2 || bv.shape.len() != 1 {
            return Err(shape_err(format!(
                "linear expects x[n,d_in] w[d_in,d_out] b[d_out], got {:?} {:?} {:?}",
                xv.shape, wv.shape, bv.shape
            )));
        }
        let (n, d_in) = (xv.shape[0], xv.shape[1]);
        let (w_in, d_out) = (wv.shape[0], wv.shape[1]);
        if d_in != w_in || bv.shape[0] != d_out {
            return Err(shape_err(format!(
                "linear shape mismatch: x {:?} vs w {:?} vs b {:?}",
                xv.shape, wv.shape, bv.shape
            )));
        }
        let mut out = vec![0.0; n * d_out];
        for i in 0..n {
            let row = &xv.values[i * d_in..(i + 1) * d_in];
            let orow = &mut out[i * d_out..(i + 1) * d_out];
            orow.copy_from_slice(&bv.values);
            for (k, &xk) in row.iter().enumerate() {
                let wrow = &wv.values[k * d_out..(k + 1) * d_out];
                for (o, &wkj) in orow.iter_mut().zip(wrow.iter()) {
                    *o += xk * wkj;
                }
            }
        }
        let req = self.req(xi) || self.req(wi) || self.req(bi);
        let value = Tensor { shape: vec![n, d_out], values: out, grad: None };
        Ok(self.push(Op::Linear { x: xi, w: wi, b: bi }, value, req))
    }

    /// Cross-correlation with zero padding; kernel `[c_out,c_in,k,k]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TapeError> {
        let (xi, ki, bi) = (self.check(x)?, self.check(k)?, self.check(b)?);
        let xv = &self.nodes[xi].value;
        let kv = &self.nodes[ki].value;
        let bv = &self.nodes[bi].value;
        if xv.shape.len() != 4 || kv.shape.len() != 4 || bv.shape.len() != 1 || stride == 0 {
            return Err(shape_err(format!(
                "conv2d expects x[n,c,h,w] k[co,ci,kh,kw] b[co] stride>0, got {:?} {:?} {:?} stride {}",
                xv.shape, kv.shape, bv.shape, stride
            )));
        }
        let (n, c_in, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let (c_out, kc, kh, kw) = (kv.shape[0], kv.shape[1], kv.shape[2], kv.shape[3]);
        if kc != c_in || bv.shape[0] != c_out {
            return Err(shape_err(format!(
                "conv2d channel mismatch: x {:?} vs k {:?} vs b {:?}",
                xv.shape, kv.shape, bv.shape
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(shape_err(format!(
                "kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; n * c_out * oh * ow];
        for img in 0..n {
            for co in 0..c_out {
                let bias = bv.values[co];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias;
                        for ci in 0..c_in {
                            let xbase = ((img * c_in) + ci) * h * w;
                            let kbase = ((co * c_in) + ci) * kh * kw;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * w;
                                let krow = kbase + ky * kw;
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    acc += xv.values[xrow + ix as usize] * kv.values[krow + kx];
                                }
                            }
                        }
                        out[((img * c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let req = self.req(xi) || self.req(ki) || self.req(bi);
        let value = Tensor { shape: vec![n, c_out, oh, ow], values: out, grad: None };
        Ok(self.push(Op::Conv2d { x: xi, k: ki, b: bi, stride, padding }, value, req))
    }

    /// Normalizes with the supplied running statistics (inference mode).
    /// Gradients are tracked for `gamma`, `beta`, and the input only.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId, TapeError> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let xv = &self.nodes[xi].value;
        let gv = &self.nodes[gi].value;
        let bv = &self.nodes[bi].value;
        if xv.shape.len() < 2 {
            return Err(shape_err(format!("batchnorm needs [n,c,..] input, got {:?}", xv.shape)));
        }
        let c = xv.shape[1];
        if gv.numel() != c || bv.numel() != c || mean.len() != c || var.len() != c {
            return Err(shape_err(format!(
                "batchnorm channel mismatch: input has {} channels, gamma {} beta {} mean {} var {}",
                c,
                gv.numel(),
                bv.numel(),
                mean.len(),
                var.len()
            )));
        }
        if let Some(v) = var.iter().find(|v| **v < 0.0) {
            return Err(shape_err(format!("negative variance {v}")));
        }
        if var.iter().any(|v| v + eps <= 0.0) {
            return Err(shape_err(String::from("variance plus eps must be positive")));
        }
        let inner: usize = xv.shape[2..].iter().product();
        let n = xv.shape[0];
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; xv.numel()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * inner;
                let (g, bta, m, iv) = (gv.values[ch], bv.values[ch], mean[ch], inv[ch]);
                for i in 0..inner {
                    out[base + i] = g * (xv.values[base + i] - m) * iv + bta;
                }
            }
        }
        let req = self.req(xi) || self.req(gi) || self.req(bi);
        let value = Tensor { shape: xv.shape.clone(), values: out, grad: None };
        Ok(self.push(
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                mean: mean.to_vec(),
                var: var.to_vec(),
                eps,
            },
            value,
            req,
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        let out: Vec<f64> = xv.values.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor { shape: xv.shape.clone(), values: out, grad: None };
        let req = self.req(xi);
        Ok(self.push(Op::Relu { x: xi }, value, req))
    }

    /// `[n, d...] -> [n, prod(d...)]` preserving row-major order.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        if xv.shape.is_empty() {
            return Err(shape_err(String::from("flatten needs a batched input")));
        }
        let n = xv.shape[0];
        let rest: usize = xv.shape[1..].iter().product();
        let value = Tensor { shape: vec![n, rest], values: xv.values.clone(), grad: None };
        let req = self.req(xi);
        Ok(self.push(Op::Flatten { x: xi }, value, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let av = &self.nodes[ai].value;
        let bv = &self.nodes[bi].value;
        if !same_shape(&av.shape, &bv.shape) {
            return Err(shape_err(format!("add shape mismatch: {:?} vs {:?}", av.shape, bv.shape)));
        }
        let out: Vec<f64> = av.values.iter().zip(&bv.values).map(|(x, y)| x + y).collect();
        let value = Tensor { shape: av.shape.clone(), values: out, grad: None };
        let req = self.req(ai) || self.req(bi);
        Ok(self.push(Op::Add { a: ai, b: bi }, value, req))
    }

    /// Logistic function of a single-element node.
    pub fn sigmoid_scalar(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        if xv.numel() != 1 {
            return Err(shape_err(format!("sigmoid_scalar expects 1 element, got {:?}", xv.shape)));
        }
        let v = 1.0 / (1.0 + (-xv.values[0]).exp());
        let req = self.req(xi);
        Ok(self.push(Op::SigmoidScalar { x: xi }, Tensor::scalar(v), req))
    }

    /// `mul*x + add` on a single-element node.
    pub fn affine_scalar(&mut self, x: NodeId, mul: f64, add: f64) -> Result<NodeId, TapeError> {
        let xi = self.check(x)?;
        let xv = &self.nodes[xi].value;
        if xv.numel() != 1 {
            return Err(shape_err(format!("affine_scalar expects 1 element, got {:?}", xv.shape)));
        }
        let v = mul * xv.values[0] + add;
        let req = self.req(xi);
        Ok(self.push(Op::AffineScalar { x: xi, mul }, Tensor::scalar(v), req))
    }

    /// Broadcast product of a single-element node with a tensor node.
    pub fn scale_tensor(&mut self, s: NodeId, t: NodeId) -> Result<NodeId, TapeError> {
        let (si, ti) = (self.check(s)?, self.check(t)?);
        let sv = &self.nodes[si].value;
        let tv = &self.nodes[ti].value;
        if sv.numel() != 1 {
            return Err(shape_err(format!("scale expects scalar, got {:?}", sv.shape)));
        }
        let s_val = sv.values[0];
        let out: Vec<f64> = tv.values.iter().map(|&v| s_val * v).collect();
        let value = Tensor { shape: tv.shape.clone(), values: out, grad: None };
        let req = self.req(si) || self.req(ti);
        Ok(self.push(Op::ScaleTensor { s: si, t: ti }, value, req))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let xi = self.check(x)?;
        let v: f64 = self.nodes[xi].value.values.iter().sum();
        let req = self.req(xi);
        Ok(self.push(Op::Sum { x: xi }, Tensor::scalar(v), req))
    }

    /// Squared Euclidean norm of all elements.
    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let xi = self.check(x)?;
        let v: f64 = self.nodes[xi].value.values.iter().map(|v| v * v).sum();
        let req = self.req(xi);
        Ok(self.push(Op::SumSquares { x: xi }, Tensor::scalar(v), req))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, max-stabilized.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TapeError> {
        let li = self.check(logits)?;
        let lv = &self.nodes[li].value;
        if lv.shape.len() != 2 || lv.shape[0] != labels.len() {
            return Err(shape_err(format!(
                "cross entropy expects logits [n,C] with n labels, got {:?} and {} labels",
                lv.shape,
                labels.len()
            )));
        }
        let (n, c) = (lv.shape[0], lv.shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TapeError::LabelOutOfRange { label: bad, classes: c });
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv.values[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            total += lse - (row[label] - m);
        }
        let req = self.req(li);
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(Op::SoftmaxCrossEntropy { logits: li, labels: labels.to_vec() }, value, req))
    }

    /// Accumulates `d loss / d node` for every gradient-tracked node by
    /// replaying the recorded operations in reverse order.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TapeError> {
        let li = self.check(loss)?;
        let numel = self.nodes[li].value.numel();
        if numel != 1 {
            return Err(TapeError::NonScalarLoss { numel });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[li] = Some(vec![1.0]);
        for idx in (0..=li).rev() {
            let Some(go) = self.grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &go);
            }
            self.grads[idx] = Some(go);
        }
        Ok(())
    }

    fn grad_buf(&mut self, idx: usize) -> &mut Vec<f64> {
        let n = self.nodes[idx].value.numel();
        self.grads[idx].get_or_insert_with(|| vec![0.0; n])
    }

    fn propagate(&mut self, idx: usize, go: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, d_in) = (self.nodes[x].value.shape[0], self.nodes[x].value.shape[1]);
                let d_out = self.nodes[w].value.shape[1];
                if self.req(x) {
                    let wv = self.nodes[w].value.values.clone();
                    let gx = self.grad_buf(x);
                    for i in 0..n {
                        for k in 0..d_in {
                            let wrow = &wv[k * d_out..(k + 1) * d_out];
                            let gorow = &go[i * d_out..(i + 1) * d_out];
                            let mut acc = 0.0;
                            for (gj, wj) in gorow.iter().zip(wrow.iter()) {
                                acc += gj * wj;
                            }
                            gx[i * d_in + k] += acc;
                        }
                    }
                }
                if self.req(w) {
                    let xv = self.nodes[x].value.values.clone();
                    let gw = self.grad_buf(w);
                    for i in 0..n {
                        for k in 0..d_in {
                            let xik = xv[i * d_in + k];
                            let gorow = &go[i * d_out..(i + 1) * d_out];
                            let gwrow = &mut gw[k * d_out..(k + 1) * d_out];
                            for (gkj, gj) in gwrow.iter_mut().zip(gorow.iter()) {
                                *gkj += xik * gj;
                            }
                        }
                    }
                }
                if self.req(b) {
                    let gb = self.grad_buf(b);
                    for i in 0..n {
                        for j in 0..d_out {
                            gb[j] += go[i * d_out + j];
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, stride, padding } => {
                let xs = self.nodes[x].value.shape.clone();
                let ks = self.nodes[k].value.shape.clone();
                let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (c_out, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                let oh = (h + 2 * padding - kh) / stride + 1;
                let ow = (w + 2 * padding - kw) / stride + 1;
                let xv = self.nodes[x].value.values.clone();
                let kv = self.nodes[k].value.values.clone();
                let want_x = self.req(x);
                let want_k = self.req(k);
                let want_b = self.req(b);
                let mut gx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
                let mut gk = if want_k { vec![0.0; kv.len()] } else { Vec::new() };
                let mut gb = if want_b { vec![0.0; c_out] } else { Vec::new() };
                for img in 0..n {
                    for co in 0..c_out {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = go[((img * c_out + co) * oh + oy) * ow + ox];
                                if want_b {
                                    gb[co] += g;
                                }
                                for ci in 0..c_in {
                                    let xbase = ((img * c_in) + ci) * h * w;
                                    let kbase = ((co * c_in) + ci) * kh * kw;
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy as usize >= h {
                                            continue;
                                        }
                                        let xrow = xbase + iy as usize * w;
                                        let krow = kbase + ky * kw;
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - padding as isize;
                                            if ix < 0 || ix as usize >= w {
                                                continue;
                                            }
                                            if want_k {
                                                gk[krow + kx] += g * xv[xrow + ix as usize];
                                            }
                                            if want_x {
                                                gx[xrow + ix as usize] += g * kv[krow + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    add_into(self.grad_buf(x), &gx);
                }
                if want_k {
                    add_into(self.grad_buf(k), &gk);
                }
                if want_b {
                    add_into(self.grad_buf(b), &gb);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, var, eps } => {
                let xs = self.nodes[x].value.shape.clone();
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let xv = self.nodes[x].value.values.clone();
                let gv = self.nodes[gamma].value.values.clone();
                if self.req(gamma) {
                    let gg = self.grad_buf(gamma);
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * inner;
                            let (m, iv) = (mean[ch], inv[ch]);
                            for i in 0..inner {
                                gg[ch] += go[base + i] * (xv[base + i] - m) * iv;
                            }
                        }
                    }
                }
                if self.req(beta) {
                    let gb = self.grad_buf(beta);
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * inner;
                            for i in 0..inner {
                                gb[ch] += go[base + i];
                            }
                        }
                    }
                }
                if self.req(x) {
                    let gx = self.grad_buf(x);
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * inner;
                            let giv = gv[ch] * inv[ch];
                            for i in 0..inner {
                                gx[base + i] += go[base + i] * giv;
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.req(x) {
                    let xv = self.nodes[x].value.values.clone();
                    let gx = self.grad_buf(x);
                    for (i, &v) in xv.iter().enumerate() {
                        if v > 0.0 {
                            gx[i] += go[i];
                        }
                    }
                }
            }
            Op::Flatten { x } => {
                if self.req(x) {
                    add_into(self.grad_buf(x), go);
                }
            }
            Op::Add { a, b } => {
                if self.req(a) {
                    add_into(self.grad_buf(a), go);
                }
                if self.req(b) {
                    add_into(self.grad_buf(b), go);
                }
            }
            Op::SigmoidScalar { x } => {
                if self.req(x) {
                    let v = self.nodes[idx].value.values[0];
                    self.grad_buf(x)[0] += go[0] * v * (1.0 - v);
                }
            }
            Op::AffineScalar { x, mul } => {
                if self.req(x) {
                    self.grad_buf(x)[0] += go[0] * mul;
                }
            }
            Op::ScaleTensor { s, t } => {
                let s_val = self.nodes[s].value.values[0];
                if self.req(s) {
                    let tv = self.nodes[t].value.values.clone();
                    let mut acc = 0.0;
                    for (g, v) in go.iter().zip(tv.iter()) {
                        acc += g * v;
                    }
                    self.grad_buf(s)[0] += acc;
                }
                if self.req(t) {
                    let gt = self.grad_buf(t);
                    for (g, gi) in gt.iter_mut().zip(go.iter()) {
                        *g += s_val * gi;
                    }
                }
            }
            Op::Sum { x } => {
                if self.req(x) {
                    let gx = self.grad_buf(x);
                    for g in gx.iter_mut() {
                        *g += go[0];
                    }
                }
            }
            Op::SumSquares { x } => {
                if self.req(x) {
                    let xv = self.nodes[x].value.values.clone();
                    let gx = self.grad_buf(x);
                    for (g, &v) in gx.iter_mut().zip(xv.iter()) {
                        *g += 2.0 * v * go[0];
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if self.req(logits) {
                    let lv = self.nodes[logits].value.values.clone();
                    let c = self.nodes[logits].value.shape[1];
                    let n = labels.len();
                    let scale = go[0] / n as f64;
                    let gl = self.grad_buf(logits);
                    for (i, &label) in labels.iter().enumerate() {
                        let row = &lv[i * c..(i + 1) * c];
                        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        let denom: f64 = row.iter().map(|&z| (z - m).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - m).exp() / denom;
                            let target = if j == label { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (p - target);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}
