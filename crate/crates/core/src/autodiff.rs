//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records every forward operation as a node holding its output
//! value plus whatever context backward needs. [`Tape::backward`] walks the
//! nodes in reverse, accumulating `dLoss/dNode` for everything reachable from
//! the loss. Leaves are registered per step — the training loop re-binds the
//! network parameters onto a fresh tape for every minibatch.
//!
//! Contracts enforced here:
//! - every operation validates operand shapes and errors on NaN/Inf outputs;
//! - `backward` requires a one-element loss node;
//! - a parameter used by several operations accumulates all contributions;
//! - parameters unreachable from the loss report an all-zero gradient.

use std::collections::BTreeSet;

use crate::error::{PstError, Result};
use crate::tensor::{matmul_2d, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// How a batch-norm node normalizes its input.
#[derive(Clone, Debug)]
pub enum BnStats {
    /// Normalize by per-channel statistics of the current batch (training).
    Batch,
    /// Normalize by the provided running statistics (inference); the
    /// statistics are constants, so no gradient flows through them.
    Running { mean: Tensor, var: Tensor },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// a:[m,k] @ b:[k,n] -> [m,n]
    Matmul { a: NodeId, b: NodeId },
    /// x:[n,i] @ w:[o,i]^T + b:[o] -> [n,o]
    Linear { x: NodeId, w: NodeId, b: NodeId },
    /// x:[n,i,h,w] * w:[o,i,k,k] -> [n,o,h',w']; `cols` is the saved im2col
    /// lowering of x, reused by the weight/input gradients.
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    /// x:[n,c,...] + b:[c] broadcast over every non-channel axis.
    ChannelBias { x: NodeId, b: NodeId },
    /// Per-channel affine normalization; `xhat` and `inv_std` are saved for
    /// backward, `batch_mean`/`batch_var` are exposed so the caller can fold
    /// them into running statistics.
    BatchNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        through_batch_stats: bool,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    Relu { x: NodeId },
    /// Non-overlapping k×k mean pooling over the two trailing axes.
    AvgPool { x: NodeId, k: usize },
    /// [n, ...] -> [n, prod(...)]
    Flatten { x: NodeId },
    /// Mean-over-batch softmax cross-entropy restricted to `active` columns.
    /// `lse` holds the per-row log-sum-exp over the active columns.
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        active: Vec<usize>,
        lse: Vec<f64>,
    },
    Sum { x: NodeId },
    Scale { x: NodeId, c: f64 },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
pub struct GradTape {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl GradTape {
    /// Gradient of the loss w.r.t. `id`, if `id` was reachable from the loss.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of the loss w.r.t. `id`; all zeros when unreachable.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input/parameter value on the tape.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn checked(&mut self, value: Tensor, op: Op, context: &str) -> Result<NodeId> {
        value.check_finite(context)?;
        Ok(self.push(value, op))
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(PstError::Dimension(format!(
                "matmul: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_2d(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.checked(value, Op::Matmul { a, b }, "matmul")
    }

    /// Fully-connected layer: rows of `w` are output units.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(PstError::Dimension(format!(
                "linear: x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let (xd, wd, bd) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let x_row = &xd[r * i..(r + 1) * i];
            let o_row = &mut out[r * o..(r + 1) * o];
            for u in 0..o {
                let w_row = &wd[u * i..(u + 1) * i];
                let mut acc = bd[u];
                for p in 0..i {
                    acc += x_row[p] * w_row[p];
                }
                o_row[u] = acc;
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        self.checked(value, Op::Linear { x, w, b }, "linear")
    }

    /// 2-d cross-correlation with zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(PstError::Dimension(format!(
                "conv2d: x {sx:?}, w {sw:?}"
            )));
        }
        if stride == 0 {
            return Err(PstError::Contract("conv2d: stride must be >= 1".into()));
        }
        let (n, i, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        if sw[3] != k {
            return Err(PstError::Dimension(format!(
                "conv2d: non-square kernel {sw:?}"
            )));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(PstError::Dimension(format!(
                "conv2d: kernel {k} too large for padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (wd + 2 * padding - k) / stride + 1;

        let cols = im2col(self.value(x).data(), n, i, h, wd, k, stride, padding, oh, ow);
        let q = i * k * k;
        let r = n * oh * ow;
        // weight [o, q] transposed to [q, o] so the product lands row-major.
        let wt = transpose(self.value(w).data(), o, q);
        let ymat = matmul_2d(&cols, &wt, r, q, o);

        let mut out = vec![0.0; n * o * oh * ow];
        for rr in 0..r {
            let (nn, ohh, oww) = (rr / (oh * ow), (rr / ow) % oh, rr % ow);
            for u in 0..o {
                out[((nn * o + u) * oh + ohh) * ow + oww] = ymat[rr * o + u];
            }
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        self.checked(
            value,
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
                cols,
            },
            "conv2d",
        )
    }

    /// Adds `b[c]` to every element of channel `c`.
    pub fn channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(PstError::Dimension(format!(
                "channel_bias: x {sx:?}, b {sb:?}"
            )));
        }
        let c = sx[1];
        let spatial: usize = sx[2..].iter().product();
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (idx, v) in out.iter_mut().enumerate() {
            let ch = (idx / spatial) % c;
            *v += bd[ch];
        }
        let value = Tensor::new(sx, out)?;
        self.checked(value, Op::ChannelBias { x, b }, "channel_bias")
    }

    /// Per-channel batch normalization with affine scale/shift.
    ///
    /// With [`BnStats::Batch`] the normalization statistics are computed from
    /// the batch (biased variance) and gradients flow through them; the batch
    /// statistics are retrievable afterwards via [`Tape::bn_batch_stats`].
    /// With [`BnStats::Running`] the provided statistics are constants.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        stats: BnStats,
        eps: f64,
    ) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() < 2 {
            return Err(PstError::Dimension(format!(
                "batchnorm: need a channel axis, got {sx:?}"
            )));
        }
        let c = sx[1];
        for (name, id) in [("scale", scale), ("shift", shift)] {
            if self.value(id).shape() != [c] {
                return Err(PstError::Dimension(format!(
                    "batchnorm: {name} shape {:?} does not match {c} channels",
                    self.value(id).shape()
                )));
            }
        }
        let n = sx[0];
        let spatial: usize = sx[2..].iter().product();
        let m = (n * spatial) as f64;
        let xd = self.value(x).data();

        let (mean, var, through_batch_stats) = match &stats {
            BnStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * spatial;
                        for s in 0..spatial {
                            acc += xd[base + s];
                        }
                    }
                    mean[ch] = acc / m;
                }
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * spatial;
                        for s in 0..spatial {
                            let d = xd[base + s] - mean[ch];
                            acc += d * d;
                        }
                    }
                    var[ch] = acc / m;
                }
                (mean, var, true)
            }
            BnStats::Running { mean, var } => {
                if mean.shape() != [c] || var.shape() != [c] {
                    return Err(PstError::Dimension(format!(
                        "batchnorm: running stats shape {:?}/{:?} vs {c} channels",
                        mean.shape(),
                        var.shape()
                    )));
                }
                (mean.data().to_vec(), var.data().to_vec(), false)
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(scale).data().to_vec();
        let bd = self.value(shift).data().to_vec();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for s in 0..spatial {
                    let h = (xd[base + s] - mean[ch]) * inv_std[ch];
                    xhat[base + s] = h;
                    out[base + s] = gd[ch] * h + bd[ch];
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        self.checked(
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                through_batch_stats,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
            "batchnorm",
        )
    }

    /// Batch statistics computed by a [`BnStats::Batch`] batchnorm node.
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                through_batch_stats: true,
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| v.max(0.0)).collect(),
        )?;
        self.checked(value, Op::Relu { x }, "relu")
    }

    pub fn avgpool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(PstError::Dimension(format!("avgpool: need 4-d input, got {sx:?}")));
        }
        if k == 0 || sx[2] % k != 0 || sx[3] % k != 0 {
            return Err(PstError::Dimension(format!(
                "avgpool: window {k} does not tile {}x{}",
                sx[2], sx[3]
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / k, w / k);
        let xd = self.value(x).data();
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xw in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += xd[((b * c + ch) * h + y * k + dy) * w + xw * k + dx];
                            }
                        }
                        out[((b * c + ch) * oh + y) * ow + xw] = acc * norm;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.checked(value, Op::AvgPool { x, k }, "avgpool")
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if sx.is_empty() {
            return Err(PstError::Dimension("flatten: scalar input".into()));
        }
        let value = self.value(x).reshaped(&[sx[0], sx[1..].iter().product()])?;
        self.checked(value, Op::Flatten { x }, "flatten")
    }

    /// Mean-over-batch softmax cross-entropy over the `active` class columns.
    ///
    /// Inactive columns take no part in the normalization and receive exactly
    /// zero gradient, so classes that have never been seen produce no feedback.
    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        active: &BTreeSet<usize>,
    ) -> Result<NodeId> {
        let sl = self.value(logits).shape().to_vec();
        if sl.len() != 2 {
            return Err(PstError::Dimension(format!(
                "softmax_xent: logits must be [batch, classes], got {sl:?}"
            )));
        }
        let (n, classes) = (sl[0], sl[1]);
        if labels.len() != n {
            return Err(PstError::Dimension(format!(
                "softmax_xent: {} labels for batch of {n}",
                labels.len()
            )));
        }
        if active.is_empty() {
            return Err(PstError::Contract("softmax_xent: empty active set".into()));
        }
        if let Some(&hi) = active.iter().next_back() {
            if hi >= classes {
                return Err(PstError::Contract(format!(
                    "softmax_xent: active class {hi} out of range for {classes} columns"
                )));
            }
        }
        for &l in labels {
            if !active.contains(&l) {
                return Err(PstError::Contract(format!(
                    "softmax_xent: label {l} not in active set"
                )));
            }
        }
        let active: Vec<usize> = active.iter().copied().collect();
        let ld = self.value(logits).data();
        let mut lse = vec![0.0; n];
        let mut total = 0.0;
        for r in 0..n {
            let row = &ld[r * classes..(r + 1) * classes];
            let mx = active
                .iter()
                .map(|&c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = active.iter().map(|&c| (row[c] - mx).exp()).sum();
            lse[r] = mx + sum.ln();
            total += lse[r] - row[labels[r]];
        }
        let value = Tensor::scalar(total / n as f64);
        self.checked(
            value,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                active,
                lse,
            },
            "softmax_xent",
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.checked(value, Op::Sum { x }, "sum")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| v * c).collect(),
        )?;
        self.checked(value, Op::Scale { x, c }, "scale")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(PstError::Dimension(format!(
                "{name}: shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| f(*x, *y))
                .collect(),
        )?;
        self.checked(value, op, name)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Computes `dLoss/dNode` for every node reachable from `loss`, which must
    /// hold exactly one element.
    pub fn backward(&self, loss: NodeId) -> Result<GradTape> {
        if self.value(loss).numel() != 1 {
            return Err(PstError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            self.accumulate(id, &gy, &mut grads)?;
            grads[id] = Some(gy);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        let mut shapes = Vec::with_capacity(self.nodes.len());
        for (i, g) in grads.into_iter().enumerate() {
            let shape = self.nodes[i].value.shape().to_vec();
            match g {
                Some(data) => {
                    let t = Tensor::new(shape.clone(), data)?;
                    t.check_finite("backward")?;
                    out.push(Some(t));
                }
                None => out.push(None),
            }
            shapes.push(shape);
        }
        Ok(GradTape { grads: out, shapes })
    }

    fn accumulate(
        &self,
        id: usize,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let add_to = |grads: &mut [Option<Vec<f64>>], target: NodeId, contrib: &[f64]| {
            match &mut grads[target.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                None => grads[target.0] = Some(contrib.to_vec()),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = dC @ B^T ; dB = A^T @ dC
                let bt = transpose(tb.data(), k, n);
                let da = matmul_2d(gy, &bt, m, n, k);
                let at = transpose(ta.data(), m, k);
                let db = matmul_2d(&at, gy, k, m, n);
                add_to(grads, *a, &da);
                add_to(grads, *b, &db);
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, i) = (tx.shape()[0], tx.shape()[1]);
                let o = tw.shape()[0];
                // dX = dY @ W ; dW = dY^T @ X ; db = column sums of dY
                let dx = matmul_2d(gy, tw.data(), n, o, i);
                let gyt = transpose(gy, n, o);
                let dw = matmul_2d(&gyt, tx.data(), o, n, i);
                let mut db = vec![0.0; o];
                for r in 0..n {
                    for u in 0..o {
                        db[u] += gy[r * o + u];
                    }
                }
                add_to(grads, *x, &dx);
                add_to(grads, *w, &dw);
                add_to(grads, *b, &db);
            }
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
                cols,
            } => {
                let sx = self.value(*x).shape().to_vec();
                let sw = self.value(*w).shape().to_vec();
                let sy = self.nodes[id].value.shape().to_vec();
                let (n, i, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, k) = (sw[0], sw[2]);
                let (oh, ow) = (sy[2], sy[3]);
                let q = i * k * k;
                let r = n * oh * ow;
                // Gather dY into the same row-major [r, o] layout as the
                // forward im2col product.
                let mut dymat = vec![0.0; r * o];
                for rr in 0..r {
                    let (nn, ohh, oww) = (rr / (oh * ow), (rr / ow) % oh, rr % ow);
                    for u in 0..o {
                        dymat[rr * o + u] = gy[((nn * o + u) * oh + ohh) * ow + oww];
                    }
                }
                let dyt = transpose(&dymat, r, o);
                let dw = matmul_2d(&dyt, cols, o, r, q);
                let dcols = matmul_2d(&dymat, self.value(*w).data(), r, o, q);
                let dx = col2im(&dcols, n, i, h, wd, k, *stride, *padding, oh, ow);
                add_to(grads, *x, &dx);
                add_to(grads, *w, &dw);
            }
            Op::ChannelBias { x, b } => {
                let sx = self.value(*x).shape();
                let c = sx[1];
                let spatial: usize = sx[2..].iter().product();
                let mut db = vec![0.0; c];
                for (idx, g) in gy.iter().enumerate() {
                    db[(idx / spatial) % c] += g;
                }
                add_to(grads, *x, gy);
                add_to(grads, *b, &db);
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                through_batch_stats,
                xhat,
                inv_std,
                ..
            } => {
                let sx = self.value(*x).shape();
                let (n, c) = (sx[0], sx[1]);
                let spatial: usize = sx[2..].iter().product();
                let m = (n * spatial) as f64;
                let gd = self.value(*scale).data();

                let mut dscale = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for s in 0..spatial {
                            dscale[ch] += gy[base + s] * xhat[base + s];
                            dshift[ch] += gy[base + s];
                        }
                    }
                }

                let mut dx = vec![0.0; gy.len()];
                if *through_batch_stats {
                    // dX = γ/σ · (dY − mean(dY) − x̂ · mean(dY·x̂)), means per channel.
                    for ch in 0..c {
                        let mean_dy = dshift[ch] / m;
                        let mean_dy_xhat = dscale[ch] / m;
                        let g = gd[ch] * inv_std[ch];
                        for b in 0..n {
                            let base = (b * c + ch) * spatial;
                            for s in 0..spatial {
                                dx[base + s] =
                                    g * (gy[base + s] - mean_dy - xhat[base + s] * mean_dy_xhat);
                            }
                        }
                    }
                } else {
                    // Running statistics are constants: straight-through affine.
                    for ch in 0..c {
                        let g = gd[ch] * inv_std[ch];
                        for b in 0..n {
                            let base = (b * c + ch) * spatial;
                            for s in 0..spatial {
                                dx[base + s] = g * gy[base + s];
                            }
                        }
                    }
                }
                add_to(grads, *x, &dx);
                add_to(grads, *scale, &dscale);
                add_to(grads, *shift, &dshift);
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let dx: Vec<f64> = gy
                    .iter()
                    .zip(xd)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                add_to(grads, *x, &dx);
            }
            Op::AvgPool { x, k } => {
                let sx = self.value(*x).shape();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xw in 0..ow {
                                let g = gy[((b * c + ch) * oh + y) * ow + xw] * norm;
                                for dy in 0..*k {
                                    for dxw in 0..*k {
                                        dx[((b * c + ch) * h + y * k + dy) * w + xw * k + dxw] += g;
                                    }
                                }
                            }
                        }
                    }
                }
                add_to(grads, *x, &dx);
            }
            Op::Flatten { x } => {
                add_to(grads, *x, gy);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                active,
                lse,
            } => {
                let sl = self.value(*logits).shape();
                let (n, classes) = (sl[0], sl[1]);
                let ld = self.value(*logits).data();
                let g = gy[0] / n as f64;
                let mut dl = vec![0.0; n * classes];
                for r in 0..n {
                    for &cidx in active {
                        let p = (ld[r * classes + cidx] - lse[r]).exp();
                        let y = if labels[r] == cidx { 1.0 } else { 0.0 };
                        dl[r * classes + cidx] = g * (p - y);
                    }
                }
                add_to(grads, *logits, &dl);
            }
            Op::Sum { x } => {
                let contrib = vec![gy[0]; self.value(*x).numel()];
                add_to(grads, *x, &contrib);
            }
            Op::Scale { x, c } => {
                let contrib: Vec<f64> = gy.iter().map(|g| g * c).collect();
                add_to(grads, *x, &contrib);
            }
            Op::Add { a, b } => {
                add_to(grads, *a, gy);
                add_to(grads, *b, gy);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = gy
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(g, v)| g * v)
                    .collect();
                let db: Vec<f64> = gy
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, v)| g * v)
                    .collect();
                add_to(grads, *a, &da);
                add_to(grads, *b, &db);
            }
        }
        Ok(())
    }
}

fn transpose(buf: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; buf.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = buf[r * cols + c];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    n: usize,
    i: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let q = i * k * k;
    let mut cols = vec![0.0; n * oh * ow * q];
    for nn in 0..n {
        for y in 0..oh {
            for xw in 0..ow {
                let r = (nn * oh + y) * ow + xw;
                for ci in 0..i {
                    for kh in 0..k {
                        let hh = (y * stride + kh) as isize - padding as isize;
                        if hh < 0 || hh >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let ww = (xw * stride + kw) as isize - padding as isize;
                            if ww < 0 || ww >= w as isize {
                                continue;
                            }
                            cols[r * q + (ci * k + kh) * k + kw] =
                                x[((nn * i + ci) * h + hh as usize) * w + ww as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    n: usize,
    i: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let q = i * k * k;
    let mut dx = vec![0.0; n * i * h * w];
    for nn in 0..n {
        for y in 0..oh {
            for xw in 0..ow {
                let r = (nn * oh + y) * ow + xw;
                for ci in 0..i {
                    for kh in 0..k {
                        let hh = (y * stride + kh) as isize - padding as isize;
                        if hh < 0 || hh >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let ww = (xw * stride + kw) as isize - padding as isize;
                            if ww < 0 || ww >= w as isize {
                                continue;
                            }
                            dx[((nn * i + ci) * h + hh as usize) * w + ww as usize] +=
                                dcols[r * q + (ci * k + kh) * k + kw];
                        }
                    }
                }
            }
        }
    }
    dx
}
