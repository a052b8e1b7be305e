//! Dynamic-tape reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every forward operation as a node; [`Graph::backward`]
//! replays the tape in reverse, accumulating gradients into each node that
//! requires them. Graphs are cheap, built per forward pass and dropped after
//! the optimizer step. A graph is confined to one training context; separate
//! contexts may run concurrently with no shared state.

use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub enum Reduction {
    /// Mean over the batch dimension.
    MeanBatch,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    ChannelBias { x: Var, b: Var },
    SampleChannelBias { x: Var, b: Var },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    MeanPoolGlobal(Var),
    Upsample2x(Var),
    CropCenter { x: Var, row0: usize, col0: usize },
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    CrossEntropySpatial { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SumAll(Var),
    Reparameterize { mean: Var, logvar: Var, eps: Vec<f64> },
    KlUnitGaussian { mean: Var, logvar: Var },
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, false, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient buffer populated by the last `backward`. Zero for nodes that
    /// did not participate; `None` for nodes that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push_unchecked(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, parents: &[Var], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    // ── elementwise ───────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> = self.zip_data(a, b, |x, y| x + y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", out, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> = self.zip_data(a, b, |x, y| x - y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("sub", out, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> = self.zip_data(a, b, |x, y| x * y);
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", out, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("scale", out, &[x], Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.exp()).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("exp", out, &[x], Op::Exp(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("relu", out, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("sigmoid", out, &[x], Op::Sigmoid(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        self.push("reshape", out, &[x], Op::Reshape(x))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat of empty list"));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let mut axis_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::invalid(format!(
                    "concat shape mismatch: {:?} vs {:?} on axis {axis}",
                    s, first
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut offset = 0;
        for &v in xs {
            let s_axis = self.shape(v)[axis];
            let src = self.value(v).data();
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * s_axis * inner;
                data[dst_start..dst_start + s_axis * inner]
                    .copy_from_slice(&src[src_start..src_start + s_axis * inner]);
            }
            offset += s_axis;
        }
        let out = Tensor::new(out_shape, data)?;
        self.push("concat", out, xs, Op::Concat { xs: xs.to_vec(), axis })
    }

    // ── dense / conv layers ──────────────────────────────────────────

    /// `x: [N, I] · w: [I, O] + b: [O]` → `[N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::invalid(format!(
                "linear shape mismatch: x {:?}, w {:?}, b {:?}",
                xs, ws, bs
            )));
        }
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut data = vec![0.0; n * o];
        for r in 0..n {
            let row = &xd[r * i..(r + 1) * i];
            let out_row = &mut data[r * o..(r + 1) * o];
            out_row.copy_from_slice(bd);
            for (c, &xv) in row.iter().enumerate() {
                let wrow = &wd[c * o..(c + 1) * o];
                for (out_v, &wv) in out_row.iter_mut().zip(wrow) {
                    *out_v += xv * wv;
                }
            }
        }
        let out = Tensor::new(vec![n, o], data)?;
        self.push("linear", out, &[x, w, b], Op::Linear { x, w, b })
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `k: [F, C, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::invalid(format!(
                "conv2d expects 4-d input and kernel, got {:?} and {:?}",
                xs, ks
            )));
        }
        if xs[1] != ks[1] {
            return Err(Error::invalid(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                xs[1], ks[1]
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let out_h = conv_out_dim("height", xs[2], ks[2], stride, pad)?;
        let out_w = conv_out_dim("width", xs[3], ks[3], stride, pad)?;
        let (n, f) = (xs[0], ks[0]);
        let data = conv2d_forward(
            self.value(x).data(),
            &xs,
            self.value(k).data(),
            &ks,
            stride,
            pad,
            out_h,
            out_w,
        );
        let out = Tensor::new(vec![n, f, out_h, out_w], data)?;
        self.push("conv2d", out, &[x, k], Op::Conv2d { x, k, stride, pad })
    }

    /// Adds `b: [C]` to every spatial position of `x: [N, C, H, W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b));
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::invalid(format!(
                "channel_bias shape mismatch: x {:?}, b {:?}",
                xs, bs
            )));
        }
        let hw = xs[2] * xs[3];
        let bd = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(hw * xs[1]) {
            for (c, bv) in bd.iter().enumerate() {
                for v in &mut chunk[c * hw..(c + 1) * hw] {
                    *v += bv;
                }
            }
        }
        let out = Tensor::new(xs, data)?;
        self.push("channel_bias", out, &[x, b], Op::ChannelBias { x, b })
    }

    /// Adds a per-sample per-channel bias `b: [N, C]` to `x: [N, C, H, W]`.
    pub fn sample_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b));
        if xs.len() != 4 || bs.len() != 2 || bs[0] != xs[0] || bs[1] != xs[1] {
            return Err(Error::invalid(format!(
                "sample_channel_bias shape mismatch: x {:?}, b {:?}",
                xs, bs
            )));
        }
        let hw = xs[2] * xs[3];
        let bd = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (n, chunk) in data.chunks_mut(hw * xs[1]).enumerate() {
            for c in 0..xs[1] {
                let bv = bd[n * xs[1] + c];
                for v in &mut chunk[c * hw..(c + 1) * hw] {
                    *v += bv;
                }
            }
        }
        let out = Tensor::new(xs, data)?;
        self.push("sample_channel_bias", out, &[x, b], Op::SampleChannelBias { x, b })
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid("max_pool2d expects [N,C,H,W]"));
        }
        if k == 0 || stride == 0 {
            return Err(Error::invalid("max_pool2d window and stride must be positive"));
        }
        let out_h = conv_out_dim("height", xs[2], k, stride, 0)?;
        let out_w = conv_out_dim("width", xs[3], k, stride, 0)?;
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.value(x).data();
        let mut data = vec![0.0; n * c * out_h * out_w];
        let mut argmax = vec![0usize; data.len()];
        for nc in 0..n * c {
            let plane = &xd[nc * h * w..(nc + 1) * h * w];
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dh in 0..k {
                        for dw in 0..k {
                            let idx = (oh * stride + dh) * w + (ow * stride + dw);
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (nc * out_h + oh) * out_w + ow;
                    data[o] = best;
                    argmax[o] = nc * h * w + best_idx;
                }
            }
        }
        let out = Tensor::new(vec![n, c, out_h, out_w], data)?;
        self.push("max_pool2d", out, &[x], Op::MaxPool2d { x, argmax })
    }

    /// Global average over the spatial dims: `[N, C, H, W]` → `[N, C]`.
    pub fn mean_pool_global(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid("mean_pool_global expects [N,C,H,W]"));
        }
        let hw = (xs[2] * xs[3]) as f64;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(xs[2] * xs[3])
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        let out = Tensor::new(vec![xs[0], xs[1]], data)?;
        self.push("mean_pool_global", out, &[x], Op::MeanPoolGlobal(x))
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid("upsample2x expects [N,C,H,W]"));
        }
        let (h, w) = (xs[2], xs[3]);
        let xd = self.value(x).data();
        let mut data = vec![0.0; xd.len() * 4];
        for nc in 0..xs[0] * xs[1] {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut data[nc * 4 * h * w..(nc + 1) * 4 * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = src[i * w + j];
                    for di in 0..2 {
                        for dj in 0..2 {
                            dst[(2 * i + di) * 2 * w + (2 * j + dj)] = v;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![xs[0], xs[1], 2 * h, 2 * w], data)?;
        self.push("upsample2x", out, &[x], Op::Upsample2x(x))
    }

    /// Centered spatial crop of `[N, C, H, W]` down to `out_h x out_w`.
    pub fn crop_center(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || out_h > xs[2] || out_w > xs[3] || out_h == 0 || out_w == 0 {
            return Err(Error::invalid(format!(
                "crop_center: cannot crop {:?} to {}x{}",
                xs, out_h, out_w
            )));
        }
        let row0 = (xs[2] - out_h) / 2;
        let col0 = (xs[3] - out_w) / 2;
        let (h, w) = (xs[2], xs[3]);
        let xd = self.value(x).data();
        let mut data = vec![0.0; xs[0] * xs[1] * out_h * out_w];
        for nc in 0..xs[0] * xs[1] {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut data[nc * out_h * out_w..(nc + 1) * out_h * out_w];
            for i in 0..out_h {
                let s = (row0 + i) * w + col0;
                dst[i * out_w..(i + 1) * out_w].copy_from_slice(&src[s..s + out_w]);
            }
        }
        let out = Tensor::new(vec![xs[0], xs[1], out_h, out_w], data)?;
        self.push("crop_center", out, &[x], Op::CropCenter { x, row0, col0 })
    }

    // ── classification heads ─────────────────────────────────────────

    /// Row-wise softmax of `[N, K]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::invalid("softmax expects [N,K]"));
        }
        let k = xs[1];
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(k) {
            softmax_row(row);
        }
        let out = Tensor::new(xs, data)?;
        self.push("softmax", out, &[x], Op::Softmax(x))
    }

    /// Mean over the batch of per-row softmax cross-entropy.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.shape(logits).to_vec();
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(Error::invalid(format!(
                "cross_entropy: logits {:?} vs {} labels",
                xs,
                labels.len()
            )));
        }
        let k = xs[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("cross_entropy label {bad} out of range 0..{k}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            softmax_row(row);
            loss -= row[label].max(f64::MIN_POSITIVE).ln();
        }
        loss /= labels.len() as f64;
        let out = Tensor::scalar(loss);
        self.push(
            "cross_entropy",
            out,
            &[logits],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        )
    }

    /// Per-cell categorical cross-entropy of `[N, K, H, W]` logits against one
    /// label per cell (`labels[n*H*W + cell]`), summed over cells and averaged
    /// over the batch.
    pub fn cross_entropy_spatial(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.shape(logits).to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid("cross_entropy_spatial expects [N,K,H,W]"));
        }
        let (n, k, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if labels.len() != n * hw {
            return Err(Error::invalid(format!(
                "cross_entropy_spatial: expected {} labels, got {}",
                n * hw,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("cross_entropy_spatial label {bad} out of range")));
        }
        let xd = self.value(logits).data();
        let mut probs = vec![0.0; xd.len()];
        let mut loss = 0.0;
        let mut row = vec![0.0; k];
        for i in 0..n {
            for cell in 0..hw {
                for c in 0..k {
                    row[c] = xd[(i * k + c) * hw + cell];
                }
                softmax_row(&mut row);
                loss -= row[labels[i * hw + cell]].max(f64::MIN_POSITIVE).ln();
                for c in 0..k {
                    probs[(i * k + c) * hw + cell] = row[c];
                }
            }
        }
        loss /= n as f64;
        let out = Tensor::scalar(loss);
        self.push(
            "cross_entropy_spatial",
            out,
            &[logits],
            Op::CrossEntropySpatial { logits, labels: labels.to_vec(), probs },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let out = Tensor::scalar(s);
        self.push("sum_all", out, &[x], Op::SumAll(x))
    }

    // ── variational ops ──────────────────────────────────────────────

    /// `sample = mean + exp(logvar / 2) ⊙ eps`, differentiable w.r.t. mean
    /// and logvar; `eps` is a fixed noise draw.
    pub fn reparameterize(&mut self, mean: Var, logvar: Var, eps: &[f64]) -> Result<Var> {
        self.check_same_shape("reparameterize", mean, logvar)?;
        if eps.len() != self.value(mean).numel() {
            return Err(Error::invalid(format!(
                "reparameterize: {} eps values for {} dims",
                eps.len(),
                self.value(mean).numel()
            )));
        }
        let md = self.value(mean).data();
        let ld = self.value(logvar).data();
        let data: Vec<f64> = md
            .iter()
            .zip(ld)
            .zip(eps)
            .map(|((m, l), e)| m + (l / 2.0).exp() * e)
            .collect();
        let out = Tensor::new(self.shape(mean).to_vec(), data)?;
        self.push(
            "reparameterize",
            out,
            &[mean, logvar],
            Op::Reparameterize { mean, logvar, eps: eps.to_vec() },
        )
    }

    /// KL(N(mean, exp(logvar)) ‖ N(0, 1)) for `[N, D]`, summed over D and
    /// averaged over the batch: `0.5 Σ (μ² + e^l − 1 − l) / N`.
    pub fn kl_unit_gaussian(&mut self, mean: Var, logvar: Var) -> Result<Var> {
        self.check_same_shape("kl_unit_gaussian", mean, logvar)?;
        let n = self.shape(mean)[0] as f64;
        let md = self.value(mean).data();
        let ld = self.value(logvar).data();
        let kl: f64 = md
            .iter()
            .zip(ld)
            .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
            .sum::<f64>()
            / n;
        let out = Tensor::scalar(kl);
        self.push("kl_unit_gaussian", out, &[mean, logvar], Op::KlUnitGaussian { mean, logvar })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populates gradient buffers for every gradient-requiring node reachable
    /// from `loss`. Buffers are reset first, so repeated calls on the same
    /// tape yield identical gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            if node.requires_grad {
                match &mut node.grad {
                    Some(g) => g.fill(0.0),
                    slot => *slot = Some(vec![0.0; node.value.numel()]),
                }
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if self.nodes[i].requires_grad {
                self.backward_node(i);
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize) {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &mut rest[0];
        let g = match node.grad.as_deref() {
            Some(g) => g,
            None => return,
        };
        let accumulate = |nodes: &mut [Node], v: Var, delta: &[f64]| {
            if let Some(buf) = nodes[v.0].grad.as_deref_mut() {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
        };
        let wants = |nodes: &[Node], v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(before, *a, g);
                accumulate(before, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(before, *a, g);
                if wants(before, *b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(before, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(before, *a) {
                    let d: Vec<f64> =
                        g.iter().zip(before[b.0].value.data()).map(|(g, y)| g * y).collect();
                    accumulate(before, *a, &d);
                }
                if wants(before, *b) {
                    let d: Vec<f64> =
                        g.iter().zip(before[a.0].value.data()).map(|(g, x)| g * x).collect();
                    accumulate(before, *b, &d);
                }
            }
            Op::Scale(x, c) => {
                if wants(before, *x) {
                    let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(before, *x, &d);
                }
            }
            Op::Exp(x) => {
                if wants(before, *x) {
                    let d: Vec<f64> =
                        g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                    accumulate(before, *x, &d);
                }
            }
            Op::Relu(x) => {
                if wants(before, *x) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(before[x.0].value.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(before, *x, &d);
                }
            }
            Op::Sigmoid(x) => {
                if wants(before, *x) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    accumulate(before, *x, &d);
                }
            }
            Op::Reshape(x) => accumulate(before, *x, g),
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0;
                for &v in xs {
                    let s_axis = before[v.0].value.shape()[*axis];
                    if wants(before, v) {
                        let mut d = vec![0.0; before[v.0].value.numel()];
                        for o in 0..outer {
                            let src_start = (o * axis_total + offset) * inner;
                            let dst_start = o * s_axis * inner;
                            d[dst_start..dst_start + s_axis * inner]
                                .copy_from_slice(&g[src_start..src_start + s_axis * inner]);
                        }
                        accumulate(before, v, &d);
                    }
                    offset += s_axis;
                }
            }
            Op::Linear { x, w, b } => {
                let xs = before[x.0].value.shape();
                let (n, i) = (xs[0], xs[1]);
                let o = before[w.0].value.shape()[1];
                if wants(before, *x) {
                    let wd = before[w.0].value.data();
                    let mut d = vec![0.0; n * i];
                    for r in 0..n {
                        for c in 0..i {
                            let wrow = &wd[c * o..(c + 1) * o];
                            d[r * i + c] = g[r * o..(r + 1) * o]
                                .iter()
                                .zip(wrow)
                                .map(|(g, w)| g * w)
                                .sum();
                        }
                    }
                    accumulate(before, *x, &d);
                }
                if wants(before, *w) {
                    let xd = before[x.0].value.data();
                    let mut d = vec![0.0; i * o];
                    for r in 0..n {
                        for c in 0..i {
                            let xv = xd[r * i + c];
                            let drow = &mut d[c * o..(c + 1) * o];
                            for (dv, gv) in drow.iter_mut().zip(&g[r * o..(r + 1) * o]) {
                                *dv += xv * gv;
                            }
                        }
                    }
                    accumulate(before, *w, &d);
                }
                if wants(before, *b) {
                    let mut d = vec![0.0; o];
                    for r in 0..n {
                        for (dv, gv) in d.iter_mut().zip(&g[r * o..(r + 1) * o]) {
                            *dv += gv;
                        }
                    }
                    accumulate(before, *b, &d);
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let xs = before[x.0].value.shape().to_vec();
                let ks = before[k.0].value.shape().to_vec();
                let out_shape = node.value.shape().to_vec();
                let (dx, dk) = conv2d_backward(
                    before[x.0].value.data(),
                    &xs,
                    before[k.0].value.data(),
                    &ks,
                    *stride,
                    *pad,
                    g,
                    &out_shape,
                    wants(before, *x),
                    wants(before, *k),
                );
                if let Some(dx) = dx {
                    accumulate(before, *x, &dx);
                }
                if let Some(dk) = dk {
                    accumulate(before, *k, &dk);
                }
            }
            Op::ChannelBias { x, b } => {
                accumulate(before, *x, g);
                if wants(before, *b) {
                    let xs = before[x.0].value.shape();
                    let (c, hw) = (xs[1], xs[2] * xs[3]);
                    let mut d = vec![0.0; c];
                    for chunk in g.chunks(c * hw) {
                        for (ci, dv) in d.iter_mut().enumerate() {
                            *dv += chunk[ci * hw..(ci + 1) * hw].iter().sum::<f64>();
                        }
                    }
                    accumulate(before, *b, &d);
                }
            }
            Op::SampleChannelBias { x, b } => {
                accumulate(before, *x, g);
                if wants(before, *b) {
                    let xs = before[x.0].value.shape();
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut d = vec![0.0; n * c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let start = (ni * c + ci) * hw;
                            d[ni * c + ci] = g[start..start + hw].iter().sum();
                        }
                    }
                    accumulate(before, *b, &d);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if wants(before, *x) {
                    let mut d = vec![0.0; before[x.0].value.numel()];
                    for (gv, &src) in g.iter().zip(argmax) {
                        d[src] += gv;
                    }
                    accumulate(before, *x, &d);
                }
            }
            Op::MeanPoolGlobal(x) => {
                if wants(before, *x) {
                    let xs = before[x.0].value.shape();
                    let hw = xs[2] * xs[3];
                    let scale = 1.0 / hw as f64;
                    let mut d = vec![0.0; before[x.0].value.numel()];
                    for (nc, gv) in g.iter().enumerate() {
                        for v in &mut d[nc * hw..(nc + 1) * hw] {
                            *v = gv * scale;
                        }
                    }
                    accumulate(before, *x, &d);
                }
            }
            Op::Upsample2x(x) => {
                if wants(before, *x) {
                    let xs = before[x.0].value.shape();
                    let (h, w) = (xs[2], xs[3]);
                    let mut d = vec![0.0; before[x.0].value.numel()];
                    for nc in 0..xs[0] * xs[1] {
                        let gsrc = &g[nc * 4 * h * w..(nc + 1) * 4 * h * w];
                        let dst = &mut d[nc * h * w..(nc + 1) * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                let mut s = 0.0;
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        s += gsrc[(2 * i + di) * 2 * w + (2 * j + dj)];
                                    }
                                }
                                dst[i * w + j] = s;
                            }
                        }
                    }
                    accumulate(before, *x, &d);
                }
            }
            Op::CropCenter { x, row0, col0 } => {
                if wants(before, *x) {
                    let xs = before[x.0].value.shape();
                    let (h, w) = (xs[2], xs[3]);
                    let os = node.value.shape();
                    let (oh, ow) = (os[2], os[3]);
                    let mut d = vec![0.0; before[x.0].value.numel()];
                    for nc in 0..xs[0] * xs[1] {
                        let gsrc = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut d[nc * h * w..(nc + 1) * h * w];
                        for i in 0..oh {
                            let s = (row0 + i) * w + col0;
                            dst[s..s + ow].copy_from_slice(&gsrc[i * ow..(i + 1) * ow]);
                        }
                    }
                    accumulate(before, *x, &d);
                }
            }
            Op::Softmax(x) => {
                if wants(before, *x) {
                    let k = node.value.shape()[1];
                    let p = node.value.data();
                    let mut d = vec![0.0; p.len()];
                    for r in 0..p.len() / k {
                        let prow = &p[r * k..(r + 1) * k];
                        let grow = &g[r * k..(r + 1) * k];
                        let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                        for c in 0..k {
                            d[r * k + c] = prow[c] * (grow[c] - dot);
                        }
                    }
                    accumulate(before, *x, &d);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if wants(before, *logits) {
                    let k = before[logits.0].value.shape()[1];
                    let scale = g[0] / labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        d[r * k + label] -= 1.0;
                    }
                    for v in &mut d {
                        *v *= scale;
                    }
                    accumulate(before, *logits, &d);
                }
            }
            Op::CrossEntropySpatial { logits, labels, probs } => {
                if wants(before, *logits) {
                    let xs = before[logits.0].value.shape();
                    let (n, k, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let scale = g[0] / n as f64;
                    let mut d = probs.clone();
                    for i in 0..n {
                        for cell in 0..hw {
                            let label = labels[i * hw + cell];
                            d[(i * k + label) * hw + cell] -= 1.0;
                        }
                    }
                    for v in &mut d {
                        *v *= scale;
                    }
                    accumulate(before, *logits, &d);
                }
            }
            Op::SumAll(x) => {
                if wants(before, *x) {
                    let d = vec![g[0]; before[x.0].value.numel()];
                    accumulate(before, *x, &d);
                }
            }
            Op::Reparameterize { mean, logvar, eps } => {
                accumulate(before, *mean, g);
                if wants(before, *logvar) {
                    let ld = before[logvar.0].value.data();
                    let d: Vec<f64> = g
                        .iter()
                        .zip(ld)
                        .zip(eps)
                        .map(|((g, l), e)| g * 0.5 * (l / 2.0).exp() * e)
                        .collect();
                    accumulate(before, *logvar, &d);
                }
            }
            Op::KlUnitGaussian { mean, logvar } => {
                let n = before[mean.0].value.shape()[0] as f64;
                let scale = g[0] / n;
                if wants(before, *mean) {
                    let d: Vec<f64> =
                        before[mean.0].value.data().iter().map(|m| scale * m).collect();
                    accumulate(before, *mean, &d);
                }
                if wants(before, *logvar) {
                    let d: Vec<f64> = before[logvar.0]
                        .value
                        .data()
                        .iter()
                        .map(|l| scale * 0.5 * (l.exp() - 1.0))
                        .collect();
                    accumulate(before, *logvar, &d);
                }
            }
        }
    }

    fn check_same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_data(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect()
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn conv_out_dim(what: &str, input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::invalid(format!(
            "conv {what}: kernel {kernel} exceeds padded input {padded}"
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::invalid(format!(
            "conv {what}: ({input} + 2*{pad} - {kernel}) not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    xs: &[usize],
    k: &[f64],
    ks: &[usize],
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let (c, h, w) = (xs[1], xs[2], xs[3]);
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    let xst = strides(xs);
    let mut out = vec![0.0; xs[0] * f * out_h * out_w];
    out.par_chunks_mut(f * out_h * out_w)
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x[n * xst[0]..(n + 1) * xst[0]];
            for fi in 0..f {
                let kern = &k[fi * c * kh * kw..(fi + 1) * c * kh * kw];
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            let plane = &x_n[ci * h * w..(ci + 1) * h * w];
                            let kplane = &kern[ci * kh * kw..(ci + 1) * kh * kw];
                            for dh in 0..kh {
                                let ih = oh * stride + dh;
                                if ih < pad || ih - pad >= h {
                                    continue;
                                }
                                let row = &plane[(ih - pad) * w..(ih - pad + 1) * w];
                                for dw in 0..kw {
                                    let iw = ow * stride + dw;
                                    if iw < pad || iw - pad >= w {
                                        continue;
                                    }
                                    acc += row[iw - pad] * kplane[dh * kw + dw];
                                }
                            }
                        }
                        out_n[(fi * out_h + oh) * out_w + ow] = acc;
                    }
                }
            }
        });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    xs: &[usize],
    k: &[f64],
    ks: &[usize],
    stride: usize,
    pad: usize,
    g: &[f64],
    out_shape: &[usize],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    let (out_h, out_w) = (out_shape[2], out_shape[3]);
    let dx = if want_dx {
        let mut dx = vec![0.0; x.len()];
        dx.par_chunks_mut(c * h * w).enumerate().for_each(|(ni, dx_n)| {
            let g_n = &g[ni * f * out_h * out_w..(ni + 1) * f * out_h * out_w];
            for fi in 0..f {
                let kern = &k[fi * c * kh * kw..(fi + 1) * c * kh * kw];
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let gv = g_n[(fi * out_h + oh) * out_w + ow];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            let kplane = &kern[ci * kh * kw..(ci + 1) * kh * kw];
                            for dh in 0..kh {
                                let ih = oh * stride + dh;
                                if ih < pad || ih - pad >= h {
                                    continue;
                                }
                                for dw in 0..kw {
                                    let iw = ow * stride + dw;
                                    if iw < pad || iw - pad >= w {
                                        continue;
                                    }
                                    dx_n[ci * h * w + (ih - pad) * w + (iw - pad)] +=
                                        gv * kplane[dh * kw + dw];
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(dx)
    } else {
        None
    };
    let dk = if want_dk {
        // Per-sample partials, then a fixed-order sum for determinism.
        let partials: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let x_n = &x[ni * c * h * w..(ni + 1) * c * h * w];
                let g_n = &g[ni * f * out_h * out_w..(ni + 1) * f * out_h * out_w];
                let mut dk_n = vec![0.0; k.len()];
                for fi in 0..f {
                    for oh in 0..out_h {
                        for ow in 0..out_w {
                            let gv = g_n[(fi * out_h + oh) * out_w + ow];
                            if gv == 0.0 {
                                continue;
                            }
                            for ci in 0..c {
                                let plane = &x_n[ci * h * w..(ci + 1) * h * w];
                                let kplane =
                                    &mut dk_n[(fi * c + ci) * kh * kw..(fi * c + ci + 1) * kh * kw];
                                for dh in 0..kh {
                                    let ih = oh * stride + dh;
                                    if ih < pad || ih - pad >= h {
                                        continue;
                                    }
                                    for dw in 0..kw {
                                        let iw = ow * stride + dw;
                                        if iw < pad || iw - pad >= w {
                                            continue;
                                        }
                                        kplane[dh * kw + dw] += gv * plane[(ih - pad) * w + (iw - pad)];
                                    }
                                }
                            }
                        }
                    }
                }
                dk_n
            })
            .collect();
        let mut dk = vec![0.0; k.len()];
        for part in &partials {
            for (d, p) in dk.iter_mut().zip(part) {
                *d += p;
            }
        }
        Some(dk)
    } else {
        None
    };
    (dx, dk)
}
