//! The recorded computation graph.
//!
//! Operations append nodes to an arena; node indices only ever point
//! backwards, so reverse iteration over the arena is a topological backward
//! pass that visits every reachable node exactly once. Forward values and
//! propagated gradients are checked for non-finite entries as they are
//! produced, naming the offending operation.

use std::collections::HashMap;

use super::{Mode, NnError, ParamSet, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

struct BnSaved {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

enum OpKind {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    BatchNorm(Box<BnSaved>),
    Relu,
    AvgPool2x2,
    AvgPoolGlobal,
    Linear,
    Concat { axis: usize },
    SoftmaxCrossEntropy { probs: Vec<f64>, labels: Vec<usize> },
    RegressionLoss,
    Sum,
    Scale { factor: f64 },
    Reshape,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::BatchNorm(_) => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::AvgPool2x2 => "avg_pool_2x2",
            OpKind::AvgPoolGlobal => "avg_pool_global",
            OpKind::Linear => "linear",
            OpKind::Concat { .. } => "concat",
            OpKind::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            OpKind::RegressionLoss => "regression_loss",
            OpKind::Sum => "sum",
            OpKind::Scale { .. } => "scale",
            OpKind::Reshape => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    /// Empty until backward reaches this node.
    grad: Vec<f64>,
    parents: Vec<usize>,
    op: OpKind,
}

/// Recorded operations plus the parameters bound into the recording.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
    bindings: Vec<(usize, Var)>,
}

/// Values-per-channel layout for batch norm: `(batch, channels, spatial)`.
fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize), NnError> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        [n, f] => Ok((*n, *f, 1)),
        other => Err(NnError::ShapeMismatch(format!(
            "batch norm expects rank-2 or rank-4 input, got {other:?}"
        ))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of parameters bound into this graph so far.
    pub fn binding_count(&self) -> usize {
        self.bindings.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    /// Accumulated gradient of the last backward pass at `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].grad
    }

    /// Recorded (operation name, value) pairs, for inspection and tests.
    pub fn nodes_debug(&self) -> Vec<(&'static str, &Tensor)> {
        self.nodes
            .iter()
            .map(|n| (n.op.name(), &n.value))
            .collect()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, op: OpKind) -> Result<Var, NnError> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            grad: Vec::new(),
            parents,
            op,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
        })
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, NnError> {
        self.push(value, vec![], OpKind::Leaf)
    }

    /// Binds a parameter as a leaf; repeated binds return the same node, so
    /// every use shares one gradient accumulator.
    pub fn param_var(&mut self, params: &ParamSet, slot: usize) -> Result<Var, NnError> {
        if let Some(&v) = self.bound.get(&slot) {
            return Ok(v);
        }
        let v = self.leaf(params.param(slot).value.clone())?;
        self.bound.insert(slot, v);
        self.bindings.push((slot, v));
        Ok(v)
    }

    /// Cross-correlation of `x` `[N,C,H,W]` with `weight` `[K,C,kh,kw]` plus
    /// `bias` `[K]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, NnError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (k, wc, kh, kw) = self.value(weight).dims4()?;
        if wc != c {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d: input has {c} channels, weight expects {wc}"
            )));
        }
        if self.value(bias).shape() != [k] {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d: bias shape {:?} does not match {k} filters",
                self.value(bias).shape()
            )));
        }
        if stride == 0 {
            return Err(NnError::ShapeMismatch("conv2d: stride must be > 0".into()));
        }
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0
        {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d: {h}x{w} input incompatible with {kh}x{kw} kernel, stride {stride}, padding {padding}"
            )));
        }
        let oh = (span_h - kh) / stride + 1;
        let ow = (span_w - kw) / stride + 1;

        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };
        let mut out = vec![0.0; n * k * oh * ow];
        conv_forward(
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &mut out,
            n,
            k,
            geom,
        );
        let value = Tensor::from_vec(&[n, k, oh, ow], out)?;
        self.push(
            value,
            vec![x.id, weight.id, bias.id],
            OpKind::Conv2d { stride, padding },
        )
    }

    /// Normalizes per channel. Train mode uses batch statistics and updates
    /// the running buffers in place; eval mode reads the running buffers.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        mode: Mode,
    ) -> Result<Var, NnError> {
        let (n, c, spatial) = bn_dims(self.value(x).shape())?;
        for (name, var) in [("gamma", gamma), ("beta", beta)] {
            if self.value(var).shape() != [c] {
                return Err(NnError::ShapeMismatch(format!(
                    "batch norm: {name} shape {:?} does not match {c} channels",
                    self.value(var).shape()
                )));
            }
        }
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(NnError::ShapeMismatch(
                "batch norm: running stats do not match channel count".into(),
            ));
        }
        let m = n * spatial;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();

        let (mean, var) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(NnError::DegenerateBatch);
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * spatial;
                        for &v in &xv[base..base + spatial] {
                            acc += v;
                        }
                    }
                    mean[ci] = acc / m as f64;
                    let mut acc2 = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * spatial;
                        for &v in &xv[base..base + spatial] {
                            let d = v - mean[ci];
                            acc2 += d * d;
                        }
                    }
                    var[ci] = acc2 / m as f64;
                }
                let rm = running_mean.data_mut();
                let rv = running_var.data_mut();
                let unbias = m as f64 / (m - 1) as f64;
                for ci in 0..c {
                    rm[ci] = (1.0 - BN_MOMENTUM) * rm[ci] + BN_MOMENTUM * mean[ci];
                    rv[ci] = (1.0 - BN_MOMENTUM) * rv[ci] + BN_MOMENTUM * var[ci] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                running_mean.data().to_vec(),
                running_var.data().to_vec(),
            ),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let (m, s, gain, shift) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for (o, v) in out[base..base + spatial].iter_mut().zip(&xv[base..base + spatial]) {
                    *o = gain * (v - m) * s + shift;
                }
            }
        }
        let value = Tensor::from_vec(self.value(x).shape(), out)?;
        self.push(
            value,
            vec![x.id, gamma.id, beta.id],
            OpKind::BatchNorm(Box::new(BnSaved { mean, inv_std })),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        let value = Tensor::from_vec(
            self.value(x).shape(),
            self.value(x).data().iter().map(|v| v.max(0.0)).collect(),
        )?;
        self.push(value, vec![x.id], OpKind::Relu)
    }

    /// 2x2 average pooling with stride 2; spatial dimensions must be even.
    pub fn avg_pool_2x2(&mut self, x: Var) -> Result<Var, NnError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::ShapeMismatch(format!(
                "avg_pool_2x2: spatial dims {h}x{w} must be even"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let ibase = nc * h * w;
            let obase = nc * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let p = ibase + 2 * i * w + 2 * j;
                    out[obase + i * ow + j] = 0.25 * (xv[p] + xv[p + 1] + xv[p + w] + xv[p + w + 1]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        self.push(value, vec![x.id], OpKind::AvgPool2x2)
    }

    /// Mean over the spatial extent: `[N,C,H,W] -> [N,C]`.
    pub fn avg_pool_global(&mut self, x: Var) -> Result<Var, NnError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for nc in 0..n * c {
            let base = nc * hw;
            out[nc] = xv[base..base + hw].iter().sum::<f64>() / hw as f64;
        }
        let value = Tensor::from_vec(&[n, c], out)?;
        self.push(value, vec![x.id], OpKind::AvgPoolGlobal)
    }

    /// Fully connected layer: `x [N,F] * weight [O,F]^T + bias [O]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, NnError> {
        let (n, f) = self.value(x).dims2()?;
        let (o, wf) = self.value(weight).dims2()?;
        if wf != f {
            return Err(NnError::ShapeMismatch(format!(
                "linear: input features {f} do not match weight features {wf}"
            )));
        }
        if self.value(bias).shape() != [o] {
            return Err(NnError::ShapeMismatch(format!(
                "linear: bias shape {:?} does not match {o} outputs",
                self.value(bias).shape()
            )));
        }
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; n * o];
        for ni in 0..n {
            for oi in 0..o {
                let mut acc = bv[oi];
                let xrow = &xv[ni * f..(ni + 1) * f];
                let wrow = &wv[oi * f..(oi + 1) * f];
                for (a, b) in xrow.iter().zip(wrow) {
                    acc += a * b;
                }
                out[ni * o + oi] = acc;
            }
        }
        let value = Tensor::from_vec(&[n, o], out)?;
        self.push(value, vec![x.id, weight.id, bias.id], OpKind::Linear)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, NnError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(NnError::ShapeMismatch(format!(
                "concat: shapes {sa:?} and {sb:?} along axis {axis}"
            )));
        }
        for (d, (&x, &y)) in sa.iter().zip(&sb).enumerate() {
            if d != axis && x != y {
                return Err(NnError::ShapeMismatch(format!(
                    "concat: shapes {sa:?} and {sb:?} differ outside axis {axis}"
                )));
            }
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let a_block = sa[axis] * inner;
        let b_block = sb[axis] * inner;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for k in 0..outer {
            out.extend_from_slice(&av[k * a_block..(k + 1) * a_block]);
            out.extend_from_slice(&bv[k * b_block..(k + 1) * b_block]);
        }
        let value = Tensor::from_vec(&shape, out)?;
        self.push(value, vec![a.id, b.id], OpKind::Concat { axis })
    }

    /// Mean negative log-likelihood over the batch, stabilized by
    /// max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let (n, c) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(NnError::ShapeMismatch(format!(
                "softmax_cross_entropy: {} labels for batch of {n}",
                labels.len()
            )));
        }
        if n == 0 {
            return Err(NnError::ShapeMismatch(
                "softmax_cross_entropy: empty batch".into(),
            ));
        }
        for &l in labels {
            if l >= c {
                return Err(NnError::LabelOutOfRange { label: l, classes: c });
            }
        }
        let zv = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for ni in 0..n {
            let row = &zv[ni * c..(ni + 1) * c];
            let zmax = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &z in row {
                denom += (z - zmax).exp();
            }
            for ci in 0..c {
                probs[ni * c + ci] = (row[ci] - zmax).exp() / denom;
            }
            loss += denom.ln() + zmax - row[labels[ni]];
        }
        loss /= n as f64;
        self.push(
            Tensor::scalar(loss),
            vec![logits.id],
            OpKind::SoftmaxCrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Mean over the batch of one half the squared distance per row.
    pub fn regression_loss(&mut self, predicted: Var, target: Var) -> Result<Var, NnError> {
        let sp = self.value(predicted).shape();
        let st = self.value(target).shape();
        if sp != st {
            return Err(NnError::ShapeMismatch(format!(
                "regression_loss: predicted {sp:?} vs target {st:?}"
            )));
        }
        let (n, _) = self.value(predicted).dims2()?;
        if n == 0 {
            return Err(NnError::ShapeMismatch("regression_loss: empty batch".into()));
        }
        let pv = self.value(predicted).data();
        let tv = self.value(target).data();
        let mut loss = 0.0;
        for (p, t) in pv.iter().zip(tv) {
            let d = p - t;
            loss += 0.5 * d * d;
        }
        loss /= n as f64;
        self.push(
            Tensor::scalar(loss),
            vec![predicted.id, target.id],
            OpKind::RegressionLoss,
        )
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), vec![x.id], OpKind::Sum)
    }

    /// Reinterprets the value under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let value = Tensor::from_vec(shape, self.value(x).data().to_vec())?;
        self.push(value, vec![x.id], OpKind::Reshape)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NnError> {
        let value = Tensor::from_vec(
            self.value(x).shape(),
            self.value(x).data().iter().map(|v| v * factor).collect(),
        )?;
        self.push(value, vec![x.id], OpKind::Scale { factor })
    }

    /// Propagates gradients of a scalar loss to every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if loss.id >= self.nodes.len() {
            return Err(NnError::DisconnectedLoss);
        }
        if self.nodes[loss.id].value.numel() != 1 {
            return Err(NnError::NotScalar);
        }
        for node in &mut self.nodes {
            node.grad = Vec::new();
        }
        self.nodes[loss.id].grad = vec![1.0];
        for i in (0..=loss.id).rev() {
            if self.nodes[i].grad.is_empty() {
                continue;
            }
            let (left, right) = self.nodes.split_at_mut(i);
            let node = &right[0];
            if node.grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFinite { op: node.op.name() });
            }
            let contributions = op_backward(node, left)?;
            for (parent, grad) in contributions {
                debug_assert_eq!(grad.len(), left[parent].value.numel());
                if left[parent].grad.is_empty() {
                    left[parent].grad = grad;
                } else {
                    for (dst, src) in left[parent].grad.iter_mut().zip(grad) {
                        *dst += src;
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes accumulated gradients into the bound parameters; parameters
    /// never bound into this graph get zero gradients.
    pub fn collect_grads(&self, params: &mut ParamSet) -> Result<(), NnError> {
        for i in 0..params.len() {
            let shape = params.param(i).value.shape().to_vec();
            params.param_mut(i).grad = Some(Tensor::zeros(&shape));
        }
        for &(slot, var) in &self.bindings {
            let node = &self.nodes[var.id];
            if !node.grad.is_empty() {
                params.param_mut(slot).grad =
                    Some(Tensor::from_vec(node.value.shape(), node.grad.clone())?);
            }
        }
        Ok(())
    }
}

/// Output positions `o` with `o*stride + tap - padding` inside `[0, extent)`.
fn valid_out_range(
    tap: usize,
    padding: usize,
    stride: usize,
    extent: usize,
    out_extent: usize,
) -> (usize, usize) {
    let s = stride as isize;
    let offset = tap as isize - padding as isize;
    let lo = (-offset + s - 1).div_euclid(s).max(0) as usize;
    let hi_isize = (extent as isize - 1 - offset).div_euclid(s) + 1;
    let hi = hi_isize.clamp(0, out_extent as isize) as usize;
    (lo.min(hi), hi)
}

/// Geometry of one convolution, shared by the lowering helpers.
#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image (`C*H*W`) into patch rows (`C*kh*kw` x `oh*ow`),
/// zero-filling taps outside the input.
fn im2col(x_img: &[f64], g: ConvGeom, patches: &mut [f64]) {
    let cols = g.cols();
    let mut row = 0;
    for ci in 0..g.c {
        let plane = &x_img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            let (olo_h, ohi_h) = valid_out_range(i, g.padding, g.stride, g.h, g.oh);
            for j in 0..g.kw {
                let dst_row = &mut patches[row * cols..(row + 1) * cols];
                dst_row.fill(0.0);
                let (olo_w, ohi_w) = valid_out_range(j, g.padding, g.stride, g.w, g.ow);
                if olo_w < ohi_w {
                    for o_h in olo_h..ohi_h {
                        let ih = o_h * g.stride + i - g.padding;
                        let src = &plane[ih * g.w..(ih + 1) * g.w];
                        let dst = &mut dst_row[o_h * g.ow + olo_w..o_h * g.ow + ohi_w];
                        if g.stride == 1 {
                            let iw0 = olo_w + j - g.padding;
                            dst.copy_from_slice(&src[iw0..iw0 + (ohi_w - olo_w)]);
                        } else {
                            for (t, o_w) in dst.iter_mut().zip(olo_w..ohi_w) {
                                *t = src[o_w * g.stride + j - g.padding];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds patch-row gradients back onto the image gradient, accumulating
/// where patches overlap.
fn col2im_acc(patches: &[f64], g: ConvGeom, dx_img: &mut [f64]) {
    let cols = g.cols();
    let mut row = 0;
    for ci in 0..g.c {
        let plane = &mut dx_img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            let (olo_h, ohi_h) = valid_out_range(i, g.padding, g.stride, g.h, g.oh);
            for j in 0..g.kw {
                let src_row = &patches[row * cols..(row + 1) * cols];
                let (olo_w, ohi_w) = valid_out_range(j, g.padding, g.stride, g.w, g.ow);
                if olo_w < ohi_w {
                    for o_h in olo_h..ohi_h {
                        let ih = o_h * g.stride + i - g.padding;
                        let dst = &mut plane[ih * g.w..(ih + 1) * g.w];
                        let src = &src_row[o_h * g.ow + olo_w..o_h * g.ow + ohi_w];
                        if g.stride == 1 {
                            let iw0 = olo_w + j - g.padding;
                            for (d, s) in dst[iw0..iw0 + src.len()].iter_mut().zip(src) {
                                *d += s;
                            }
                        } else {
                            for (s, o_w) in src.iter().zip(olo_w..ohi_w) {
                                dst[o_w * g.stride + j - g.padding] += s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c[M,N] += a[M,K] * b[K,N]`.
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, kdim: usize, n: usize) {
    for mi in 0..m {
        let a_row = &a[mi * kdim..(mi + 1) * kdim];
        let c_row = &mut c[mi * n..(mi + 1) * n];
        for (ki, &av) in a_row.iter().enumerate() {
            let b_row = &b[ki * n..(ki + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[M,N] += a[M,K] * b[N,K]^T` (rows of `b` dotted against rows of `a`).
fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, kdim: usize, n: usize) {
    for mi in 0..m {
        let a_row = &a[mi * kdim..(mi + 1) * kdim];
        let c_row = &mut c[mi * n..(mi + 1) * n];
        for (ni, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[ni * kdim..(ni + 1) * kdim];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// `c[K,N] += a[M,K]^T * b[M,N]` (columns of `a` scale rows of `b`).
fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, kdim: usize, n: usize) {
    for mi in 0..m {
        let a_row = &a[mi * kdim..(mi + 1) * kdim];
        let b_row = &b[mi * n..(mi + 1) * n];
        for (ki, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[ki * n..(ki + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
    n: usize,
    k: usize,
    geom: ConvGeom,
) {
    let cols = geom.cols();
    let rows = geom.patch_rows();
    let mut patches = vec![0.0; rows * cols];
    let img = geom.c * geom.h * geom.w;
    for ni in 0..n {
        im2col(&x[ni * img..(ni + 1) * img], geom, &mut patches);
        let out_img = &mut out[ni * k * cols..(ni + 1) * k * cols];
        for (ki, chunk) in out_img.chunks_exact_mut(cols).enumerate() {
            chunk.fill(bias[ki]);
        }
        matmul_acc(weight, &patches, out_img, k, rows, cols);
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    n: usize,
    k: usize,
    geom: ConvGeom,
) {
    let cols = geom.cols();
    let rows = geom.patch_rows();
    let mut patches = vec![0.0; rows * cols];
    let mut dpatches = vec![0.0; rows * cols];
    let img = geom.c * geom.h * geom.w;
    for ni in 0..n {
        let g_img = &grad_out[ni * k * cols..(ni + 1) * k * cols];
        for (ki, chunk) in g_img.chunks_exact(cols).enumerate() {
            db[ki] += chunk.iter().sum::<f64>();
        }
        im2col(&x[ni * img..(ni + 1) * img], geom, &mut patches);
        // dW += dY * patches^T
        matmul_bt_acc(g_img, &patches, dw, k, cols, rows);
        // dPatches = W^T * dY, folded back onto dX.
        dpatches.fill(0.0);
        matmul_at_acc(weight, g_img, &mut dpatches, k, rows, cols);
        col2im_acc(&dpatches, geom, &mut dx[ni * img..(ni + 1) * img]);
    }
}

fn op_backward(node: &Node, left: &[Node]) -> Result<Vec<(usize, Vec<f64>)>, NnError> {
    let g = &node.grad;
    match &node.op {
        OpKind::Leaf => Ok(vec![]),
        OpKind::Conv2d { stride, padding } => {
            let (px, pw, pb) = (node.parents[0], node.parents[1], node.parents[2]);
            let x = &left[px].value;
            let weight = &left[pw].value;
            let (n, c, h, w) = x.dims4()?;
            let (k, _, kh, kw) = weight.dims4()?;
            let (_, _, oh, ow) = node.value.dims4()?;
            let geom = ConvGeom {
                c,
                h,
                w,
                kh,
                kw,
                stride: *stride,
                padding: *padding,
                oh,
                ow,
            };
            let mut dx = vec![0.0; x.numel()];
            let mut dw = vec![0.0; weight.numel()];
            let mut db = vec![0.0; k];
            conv_backward(
                x.data(),
                weight.data(),
                g,
                &mut dx,
                &mut dw,
                &mut db,
                n,
                k,
                geom,
            );
            Ok(vec![(px, dx), (pw, dw), (pb, db)])
        }
        OpKind::BatchNorm(saved) => {
            let (px, pg, pb) = (node.parents[0], node.parents[1], node.parents[2]);
            let (n, c, spatial) = bn_dims(node.value.shape())?;
            let m = (n * spatial) as f64;
            let gv = left[pg].value.data();
            let xv = left[px].value.data();
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * spatial;
                    let (mu, istd) = (saved.mean[ci], saved.inv_std[ci]);
                    let mut acc_dy = 0.0;
                    let mut acc_dyx = 0.0;
                    for (dy, v) in g[base..base + spatial].iter().zip(&xv[base..base + spatial]) {
                        acc_dy += dy;
                        acc_dyx += dy * (v - mu) * istd;
                    }
                    sum_dy[ci] += acc_dy;
                    sum_dy_xhat[ci] += acc_dyx;
                }
            }
            let dgamma = sum_dy_xhat.clone();
            let dbeta = sum_dy.clone();
            let mut dx = vec![0.0; node.value.numel()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * spatial;
                    let (mu, istd) = (saved.mean[ci], saved.inv_std[ci]);
                    let scale = gv[ci] * istd;
                    let mean_dy = sum_dy[ci] / m;
                    let mean_dy_xhat = sum_dy_xhat[ci] / m;
                    for ((d, dy), v) in dx[base..base + spatial]
                        .iter_mut()
                        .zip(&g[base..base + spatial])
                        .zip(&xv[base..base + spatial])
                    {
                        let xh = (v - mu) * istd;
                        *d = scale * (dy - mean_dy - xh * mean_dy_xhat);
                    }
                }
            }
            Ok(vec![(px, dx), (pg, dgamma), (pb, dbeta)])
        }
        OpKind::Relu => {
            let px = node.parents[0];
            let xv = left[px].value.data();
            let dx = xv
                .iter()
                .zip(g)
                .map(|(&x, &dy)| if x > 0.0 { dy } else { 0.0 })
                .collect();
            Ok(vec![(px, dx)])
        }
        OpKind::AvgPool2x2 => {
            let px = node.parents[0];
            let (n, c, h, w) = left[px].value.dims4()?;
            let (oh, ow) = (h / 2, w / 2);
            let mut dx = vec![0.0; left[px].value.numel()];
            for nc in 0..n * c {
                let ibase = nc * h * w;
                let obase = nc * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let share = 0.25 * g[obase + i * ow + j];
                        let p = ibase + 2 * i * w + 2 * j;
                        dx[p] += share;
                        dx[p + 1] += share;
                        dx[p + w] += share;
                        dx[p + w + 1] += share;
                    }
                }
            }
            Ok(vec![(px, dx)])
        }
        OpKind::AvgPoolGlobal => {
            let px = node.parents[0];
            let (n, c, h, w) = left[px].value.dims4()?;
            let hw = h * w;
            let mut dx = vec![0.0; left[px].value.numel()];
            for nc in 0..n * c {
                let share = g[nc] / hw as f64;
                let base = nc * hw;
                for d in &mut dx[base..base + hw] {
                    *d += share;
                }
            }
            Ok(vec![(px, dx)])
        }
        OpKind::Linear => {
            let (px, pw, pb) = (node.parents[0], node.parents[1], node.parents[2]);
            let (n, f) = left[px].value.dims2()?;
            let (o, _) = left[pw].value.dims2()?;
            let xv = left[px].value.data();
            let wv = left[pw].value.data();
            let mut dx = vec![0.0; n * f];
            let mut dw = vec![0.0; o * f];
            let mut db = vec![0.0; o];
            for ni in 0..n {
                for oi in 0..o {
                    let dy = g[ni * o + oi];
                    db[oi] += dy;
                    let xrow = &xv[ni * f..(ni + 1) * f];
                    let wrow = &wv[oi * f..(oi + 1) * f];
                    let dxrow = &mut dx[ni * f..(ni + 1) * f];
                    for fi in 0..f {
                        dxrow[fi] += dy * wrow[fi];
                    }
                    let dwrow = &mut dw[oi * f..(oi + 1) * f];
                    for fi in 0..f {
                        dwrow[fi] += dy * xrow[fi];
                    }
                }
            }
            Ok(vec![(px, dx), (pw, dw), (pb, db)])
        }
        OpKind::Concat { axis } => {
            let (pa, pb) = (node.parents[0], node.parents[1]);
            let sa = left[pa].value.shape();
            let sb = left[pb].value.shape();
            let outer: usize = sa[..*axis].iter().product();
            let inner: usize = sa[*axis + 1..].iter().product();
            let a_block = sa[*axis] * inner;
            let b_block = sb[*axis] * inner;
            let mut da = vec![0.0; left[pa].value.numel()];
            let mut db = vec![0.0; left[pb].value.numel()];
            let stride = a_block + b_block;
            for k in 0..outer {
                da[k * a_block..(k + 1) * a_block]
                    .copy_from_slice(&g[k * stride..k * stride + a_block]);
                db[k * b_block..(k + 1) * b_block]
                    .copy_from_slice(&g[k * stride + a_block..(k + 1) * stride]);
            }
            Ok(vec![(pa, da), (pb, db)])
        }
        OpKind::SoftmaxCrossEntropy { probs, labels } => {
            let px = node.parents[0];
            let n = labels.len();
            let c = probs.len() / n;
            let upstream = g[0];
            let mut dx = probs.clone();
            for (ni, &l) in labels.iter().enumerate() {
                dx[ni * c + l] -= 1.0;
            }
            for d in &mut dx {
                *d *= upstream / n as f64;
            }
            Ok(vec![(px, dx)])
        }
        OpKind::RegressionLoss => {
            let (pp, pt) = (node.parents[0], node.parents[1]);
            let pv = left[pp].value.data();
            let tv = left[pt].value.data();
            let n = left[pp].value.shape()[0] as f64;
            let upstream = g[0];
            let dpred: Vec<f64> = pv
                .iter()
                .zip(tv)
                .map(|(p, t)| upstream * (p - t) / n)
                .collect();
            let dtarget: Vec<f64> = dpred.iter().map(|d| -d).collect();
            Ok(vec![(pp, dpred), (pt, dtarget)])
        }
        OpKind::Sum => {
            let px = node.parents[0];
            Ok(vec![(px, vec![g[0]; left[px].value.numel()])])
        }
        OpKind::Scale { factor } => {
            let px = node.parents[0];
            Ok(vec![(px, g.iter().map(|dy| dy * factor).collect())])
        }
        OpKind::Reshape => {
            let px = node.parents[0];
            Ok(vec![(px, g.clone())])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{sgd_step, SgdConfig};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(shape, 1.0, rng)
    }

    /// Central finite differences on a set of parameters against the
    /// analytic gradients for `loss_fn`.
    fn check_gradients(
        params: &mut ParamSet,
        loss_fn: &mut dyn FnMut(&ParamSet) -> f64,
        analytic: &[(usize, Tensor)],
        eps: f64,
        tol: f64,
    ) {
        for (slot, grad) in analytic {
            let n = params.param(*slot).value.numel();
            for i in 0..n {
                let orig = params.param(*slot).value.data()[i];
                params.param_mut(*slot).value.data_mut()[i] = orig + eps;
                let up = loss_fn(params);
                params.param_mut(*slot).value.data_mut()[i] = orig - eps;
                let down = loss_fn(params);
                params.param_mut(*slot).value.data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = grad.data()[i];
                let denom = an.abs().max(fd.abs());
                if denom >= 1e-6 {
                    let rel = (an - fd).abs() / denom;
                    assert!(
                        rel < tol,
                        "param {slot} element {i}: analytic {an} vs fd {fd} (rel {rel})"
                    );
                } else {
                    assert!(
                        (an - fd).abs() < 1e-8,
                        "param {slot} element {i}: analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn conv2d_one_by_one_identity_kernel() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = rand_tensor(&[2, 1, 4, 4], &mut rng);
        let x = g.leaf(xt.clone()).unwrap();
        let w = g.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap()).unwrap();
        let b = g.leaf(Tensor::zeros(&[1])).unwrap();
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), xt.data());
    }

    #[test]
    fn conv2d_zero_input_broadcasts_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        let w = g.leaf(Tensor::zeros(&[4, 2, 3, 3])).unwrap();
        let b = g
            .leaf(Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap())
            .unwrap();
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let (_, k, oh, ow) = g.value(y).dims4().unwrap();
        assert_eq!((k, oh, ow), (4, 3, 3));
        for ki in 0..4 {
            for s in 0..9 {
                assert_eq!(g.value(y).data()[ki * 9 + s], [0.5, -1.0, 2.0, 0.0][ki]);
            }
        }
    }

    #[test]
    fn conv2d_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let size = 5usize;
        let xt = rand_tensor(&[1, 1, size, size], &mut rng);
        let wt = rand_tensor(&[1, 1, 3, 3], &mut rng);
        let bt = rand_tensor(&[1], &mut rng);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
            let mut g = Graph::new();
            let x = g.leaf(xt.clone()).unwrap();
            let w = g.leaf(wt.clone()).unwrap();
            let b = g.leaf(bt.clone()).unwrap();
            let y = g.conv2d(x, w, b, stride, padding).unwrap();
            let (_, _, oh, ow) = g.value(y).dims4().unwrap();
            for o_h in 0..oh {
                for o_w in 0..ow {
                    let mut acc = bt.data()[0];
                    for i in 0..3 {
                        for j in 0..3 {
                            let ih = (o_h * stride + i) as isize - padding as isize;
                            let iw = (o_w * stride + j) as isize - padding as isize;
                            if ih >= 0 && iw >= 0 && ih < size as isize && iw < size as isize {
                                acc += wt.data()[i * 3 + j]
                                    * xt.data()[ih as usize * size + iw as usize];
                            }
                        }
                    }
                    let got = g.value(y).data()[o_h * ow + o_w];
                    assert_abs_diff_eq!(got, acc, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 8, 8])).unwrap();
        let w = g.leaf(Tensor::zeros(&[4, 2, 3, 3])).unwrap();
        let b = g.leaf(Tensor::zeros(&[4])).unwrap();
        assert!(matches!(
            g.conv2d(x, w, b, 1, 1),
            Err(NnError::ShapeMismatch(_))
        ));
        // Non-integral output extent.
        let w2 = g.leaf(Tensor::zeros(&[4, 3, 3, 3])).unwrap();
        assert!(matches!(
            g.conv2d(x, w2, b, 2, 0),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let px = params
            .add_param("x", rand_tensor(&[2, 2, 5, 5], &mut rng))
            .unwrap();
        let pw = params
            .add_param("w", rand_tensor(&[3, 2, 3, 3], &mut rng))
            .unwrap();
        let pb = params.add_param("b", rand_tensor(&[3], &mut rng)).unwrap();
        let run = |params: &ParamSet, want_grads: bool| {
            let mut g = Graph::new();
            let x = g.param_var(params, px).unwrap();
            let w = g.param_var(params, pw).unwrap();
            let b = g.param_var(params, pb).unwrap();
            let y = g.conv2d(x, w, b, 2, 1).unwrap();
            let loss = g.sum_of_squares_for_test(y);
            if want_grads {
                g.backward(loss).unwrap();
                let mut ps = params.clone();
                g.collect_grads(&mut ps).unwrap();
                (g.value(loss).item().unwrap(), Some(ps))
            } else {
                (g.value(loss).item().unwrap(), None)
            }
        };
        let (_, grads) = run(&params, true);
        let grads = grads.unwrap();
        let analytic: Vec<(usize, Tensor)> = [px, pw, pb]
            .iter()
            .map(|&s| (s, grads.param(s).grad.clone().unwrap()))
            .collect();
        check_gradients(
            &mut params,
            &mut |p| run(p, false).0,
            &analytic,
            1e-3,
            1e-4,
        );
    }

    #[test]
    fn batch_norm_train_normalizes_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let xt = rand_tensor(&[4, 3, 2, 2], &mut rng);
        let x = g.leaf(xt).unwrap();
        let gamma = g.leaf(Tensor::filled(&[3], 1.0)).unwrap();
        let beta = g.leaf(Tensor::zeros(&[3])).unwrap();
        let mut rm = Tensor::zeros(&[3]);
        let mut rv = Tensor::filled(&[3], 1.0);
        let y = g
            .batch_norm(x, gamma, beta, &mut rm, &mut rv, Mode::Train)
            .unwrap();
        let yv = g.value(y).data();
        for ci in 0..3 {
            let mut vals = vec![];
            for ni in 0..4 {
                let base = (ni * 3 + ci) * 4;
                vals.extend_from_slice(&yv[base..base + 4]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-3);
        }
        // Running stats moved away from their initialization.
        assert!(rm.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let xt = rand_tensor(&[2, 3, 2, 2], &mut rng);
        let x = g.leaf(xt.clone()).unwrap();
        let gamma = g.leaf(Tensor::filled(&[3], 1.0)).unwrap();
        let beta = g.leaf(Tensor::zeros(&[3])).unwrap();
        let mut rm = Tensor::zeros(&[3]);
        let mut rv = Tensor::filled(&[3], 1.0);
        let y = g
            .batch_norm(x, gamma, beta, &mut rm, &mut rv, Mode::Eval)
            .unwrap();
        for (a, b) in g.value(y).data().iter().zip(xt.data()) {
            // Identity up to the epsilon inside the variance term.
            assert_abs_diff_eq!(a, b, epsilon = 1e-4);
        }
    }

    #[test]
    fn batch_norm_rejects_degenerate_batch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 1, 1])).unwrap();
        let gamma = g.leaf(Tensor::filled(&[3], 1.0)).unwrap();
        let beta = g.leaf(Tensor::zeros(&[3])).unwrap();
        let mut rm = Tensor::zeros(&[3]);
        let mut rv = Tensor::filled(&[3], 1.0);
        assert_eq!(
            g.batch_norm(x, gamma, beta, &mut rm, &mut rv, Mode::Train),
            Err(NnError::DegenerateBatch)
        );
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = ParamSet::new();
        let px = params
            .add_param("x", rand_tensor(&[4, 3, 2, 2], &mut rng))
            .unwrap();
        let pg = params
            .add_param("gamma", Tensor::filled(&[3], 1.0))
            .unwrap();
        let pb = params.add_param("beta", Tensor::zeros(&[3])).unwrap();
        let run = |params: &ParamSet, want_grads: bool| {
            let mut g = Graph::new();
            let x = g.param_var(params, px).unwrap();
            let gamma = g.param_var(params, pg).unwrap();
            let beta = g.param_var(params, pb).unwrap();
            let mut rm = Tensor::zeros(&[3]);
            let mut rv = Tensor::filled(&[3], 1.0);
            let y = g
                .batch_norm(x, gamma, beta, &mut rm, &mut rv, Mode::Train)
                .unwrap();
            let loss = g.sum_of_squares_for_test(y);
            if want_grads {
                g.backward(loss).unwrap();
                let mut ps = params.clone();
                g.collect_grads(&mut ps).unwrap();
                (g.value(loss).item().unwrap(), Some(ps))
            } else {
                (g.value(loss).item().unwrap(), None)
            }
        };
        let (_, grads) = run(&params, true);
        let grads = grads.unwrap();
        let analytic: Vec<(usize, Tensor)> = [px, pg, pb]
            .iter()
            .map(|&s| (s, grads.param(s).grad.clone().unwrap()))
            .collect();
        check_gradients(
            &mut params,
            &mut |p| run(p, false).0,
            &analytic,
            1e-3,
            1e-4,
        );
    }

    #[test]
    fn relu_clamps_and_passes() {
        let mut g = Graph::new();
        let x = g
            .leaf(Tensor::from_vec(&[4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap())
            .unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.5, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn avg_pool_global_constant_map() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[2, 3, 4, 4], 0.7)).unwrap();
        let y = g.avg_pool_global(x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        for &v in g.value(y).data() {
            assert_abs_diff_eq!(v, 0.7, epsilon = 1e-15);
        }
    }

    #[test]
    fn concat_builds_384_from_two_192() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::filled(&[2, 192], 1.0)).unwrap();
        let b = g.leaf(Tensor::filled(&[2, 192], 2.0)).unwrap();
        let y = g.concat(a, b, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 384]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).len(), 2 * 192);
        assert_eq!(g.grad(b).len(), 2 * 192);
        assert!(g.grad(a).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let c = 7;
        let x = g.leaf(Tensor::zeros(&[3, c])).unwrap();
        let loss = g.softmax_cross_entropy(x, &[0, 3, 6]).unwrap();
        assert_abs_diff_eq!(
            g.value(loss).item().unwrap(),
            (c as f64).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn softmax_cross_entropy_saturates_with_large_margin() {
        let mut g = Graph::new();
        let mut logits = Tensor::zeros(&[1, 3]);
        logits.data_mut()[1] = 20.0;
        let x = g.leaf(logits).unwrap();
        let loss = g.softmax_cross_entropy(x, &[1]).unwrap();
        assert!(g.value(loss).item().unwrap() < 1e-8);
    }

    #[test]
    fn softmax_cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let zt = rand_tensor(&[5, 3], &mut rng);
        let labels = [0usize, 2, 1, 1, 0];
        let mut g = Graph::new();
        let x = g.leaf(zt.clone()).unwrap();
        let loss = g.softmax_cross_entropy(x, &labels).unwrap();
        let mut expect = 0.0;
        for (n, &l) in labels.iter().enumerate() {
            let row = &zt.data()[n * 3..(n + 1) * 3];
            let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
            expect += lse - row[l];
        }
        expect /= labels.len() as f64;
        assert_abs_diff_eq!(g.value(loss).item().unwrap(), expect, epsilon = 1e-10);
    }

    #[test]
    fn softmax_cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(
            g.softmax_cross_entropy(x, &[0, 3]),
            Err(NnError::LabelOutOfRange { label: 3, classes: 3 })
        );
    }

    #[test]
    fn regression_loss_zero_and_unit_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = rand_tensor(&[3, 8], &mut rng);
        let mut g = Graph::new();
        let a = g.leaf(t.clone()).unwrap();
        let b = g.leaf(t).unwrap();
        let loss = g.regression_loss(a, b).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 0.0);
        g.backward(loss).unwrap();
        assert!(g.grad(a).iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let mut x = Tensor::zeros(&[1, 8]);
        x.data_mut()[3] = 1.0;
        let p = g.leaf(x).unwrap();
        let t = g.leaf(Tensor::zeros(&[1, 8])).unwrap();
        let loss = g.regression_loss(p, t).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 0.5);
    }

    #[test]
    fn regression_loss_matches_param_loss_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pt = rand_tensor(&[4, 8], &mut rng);
        let tt = rand_tensor(&[4, 8], &mut rng);
        let mut g = Graph::new();
        let p = g.leaf(pt.clone()).unwrap();
        let t = g.leaf(tt.clone()).unwrap();
        let loss = g.regression_loss(p, t).unwrap();
        let mut expect = 0.0;
        for n in 0..4 {
            let mut a = [0.0; 8];
            let mut b = [0.0; 8];
            a.copy_from_slice(&tt.data()[n * 8..(n + 1) * 8]);
            b.copy_from_slice(&pt.data()[n * 8..(n + 1) * 8]);
            expect += crate::xform::param_loss(&a, &b);
        }
        expect /= 4.0;
        assert_abs_diff_eq!(g.value(loss).item().unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn backward_sum_of_parameter_gives_ones() {
        let mut params = ParamSet::new();
        let p = params.add_param("p", Tensor::zeros(&[3, 2])).unwrap();
        let mut g = Graph::new();
        let v = g.param_var(&params, p).unwrap();
        let loss = g.sum(v).unwrap();
        g.backward(loss).unwrap();
        g.collect_grads(&mut params).unwrap();
        assert!(params
            .param(p)
            .grad
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn backward_zero_scaled_loss_gives_zeros() {
        let mut params = ParamSet::new();
        let p = params.add_param("p", Tensor::filled(&[4], 2.0)).unwrap();
        let mut g = Graph::new();
        let v = g.param_var(&params, p).unwrap();
        let s = g.sum(v).unwrap();
        let loss = g.scale(s, 0.0).unwrap();
        g.backward(loss).unwrap();
        g.collect_grads(&mut params).unwrap();
        assert!(params
            .param(p)
            .grad
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut params = ParamSet::new();
        let px = params
            .add_param("x", rand_tensor(&[2, 4], &mut rng))
            .unwrap();
        let pw = params
            .add_param("w", rand_tensor(&[3, 4], &mut rng))
            .unwrap();
        let pb = params.add_param("b", rand_tensor(&[3], &mut rng)).unwrap();
        let grads_for = |factor: f64| {
            let mut g = Graph::new();
            let x = g.param_var(&params, px).unwrap();
            let w = g.param_var(&params, pw).unwrap();
            let b = g.param_var(&params, pb).unwrap();
            let y = g.linear(x, w, b).unwrap();
            let s = g.sum_of_squares_for_test(y);
            let loss = g.scale(s, factor).unwrap();
            g.backward(loss).unwrap();
            let mut ps = params.clone();
            g.collect_grads(&mut ps).unwrap();
            ps.param(pw).grad.clone().unwrap()
        };
        let g1 = grads_for(1.0);
        let g3 = grads_for(3.0);
        for (a, b) in g1.data().iter().zip(g3.data()) {
            assert_abs_diff_eq!(3.0 * a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(g.backward(x), Err(NnError::NotScalar));
        let foreign = Var { id: 999 };
        assert_eq!(g.backward(foreign), Err(NnError::DisconnectedLoss));
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut params = ParamSet::new();
        let used = params.add_param("used", Tensor::filled(&[2], 1.0)).unwrap();
        let unused = params
            .add_param("unused", Tensor::filled(&[3], 1.0))
            .unwrap();
        let mut g = Graph::new();
        let v = g.param_var(&params, used).unwrap();
        let loss = g.sum(v).unwrap();
        g.backward(loss).unwrap();
        g.collect_grads(&mut params).unwrap();
        assert!(params
            .param(unused)
            .grad
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(params
            .param(used)
            .grad
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn non_finite_forward_value_is_reported() {
        let mut g = Graph::new();
        let err = g.leaf(Tensor::from_vec(&[1], vec![f64::NAN]).unwrap());
        assert_eq!(err, Err(NnError::NonFinite { op: "leaf" }));
    }

    #[test]
    fn two_layer_network_gradients_match_finite_differences() {
        // The finite-difference step must not push any ReLU pre-activation
        // across its kink, so pick the first seed with a comfortable margin.
        let (params, xt, pw1, pb1, pw2, pb2) = (0..200u64)
            .find_map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut params = ParamSet::new();
                let pw1 = params
                    .add_param("conv.w", Tensor::he_uniform(&[4, 2, 3, 3], 18, &mut rng))
                    .unwrap();
                let pb1 = params.add_param("conv.b", Tensor::zeros(&[4])).unwrap();
                let pw2 = params
                    .add_param("fc.w", Tensor::he_uniform(&[3, 4], 4, &mut rng))
                    .unwrap();
                let pb2 = params.add_param("fc.b", Tensor::zeros(&[3])).unwrap();
                let xt = rand_tensor(&[2, 2, 6, 6], &mut rng);
                let mut g = Graph::new();
                let x = g.leaf(xt.clone()).unwrap();
                let w1 = g.param_var(&params, pw1).unwrap();
                let b1 = g.param_var(&params, pb1).unwrap();
                let pre = g.conv2d(x, w1, b1, 1, 1).unwrap();
                let margin = g
                    .value(pre)
                    .data()
                    .iter()
                    .fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
                (margin > 2e-2).then_some((params, xt, pw1, pb1, pw2, pb2))
            })
            .expect("a seed with kink margin exists");
        let mut params = params;
        let labels = [1usize, 2];
        let run = |params: &ParamSet, want_grads: bool| {
            let mut g = Graph::new();
            let x = g.leaf(xt.clone()).unwrap();
            let w1 = g.param_var(params, pw1).unwrap();
            let b1 = g.param_var(params, pb1).unwrap();
            let c = g.conv2d(x, w1, b1, 1, 1).unwrap();
            let r = g.relu(c).unwrap();
            let pool = g.avg_pool_global(r).unwrap();
            let w2 = g.param_var(params, pw2).unwrap();
            let b2 = g.param_var(params, pb2).unwrap();
            let logits = g.linear(pool, w2, b2).unwrap();
            let loss = g.softmax_cross_entropy(logits, &labels).unwrap();
            if want_grads {
                g.backward(loss).unwrap();
                let mut ps = params.clone();
                g.collect_grads(&mut ps).unwrap();
                (g.value(loss).item().unwrap(), Some(ps))
            } else {
                (g.value(loss).item().unwrap(), None)
            }
        };
        let (_, grads) = run(&params, true);
        let grads = grads.unwrap();
        let analytic: Vec<(usize, Tensor)> = [pw1, pb1, pw2, pb2]
            .iter()
            .map(|&s| (s, grads.param(s).grad.clone().unwrap()))
            .collect();
        check_gradients(
            &mut params,
            &mut |p| run(p, false).0,
            &analytic,
            1e-3,
            1e-4,
        );
    }

    #[test]
    fn sgd_training_reduces_loss_on_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = ParamSet::new();
        let pw = params
            .add_param("w", Tensor::uniform(&[1, 4], 0.5, &mut rng))
            .unwrap();
        let pb = params.add_param("b", Tensor::zeros(&[1])).unwrap();
        let xt = rand_tensor(&[16, 4], &mut rng);
        // Target: a fixed linear map of the inputs.
        let mut tv = vec![0.0; 16];
        for n in 0..16 {
            let row = &xt.data()[n * 4..(n + 1) * 4];
            tv[n] = 0.3 * row[0] - 0.7 * row[1] + 0.1 * row[2] + 0.9 * row[3] + 0.2;
        }
        let tt = Tensor::from_vec(&[16, 1], tv).unwrap();
        let cfg = SgdConfig {
            base_lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
            drop_factor: 5.0,
            drop_epochs: vec![],
        };
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..60 {
            let mut g = Graph::new();
            let x = g.leaf(xt.clone()).unwrap();
            let w = g.param_var(&params, pw).unwrap();
            let b = g.param_var(&params, pb).unwrap();
            let y = g.linear(x, w, b).unwrap();
            let t = g.leaf(tt.clone()).unwrap();
            let loss = g.regression_loss(y, t).unwrap();
            last = g.value(loss).item().unwrap();
            first.get_or_insert(last);
            g.backward(loss).unwrap();
            g.collect_grads(&mut params).unwrap();
            sgd_step(&mut params, &cfg, cfg.base_lr).unwrap();
        }
        assert!(last < 0.01 * first.unwrap(), "{last} vs {first:?}");
    }
}

#[cfg(test)]
impl Graph {
    /// Test-only scalar objective: one half the sum of squares, recorded
    /// through existing ops so their gradients are exercised too.
    fn sum_of_squares_for_test(&mut self, v: Var) -> Var {
        let numel = self.value(v).numel();
        let flat = self.reshape(v, &[1, numel]).unwrap();
        let zeros = self.leaf(Tensor::zeros(&[1, numel])).unwrap();
        self.regression_loss(flat, zeros).unwrap()
    }
}
