//! Dense f64 tensors with a reverse-mode autodiff tape.
//!
//! A [`Tape`] records every forward operation; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients into every node that requires
//! them. Values are 64-bit throughout and every reduction has a fixed order,
//! so results are bitwise reproducible for a given seed and input.

mod conv;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod gradcheck;

#[cfg(test)]
mod tests;

use crate::error::{Error, Result};

/// Dense N-dimensional array of 64-bit reals.
///
/// Image batches use NCHW layout; feature vectors are [N, F].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Batch-normalization running statistics (one entry per channel).
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    /// `mean`/`var` are the statistics the forward pass normalized with.
    /// `from_batch` selects the full batch-statistics backward.
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f64>, var: Vec<f64>, eps: f64, from_batch: bool },
    AvgPool2d { x: NodeId, window: usize, stride: usize },
    GlobalAvgPool { x: NodeId },
    FullyConnected { x: NodeId, w: NodeId, b: NodeId },
    ConcatCh { inputs: Vec<NodeId> },
    UpsampleNearest { x: NodeId, factor: usize },
    /// Mean binary cross-entropy against constant targets, probabilities
    /// clamped to [eps, 1-eps].
    Bce { probs: NodeId, targets: Vec<f64>, eps: f64 },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MeanAll { x: NodeId },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Records a forward computation and differentiates it in reverse.
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

    /// Put a tensor on the tape as a leaf.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { tensor, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Result node inherits requires_grad from its inputs.
    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires = inputs.iter().any(|&i| self.nodes[i.0].tensor.requires_grad);
        let mut t = Tensor { shape, data, requires_grad: requires, grad: None };
        t.grad = None;
        self.push(t, op)
    }

    // ── Forward operations ─────────────────────────────────────────────

    /// 2-D cross-correlation plus bias. x: [N,C,H,W], w: [K,C,kh,kw], b: [K].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects x[N,C,H,W], w[K,C,kh,kw], b[K]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, cw, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cw != c {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {c} channels, kernel expects {cw}"
            )));
        }
        if bs[0] != k {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: kernel produces {k} channels, bias has {}",
                bs[0]
            )));
        }
        if stride < 1 {
            return Err(Error::InvalidConfig("conv2d: stride must be >= 1".into()));
        }
        if k == 0 {
            return Err(Error::InvalidConfig("conv2d: output channels must be > 0".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::InvalidConfig(format!(
                "conv2d: output extent would be non-positive (input {h}x{wd}, pad {pad}, kernel {kh}x{kw})"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let mut out = vec![0.0; n * k * oh * ow];
        conv::forward(
            self.data(x),
            (n, c, h, wd),
            self.data(w),
            (k, kh, kw),
            self.data(b),
            stride,
            pad,
            &mut out,
            (oh, ow),
        );
        Ok(self.push_op(vec![n, k, oh, ow], out, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, data, Op::Relu { x }, &[x])
    }

    /// Elementwise logistic function; outputs stay strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, data, Op::Sigmoid { x }, &[x])
    }

    /// Per-channel normalize-scale-shift over [N,C,H,W].
    ///
    /// Training mode normalizes with batch statistics and updates `stats`
    /// in place (momentum 0.9 convention: new = momentum*old + (1-momentum)*batch).
    /// Inference mode normalizes with the running statistics and leaves them
    /// untouched.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut BnStats,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!("batch_norm expects [N,C,H,W], got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if n == 0 {
            return Err(Error::InvalidConfig("batch_norm on batch size 0".into()));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "batch_norm: channel count {c} disagrees with parameters"
            )));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let xd = self.data(x);

        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    for v in &xd[base..base + plane] {
                        s += v;
                    }
                }
                let m = s / count;
                let mut sq = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    for v in &xd[base..base + plane] {
                        let d = v - m;
                        sq += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = sq / count;
            }
            for ch in 0..c {
                stats.mean[ch] = momentum * stats.mean[ch] + (1.0 - momentum) * mean[ch];
                stats.var[ch] = momentum * stats.var[ch] + (1.0 - momentum) * var[ch];
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };

        let gd = self.data(gamma);
        let bd = self.data(beta);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let inv = 1.0 / (var[ch] + eps).sqrt();
                let (g, bt, m) = (gd[ch], bd[ch], mean[ch]);
                for i in 0..plane {
                    out[base + i] = g * (xd[base + i] - m) * inv + bt;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(
            shape,
            out,
            Op::BatchNorm { x, gamma, beta, mean, var, eps, from_batch: training },
            &[x, gamma, beta],
        ))
    }

    /// Average pooling with square window; no padding.
    pub fn avg_pool2d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!("avg_pool2d expects [N,C,H,W], got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if window == 0 || stride == 0 || h < window || w < window {
            return Err(Error::InvalidConfig(format!(
                "avg_pool2d: window {window} stride {stride} on {h}x{w}"
            )));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let inv = 1.0 / (window * window) as f64;
        let xd = self.data(x);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst_base = p * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ky in 0..window {
                        let row = (oy * stride + ky) * w + ox * stride;
                        for v in &src[row..row + window] {
                            s += v;
                        }
                    }
                    out[dst_base + oy * ow + ox] = s * inv;
                }
            }
        }
        Ok(self.push_op(vec![n, c, oh, ow], out, Op::AvgPool2d { x, window, stride }, &[x]))
    }

    /// Spatial mean per channel: [N,C,H,W] -> [N,C].
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "global_avg_pool expects [N,C,H,W], got {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch("global_avg_pool on empty plane".into()));
        }
        let plane = h * w;
        let inv = 1.0 / plane as f64;
        let xd = self.data(x);
        let mut out = vec![0.0; n * c];
        for p in 0..n * c {
            let mut s = 0.0;
            for v in &xd[p * plane..(p + 1) * plane] {
                s += v;
            }
            out[p] = s * inv;
        }
        Ok(self.push_op(vec![n, c], out, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Affine map: x [N,F] * w^T [F,O] + b [O] -> [N,O].
    pub fn fully_connected(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "fully_connected expects x[N,F], w[O,F], b[O]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (n, f) = (xs[0], xs[1]);
        let (o, fw) = (ws[0], ws[1]);
        if fw != f || bs[0] != o {
            return Err(Error::ShapeMismatch(format!(
                "fully_connected: x has {f} features, w expects {fw} (out {o}, bias {})",
                bs[0]
            )));
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![0.0; n * o];
        for row in 0..n {
            let xr = &xd[row * f..(row + 1) * f];
            for j in 0..o {
                let wr = &wd[j * f..(j + 1) * f];
                let mut s = bd[j];
                for (a, b) in xr.iter().zip(wr) {
                    s += a * b;
                }
                out[row * o + j] = s;
            }
        }
        Ok(self.push_op(vec![n, o], out, Op::FullyConnected { x, w, b }, &[x, w, b]))
    }

    /// Concatenate along the channel axis (axis 1). All inputs must agree on
    /// every other axis; output channel count is the sum of input channels.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::WrongArity("concat of zero inputs".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if first.len() < 2 {
            return Err(Error::ShapeMismatch("concat requires rank >= 2".into()));
        }
        let trailing: usize = first[2..].iter().product();
        let n = first[0];
        let mut channels = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(Error::ShapeMismatch(format!(
                    "concat: incompatible shapes {:?} vs {:?}",
                    first,
                    s
                )));
            }
            channels += s[1];
        }
        let mut out = vec![0.0; n * channels * trailing];
        for row in 0..n {
            let mut offset = 0usize;
            for &id in inputs {
                let ci = self.shape(id)[1];
                let block = ci * trailing;
                let src = &self.data(id)[row * block..(row + 1) * block];
                let dst_base = row * channels * trailing + offset * trailing;
                out[dst_base..dst_base + block].copy_from_slice(src);
                offset += ci;
            }
        }
        let mut shape = first;
        shape[1] = channels;
        Ok(self.push_op(shape, out, Op::ConcatCh { inputs: inputs.to_vec() }, inputs))
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch(format!("upsample expects [N,C,H,W], got {xs:?}")));
        }
        if factor == 0 {
            return Err(Error::InvalidConfig("upsample factor must be >= 1".into()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.data(x);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                let sy = oy / factor;
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[sy * w + ox / factor];
                }
            }
        }
        Ok(self.push_op(vec![n, c, oh, ow], out, Op::UpsampleNearest { x, factor }, &[x]))
    }

    /// Mean binary cross-entropy of probabilities against constant 0/1
    /// targets, with probabilities clamped to [eps, 1-eps].
    pub fn bce(&mut self, probs: NodeId, targets: &[f64], eps: f64) -> Result<NodeId> {
        let pd = self.data(probs);
        if pd.len() != targets.len() {
            return Err(Error::LengthMismatch(format!(
                "bce: {} predictions vs {} targets",
                pd.len(),
                targets.len()
            )));
        }
        if pd.is_empty() {
            return Err(Error::LengthMismatch("bce on empty input".into()));
        }
        let n = pd.len() as f64;
        let mut s = 0.0;
        for (&p, &y) in pd.iter().zip(targets) {
            let pc = p.clamp(eps, 1.0 - eps);
            s += y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let loss = -s / n;
        Ok(self.push_op(
            vec![1],
            vec![loss],
            Op::Bce { probs, targets: targets.to_vec(), eps },
            &[probs],
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, data, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, data, Op::Mul { a, b }, &[a, b]))
    }

    /// Mean of all elements -> scalar.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xd = self.data(x);
        let m = xd.iter().sum::<f64>() / xd.len() as f64;
        self.push_op(vec![1], vec![m], Op::MeanAll { x }, &[x])
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Accumulate d(loss)/d(node) into every node that requires gradients.
    /// Repeated calls without clearing accumulate further.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::NotScalar(self.nodes[loss.0].tensor.shape.clone()));
        }
        // Seed and temporary adjoint buffers for every node up to the loss.
        let upto = loss.0 + 1;
        let mut adj: Vec<Vec<f64>> = Vec::with_capacity(upto);
        for node in &self.nodes[..upto] {
            adj.push(vec![0.0; node.tensor.numel()]);
        }
        adj[loss.0][0] = 1.0;

        for i in (0..upto).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let grad = std::mem::take(&mut adj[i]);
            match op {
                Op::Leaf => {
                    let t = &mut self.nodes[i].tensor;
                    let store = t.grad.get_or_insert_with(|| vec![0.0; grad.len()]);
                    for (a, g) in store.iter_mut().zip(&grad) {
                        *a += g;
                    }
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xs = self.shape(x).to_vec();
                    let ws = self.shape(w).to_vec();
                    let os = self.shape(NodeId(i)).to_vec();
                    let dims = ((xs[0], xs[1], xs[2], xs[3]), (ws[0], ws[2], ws[3]), (os[2], os[3]));
                    if self.needs(x) {
                        let mut dx = vec![0.0; self.nodes[x.0].tensor.numel()];
                        conv::backward_input(
                            self.data(w), dims.0, dims.1, &grad, dims.2, stride, pad, &mut dx,
                        );
                        accumulate(&mut adj[x.0], &dx);
                    }
                    if self.needs(w) {
                        let mut dw = vec![0.0; self.nodes[w.0].tensor.numel()];
                        conv::backward_weights(
                            self.data(x), dims.0, dims.1, &grad, dims.2, stride, pad, &mut dw,
                        );
                        accumulate(&mut adj[w.0], &dw);
                    }
                    if self.needs(b) {
                        let (k, (oh, ow)) = (ws[0], dims.2);
                        let n = xs[0];
                        let mut db = vec![0.0; k];
                        for bi in 0..n {
                            for ch in 0..k {
                                let base = (bi * k + ch) * oh * ow;
                                let mut s = 0.0;
                                for g in &grad[base..base + oh * ow] {
                                    s += g;
                                }
                                db[ch] += s;
                            }
                        }
                        accumulate(&mut adj[b.0], &db);
                    }
                }
                Op::Relu { x } => {
                    if self.needs(x) {
                        let xd = self.data(x);
                        let dx: Vec<f64> = grad
                            .iter()
                            .zip(xd)
                            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                            .collect();
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::Sigmoid { x } => {
                    if self.needs(x) {
                        let od = self.data(NodeId(i));
                        let dx: Vec<f64> =
                            grad.iter().zip(od).map(|(&g, &s)| g * s * (1.0 - s)).collect();
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, var, eps, from_batch } => {
                    let xs = self.shape(x).to_vec();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let plane = h * w;
                    let count = (n * plane) as f64;
                    let xd = self.data(x);
                    let gd = self.data(gamma);

                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ch in 0..c {
                        let inv = 1.0 / (var[ch] + eps).sqrt();
                        let m = mean[ch];
                        let (mut sg, mut sb) = (0.0, 0.0);
                        for bi in 0..n {
                            let base = (bi * c + ch) * plane;
                            for idx in 0..plane {
                                let g = grad[base + idx];
                                sg += g * (xd[base + idx] - m) * inv;
                                sb += g;
                            }
                        }
                        dgamma[ch] = sg;
                        dbeta[ch] = sb;
                    }

                    if self.needs(x) {
                        let mut dx = vec![0.0; xd.len()];
                        if from_batch {
                            // dgamma/dbeta double as the per-channel sums of
                            // dy*xhat and dy that the batch-stat backward needs.
                            for ch in 0..c {
                                let inv = 1.0 / (var[ch] + eps).sqrt();
                                let m = mean[ch];
                                let g_scale = gd[ch] * inv;
                                let sum_dy = dbeta[ch];
                                let sum_dyxh = dgamma[ch];
                                for bi in 0..n {
                                    let base = (bi * c + ch) * plane;
                                    for idx in 0..plane {
                                        let xh = (xd[base + idx] - m) * inv;
                                        dx[base + idx] = g_scale
                                            * (grad[base + idx]
                                                - sum_dy / count
                                                - xh * sum_dyxh / count);
                                    }
                                }
                            }
                        } else {
                            for ch in 0..c {
                                let scale = gd[ch] / (var[ch] + eps).sqrt();
                                for bi in 0..n {
                                    let base = (bi * c + ch) * plane;
                                    for idx in 0..plane {
                                        dx[base + idx] = grad[base + idx] * scale;
                                    }
                                }
                            }
                        }
                        accumulate(&mut adj[x.0], &dx);
                    }
                    if self.needs(gamma) {
                        accumulate(&mut adj[gamma.0], &dgamma);
                    }
                    if self.needs(beta) {
                        accumulate(&mut adj[beta.0], &dbeta);
                    }
                }
                Op::AvgPool2d { x, window, stride } => {
                    if self.needs(x) {
                        let xs = self.shape(x).to_vec();
                        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                        let os = self.shape(NodeId(i)).to_vec();
                        let (oh, ow) = (os[2], os[3]);
                        let inv = 1.0 / (window * window) as f64;
                        let mut dx = vec![0.0; n * c * h * w];
                        for p in 0..n * c {
                            let gsrc = &grad[p * oh * ow..(p + 1) * oh * ow];
                            let dst = &mut dx[p * h * w..(p + 1) * h * w];
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g = gsrc[oy * ow + ox] * inv;
                                    for ky in 0..window {
                                        let row = (oy * stride + ky) * w + ox * stride;
                                        for v in &mut dst[row..row + window] {
                                            *v += g;
                                        }
                                    }
                                }
                            }
                        }
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if self.needs(x) {
                        let xs = self.shape(x).to_vec();
                        let plane = xs[2] * xs[3];
                        let inv = 1.0 / plane as f64;
                        let mut dx = vec![0.0; self.nodes[x.0].tensor.numel()];
                        for p in 0..xs[0] * xs[1] {
                            let g = grad[p] * inv;
                            for v in &mut dx[p * plane..(p + 1) * plane] {
                                *v += g;
                            }
                        }
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::FullyConnected { x, w, b } => {
                    let xs = self.shape(x).to_vec();
                    let ws = self.shape(w).to_vec();
                    let (n, f) = (xs[0], xs[1]);
                    let o = ws[0];
                    if self.needs(x) {
                        let wd = self.data(w);
                        let mut dx = vec![0.0; n * f];
                        for row in 0..n {
                            for j in 0..o {
                                let g = grad[row * o + j];
                                if g == 0.0 {
                                    continue;
                                }
                                let wr = &wd[j * f..(j + 1) * f];
                                let dr = &mut dx[row * f..(row + 1) * f];
                                for (d, wv) in dr.iter_mut().zip(wr) {
                                    *d += g * wv;
                                }
                            }
                        }
                        accumulate(&mut adj[x.0], &dx);
                    }
                    if self.needs(w) {
                        let xd = self.data(x);
                        let mut dw = vec![0.0; o * f];
                        for row in 0..n {
                            let xr = &xd[row * f..(row + 1) * f];
                            for j in 0..o {
                                let g = grad[row * o + j];
                                if g == 0.0 {
                                    continue;
                                }
                                let dr = &mut dw[j * f..(j + 1) * f];
                                for (d, xv) in dr.iter_mut().zip(xr) {
                                    *d += g * xv;
                                }
                            }
                        }
                        accumulate(&mut adj[w.0], &dw);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; o];
                        for row in 0..n {
                            for j in 0..o {
                                db[j] += grad[row * o + j];
                            }
                        }
                        accumulate(&mut adj[b.0], &db);
                    }
                }
                Op::ConcatCh { inputs } => {
                    let os = self.shape(NodeId(i)).to_vec();
                    let trailing: usize = os[2..].iter().product();
                    let n = os[0];
                    let channels = os[1];
                    let mut offset = 0usize;
                    for &id in &inputs {
                        let ci = self.shape(id)[1];
                        if self.needs(id) {
                            let block = ci * trailing;
                            let mut dx = vec![0.0; n * block];
                            for row in 0..n {
                                let src_base = row * channels * trailing + offset * trailing;
                                dx[row * block..(row + 1) * block]
                                    .copy_from_slice(&grad[src_base..src_base + block]);
                            }
                            accumulate(&mut adj[id.0], &dx);
                        }
                        offset += ci;
                    }
                }
                Op::UpsampleNearest { x, factor } => {
                    if self.needs(x) {
                        let xs = self.shape(x).to_vec();
                        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                        let (oh, ow) = (h * factor, w * factor);
                        let mut dx = vec![0.0; n * c * h * w];
                        for p in 0..n * c {
                            let gsrc = &grad[p * oh * ow..(p + 1) * oh * ow];
                            let dst = &mut dx[p * h * w..(p + 1) * h * w];
                            for oy in 0..oh {
                                let sy = oy / factor;
                                for ox in 0..ow {
                                    dst[sy * w + ox / factor] += gsrc[oy * ow + ox];
                                }
                            }
                        }
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
                Op::Bce { probs, targets, eps } => {
                    if self.needs(probs) {
                        let pd = self.data(probs);
                        let n = pd.len() as f64;
                        let g = grad[0];
                        let dx: Vec<f64> = pd
                            .iter()
                            .zip(&targets)
                            .map(|(&p, &y)| {
                                if p < eps || p > 1.0 - eps {
                                    0.0 // clamped region: constant loss
                                } else {
                                    g * (p - y) / (p * (1.0 - p)) / n
                                }
                            })
                            .collect();
                        accumulate(&mut adj[probs.0], &dx);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(a) {
                        accumulate(&mut adj[a.0], &grad);
                    }
                    if self.needs(b) {
                        accumulate(&mut adj[b.0], &grad);
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let bd = self.data(b);
                        let da: Vec<f64> = grad.iter().zip(bd).map(|(&g, &v)| g * v).collect();
                        accumulate(&mut adj[a.0], &da);
                    }
                    if self.needs(b) {
                        let ad = self.data(a);
                        let db: Vec<f64> = grad.iter().zip(ad).map(|(&g, &v)| g * v).collect();
                        accumulate(&mut adj[b.0], &db);
                    }
                }
                Op::MeanAll { x } => {
                    if self.needs(x) {
                        let n = self.nodes[x.0].tensor.numel();
                        let g = grad[0] / n as f64;
                        let dx = vec![g; n];
                        accumulate(&mut adj[x.0], &dx);
                    }
                }
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    /// Clear accumulated gradients on all nodes.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }
}

fn accumulate(target: &mut Vec<f64>, src: &[f64]) {
    debug_assert_eq!(target.len(), src.len());
    for (a, s) in target.iter_mut().zip(src) {
        *a += s;
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
