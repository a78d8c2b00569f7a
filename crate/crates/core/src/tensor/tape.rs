//! Reverse-mode gradient tape over whole-tensor operations.
//!
//! A forward pass records one node per operation; [`Tape::backward`] walks
//! the recording once in reverse. Node indices grow monotonically, so the
//! creation order is already a topological order. Ties in max/min style
//! operations route their gradient to the first candidate in scan order,
//! which keeps every backward pass deterministic.

use super::{
    axis_weights, ensure_finite, mm_nn, mm_nt, mm_tn, sigmoid, ParamId, ParamStore, Result,
    Tensor, TensorError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

enum Op {
    Leaf,
    Conv2d { input: usize, weight: usize, bias: usize, stride: usize, padding: usize },
    Relu { input: usize },
    MaxPool { input: usize, argmax: Vec<usize> },
    GlobalAvgPool { input: usize },
    BilinearResize { input: usize },
    MinMany { inputs: Vec<usize>, winner: Vec<u32> },
    Mul { a: usize, b: usize, channel_broadcast: bool },
    MultilabelBce { scores: usize, labels: Vec<f64> },
    Linear { input: usize, weight: usize, bias: usize },
    Softplus { input: usize },
    Add { a: usize, b: usize },
    Scale { input: usize, factor: f64 },
    MeanAll { input: usize },
    WeightedSum { input: usize, weights: Vec<f64> },
    NormalizeMap { input: usize, eps: f64, picks: Vec<(usize, usize)> },
    FrobPosMean { maps: usize, pos: Vec<Vec<usize>> },
    ChannelMinPos { maps: usize, winner: Vec<u32> },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: Vec<(usize, ParamId)>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &'static str) -> Result<NodeId> {
        ensure_finite(&data, name)?;
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node { shape, data, grad, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let grad = vec![0.0; t.numel()];
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.nodes.push(Node { shape, data, grad, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; its gradient can later be pushed
    /// back with [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        let node = self.leaf(p.value.clone());
        self.param_leaves.push((node.0, id));
        node
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("tape nodes hold validated tensors")
    }

    pub fn item(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// 2-D cross-correlation over [B,Cin,H,W] with an [Cout,Cin,k,k] kernel.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 4 || wshape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {ishape:?}, weight {wshape:?}"),
            });
        }
        let (b, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, wcin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if wcin != cin || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("weight {wshape:?} does not match {cin} input channels"),
            });
        }
        if bshape != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias {bshape:?} vs {cout} output channels"),
            });
        }
        let k = kh;
        let (oh, ow) = conv_out_size(h, w, k, stride, padding)?;

        let ck = cin * k * k;
        let mut cols = vec![0.0; ck * oh * ow];
        let mut data = vec![0.0; b * cout * oh * ow];
        let wdata = &self.nodes[weight.0].data;
        let bdata = &self.nodes[bias.0].data;
        let idata = &self.nodes[input.0].data;
        for bi in 0..b {
            im2col(&idata[bi * cin * h * w..], cin, h, w, k, stride, padding, oh, ow, &mut cols);
            let out = &mut data[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            for co in 0..cout {
                let bias_v = bdata[co];
                for o in &mut out[co * oh * ow..(co + 1) * oh * ow] {
                    *o = bias_v;
                }
            }
            mm_nn(wdata, &cols, cout, ck, oh * ow, out);
        }
        self.push(
            vec![b, cout, oh, ow],
            data,
            Op::Conv2d { input: input.0, weight: weight.0, bias: bias.0, stride, padding },
            "conv2d",
        )
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, data, Op::Relu { input: input.0 }, "relu")
    }

    /// Windowed maximum; gradient goes to the first maximal element of each
    /// window in row-major scan order.
    pub fn max_pool(&mut self, input: NodeId, k: usize, stride: usize, padding: usize) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "max_pool",
                detail: format!("expected rank 4, got {ishape:?}"),
            });
        }
        let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (oh, ow) = conv_out_size(h, w, k, stride, padding)?;
        let idata = &self.nodes[input.0].data;
        let mut data = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0usize; b * c * oh * ow];
        for bc in 0..b * c {
            let plane = &idata[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        let y = (oy * stride + ky) as isize - padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let x = (ox * stride + kx) as isize - padding as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let idx = y as usize * w + x as usize;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    debug_assert!(best_idx != usize::MAX, "pool window fully outside input");
                    let o = bc * oh * ow + oy * ow + ox;
                    data[o] = best;
                    argmax[o] = bc * h * w + best_idx;
                }
            }
        }
        self.push(vec![b, c, oh, ow], data, Op::MaxPool { input: input.0, argmax }, "max_pool")
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "global_avg_pool",
                detail: format!("expected rank 4, got {ishape:?}"),
            });
        }
        let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let hw = (h * w) as f64;
        let idata = &self.nodes[input.0].data;
        let data: Vec<f64> = (0..b * c)
            .map(|bc| idata[bc * h * w..(bc + 1) * h * w].iter().sum::<f64>() / hw)
            .collect();
        self.push(vec![b, c], data, Op::GlobalAvgPool { input: input.0 }, "global_avg_pool")
    }

    /// Bilinear resize of every [H,W] plane to [out_h,out_w], half-pixel rule.
    pub fn bilinear_resize(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_resize",
                detail: format!("expected rank 4, got {ishape:?}"),
            });
        }
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::InvalidConfig {
                op: "bilinear_resize",
                detail: "output size must be positive".into(),
            });
        }
        let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let rows = axis_weights(h, out_h);
        let cols = axis_weights(w, out_w);
        let idata = &self.nodes[input.0].data;
        let mut data = vec![0.0; b * c * out_h * out_w];
        for bc in 0..b * c {
            let plane = &idata[bc * h * w..(bc + 1) * h * w];
            let out = &mut data[bc * out_h * out_w..(bc + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                    let v00 = plane[y0 * w + x0];
                    let v01 = plane[y0 * w + x1];
                    let v10 = plane[y1 * w + x0];
                    let v11 = plane[y1 * w + x1];
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    out[oy * out_w + ox] = top + (bot - top) * wy;
                }
            }
        }
        self.push(vec![b, c, out_h, out_w], data, Op::BilinearResize { input: input.0 }, "bilinear_resize")
    }

    /// Per-location minimum over equally shaped inputs; the first minimal
    /// input wins the gradient.
    pub fn min_many(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs.first().ok_or(TensorError::InvalidConfig {
            op: "min_many",
            detail: "at least one input required".into(),
        })?;
        let shape = self.shape(first).to_vec();
        for &id in inputs {
            if self.shape(id) != shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "min_many",
                    detail: format!("{:?} vs {:?}", self.shape(id), shape),
                });
            }
        }
        let numel: usize = shape.iter().product();
        let mut data = self.nodes[first.0].data.clone();
        let mut winner = vec![0u32; numel];
        for (which, &id) in inputs.iter().enumerate().skip(1) {
            let cand = &self.nodes[id.0].data;
            for i in 0..numel {
                if cand[i] < data[i] {
                    data[i] = cand[i];
                    winner[i] = which as u32;
                }
            }
        }
        let inputs = inputs.iter().map(|n| n.0).collect();
        self.push(shape, data, Op::MinMany { inputs, winner }, "min_many")
    }

    /// Elementwise product. `b` may be [B,1,H,W] against an [B,C,H,W] `a`,
    /// broadcasting the single map across channels.
    pub fn multiply(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        let channel_broadcast = if ashape == bshape {
            false
        } else if ashape.len() == 4
            && bshape.len() == 4
            && bshape[0] == ashape[0]
            && bshape[1] == 1
            && bshape[2] == ashape[2]
            && bshape[3] == ashape[3]
        {
            true
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "multiply",
                detail: format!("{ashape:?} vs {bshape:?}"),
            });
        };
        let adata = &self.nodes[a.0].data;
        let bdata = &self.nodes[b.0].data;
        let data = if channel_broadcast {
            let (batch, c, h, w) = (ashape[0], ashape[1], ashape[2], ashape[3]);
            let hw = h * w;
            let mut out = vec![0.0; adata.len()];
            for bi in 0..batch {
                let map = &bdata[bi * hw..(bi + 1) * hw];
                for ci in 0..c {
                    let base = (bi * c + ci) * hw;
                    for p in 0..hw {
                        out[base + p] = adata[base + p] * map[p];
                    }
                }
            }
            out
        } else {
            adata.iter().zip(bdata).map(|(x, y)| x * y).collect()
        };
        self.push(ashape, data, Op::Mul { a: a.0, b: b.0, channel_broadcast }, "multiply")
    }

    /// Mean over B*C entries of the per-entry sigmoid binary cross-entropy,
    /// computed in log-sum-exp form so large logits cannot overflow.
    pub fn multilabel_bce(&mut self, scores: NodeId, labels: &Tensor) -> Result<NodeId> {
        let sshape = self.shape(scores).to_vec();
        if sshape.len() != 2 || labels.shape() != sshape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "multilabel_bce",
                detail: format!("scores {sshape:?} vs labels {:?}", labels.shape()),
            });
        }
        for &y in labels.data() {
            if y != 0.0 && y != 1.0 {
                return Err(TensorError::NonBinaryLabel { value: y });
            }
        }
        let sdata = &self.nodes[scores.0].data;
        let n = sdata.len() as f64;
        let mut total = 0.0;
        for (&s, &y) in sdata.iter().zip(labels.data()) {
            total += s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
        }
        let labels = labels.data().to_vec();
        self.push(
            vec![1],
            vec![total / n],
            Op::MultilabelBce { scores: scores.0, labels },
            "multilabel_bce",
        )
    }

    /// Fully connected layer: [B,In] x [Out,In]^T + [Out].
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 2 || wshape.len() != 2 || ishape[1] != wshape[1] || bshape != [wshape[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("input {ishape:?}, weight {wshape:?}, bias {bshape:?}"),
            });
        }
        let (b, n_in, n_out) = (ishape[0], ishape[1], wshape[0]);
        let mut data = vec![0.0; b * n_out];
        for bi in 0..b {
            data[bi * n_out..(bi + 1) * n_out].copy_from_slice(&self.nodes[bias.0].data);
        }
        mm_nt(&self.nodes[input.0].data, &self.nodes[weight.0].data, b, n_in, n_out, &mut data);
        self.push(
            vec![b, n_out],
            data,
            Op::Linear { input: input.0, weight: weight.0, bias: bias.0 },
            "linear",
        )
    }

    pub fn softplus(&mut self, input: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[input.0]
            .data
            .iter()
            .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, data, Op::Softplus { input: input.0 }, "softplus")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Add { a: a.0, b: b.0 }, "add")
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|&v| v * factor).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, data, Op::Scale { input: input.0, factor }, "scale")
    }

    pub fn mean_all(&mut self, input: NodeId) -> Result<NodeId> {
        let d = &self.nodes[input.0].data;
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![1], vec![mean], Op::MeanAll { input: input.0 }, "mean_all")
    }

    /// Fixed-weight scalar projection, the hook for randomized grad checks.
    pub fn weighted_sum(&mut self, input: NodeId, weights: &[f64]) -> Result<NodeId> {
        let d = &self.nodes[input.0].data;
        if weights.len() != d.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("{} weights vs {} values", weights.len(), d.len()),
            });
        }
        let s: f64 = d.iter().zip(weights).map(|(x, w)| x * w).sum();
        let weights = weights.to_vec();
        self.push(vec![1], vec![s], Op::WeightedSum { input: input.0, weights }, "weighted_sum")
    }

    /// Per-channel spatial normalization `1 - (v - min)/(max - min + eps)`,
    /// applied to every [H,W] plane of a [B,C,H,W] input. The output lives in
    /// [0,1] with an exact 1 at the plane minimum; gradients flow through the
    /// min/max picks to their (first) arg locations.
    pub fn normalize_map(&mut self, input: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidConfig {
                op: "normalize_map",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "normalize_map",
                detail: format!("expected rank 4, got {ishape:?}"),
            });
        }
        let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let hw = h * w;
        let idata = &self.nodes[input.0].data;
        let mut data = vec![0.0; idata.len()];
        let mut picks = Vec::with_capacity(b * c);
        for bc in 0..b * c {
            let plane = &idata[bc * hw..(bc + 1) * hw];
            let mut amin = 0;
            let mut amax = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v < plane[amin] {
                    amin = i;
                }
                if v > plane[amax] {
                    amax = i;
                }
            }
            let lo = plane[amin];
            let d = plane[amax] - lo + eps;
            let out = &mut data[bc * hw..(bc + 1) * hw];
            for (o, &v) in out.iter_mut().zip(plane) {
                *o = 1.0 - (v - lo) / d;
            }
            picks.push((amin, amax));
        }
        self.push(ishape, data, Op::NormalizeMap { input: input.0, eps, picks }, "normalize_map")
    }

    /// Mean over the batch of the per-image mean Frobenius norm of the
    /// positive-category planes of `maps` [B,C,H,W].
    pub fn frob_pos_mean(&mut self, maps: NodeId, pos: &[Vec<usize>]) -> Result<NodeId> {
        let shape = self.shape(maps).to_vec();
        if shape.len() != 4 || pos.len() != shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "frob_pos_mean",
                detail: format!("maps {shape:?}, {} positive sets", pos.len()),
            });
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let data = &self.nodes[maps.0].data;
        let mut total = 0.0;
        for (bi, cats) in pos.iter().enumerate() {
            if cats.is_empty() || cats.iter().any(|&j| j >= c) {
                return Err(TensorError::InvalidConfig {
                    op: "frob_pos_mean",
                    detail: format!("bad positive-category set {cats:?} for image {bi}"),
                });
            }
            let mut per_image = 0.0;
            for &j in cats {
                let plane = &data[(bi * c + j) * hw..(bi * c + j + 1) * hw];
                per_image += plane.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            total += per_image / cats.len() as f64;
        }
        let pos = pos.to_vec();
        self.push(
            vec![1],
            vec![total / b as f64],
            Op::FrobPosMean { maps: maps.0, pos },
            "frob_pos_mean",
        )
    }

    /// Per-image, per-location minimum over the positive-category planes of
    /// `maps` [B,C,H,W], yielding [B,1,H,W]. First minimal category wins the
    /// gradient.
    pub fn channel_min_pos(&mut self, maps: NodeId, pos: &[Vec<usize>]) -> Result<NodeId> {
        let shape = self.shape(maps).to_vec();
        if shape.len() != 4 || pos.len() != shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_min_pos",
                detail: format!("maps {shape:?}, {} positive sets", pos.len()),
            });
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let data = &self.nodes[maps.0].data;
        let mut out = vec![0.0; b * hw];
        let mut winner = vec![0u32; b * hw];
        for (bi, cats) in pos.iter().enumerate() {
            if cats.is_empty() || cats.iter().any(|&j| j >= c) {
                return Err(TensorError::InvalidConfig {
                    op: "channel_min_pos",
                    detail: format!("bad positive-category set {cats:?} for image {bi}"),
                });
            }
            for p in 0..hw {
                let mut best = f64::INFINITY;
                let mut best_j = cats[0] as u32;
                for &j in cats {
                    let v = data[(bi * c + j) * hw + p];
                    if v < best {
                        best = v;
                        best_j = j as u32;
                    }
                }
                out[bi * hw + p] = best;
                winner[bi * hw + p] = best_j;
            }
        }
        self.push(
            vec![b, 1, h, w],
            out,
            Op::ChannelMinPos { maps: maps.0, winner },
            "channel_min_pos",
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Backpropagates from a scalar root through the whole recording.
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::InvalidConfig {
                op: "backward",
                detail: "tape already consumed by a previous backward".into(),
            });
        }
        if self.nodes[root.0].data.len() != 1 {
            return Err(TensorError::InvalidConfig {
                op: "backward",
                detail: "backward root must be a scalar".into(),
            });
        }
        self.backward_done = true;
        self.nodes[root.0].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            step_backward(node, before)?;
        }
        for node in &self.nodes {
            ensure_finite(&node.grad, "backward")?;
        }
        Ok(())
    }

    /// Adds `scale` times each bound parameter leaf's gradient into the
    /// parameter store. Frozen parameters are skipped.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore, scale: f64) -> Result<()> {
        for &(node, id) in &self.param_leaves {
            if store.get(id).frozen {
                continue;
            }
            if scale == 1.0 {
                store.get_mut(id).value.accumulate_grad(&self.nodes[node].grad)?;
            } else {
                let scaled: Vec<f64> = self.nodes[node].grad.iter().map(|g| g * scale).collect();
                store.get_mut(id).value.accumulate_grad(&scaled)?;
            }
        }
        Ok(())
    }
}

fn step_backward(node: &Node, before: &mut [Node]) -> Result<()> {
    let g = &node.grad;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Conv2d { input, weight, bias, stride, padding } => {
            let ishape = before[*input].shape.clone();
            let wshape = before[*weight].shape.clone();
            let (b, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
            let (cout, k) = (wshape[0], wshape[2]);
            let (oh, ow) = (node.shape[2], node.shape[3]);
            let ck = cin * k * k;
            let mut cols = vec![0.0; ck * oh * ow];
            let mut dcols = vec![0.0; ck * oh * ow];
            for bi in 0..b {
                let dout = &g[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
                im2col(
                    &before[*input].data[bi * cin * h * w..],
                    cin, h, w, k, *stride, *padding, oh, ow, &mut cols,
                );
                // dW += dOut x cols^T
                mm_nt(dout, &cols, cout, oh * ow, ck, &mut before[*weight].grad);
                // dBias += row sums of dOut
                for co in 0..cout {
                    before[*bias].grad[co] += dout[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
                }
                // dInput += col2im(W^T x dOut)
                dcols.iter_mut().for_each(|v| *v = 0.0);
                mm_tn(&before[*weight].data, dout, ck, cout, oh * ow, &mut dcols);
                col2im_acc(
                    &dcols,
                    cin, h, w, k, *stride, *padding, oh, ow,
                    &mut before[*input].grad[bi * cin * h * w..(bi + 1) * cin * h * w],
                );
            }
        }
        Op::Relu { input } => {
            let src = &before[*input];
            let mask: Vec<f64> = src
                .data
                .iter()
                .zip(g)
                .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                .collect();
            for (dst, v) in before[*input].grad.iter_mut().zip(mask) {
                *dst += v;
            }
        }
        Op::MaxPool { input, argmax } => {
            for (o, &src_idx) in argmax.iter().enumerate() {
                before[*input].grad[src_idx] += g[o];
            }
        }
        Op::GlobalAvgPool { input } => {
            let ishape = &before[*input].shape;
            let hw = ishape[2] * ishape[3];
            let inv = 1.0 / hw as f64;
            for (bc, &gv) in g.iter().enumerate() {
                for dst in &mut before[*input].grad[bc * hw..(bc + 1) * hw] {
                    *dst += gv * inv;
                }
            }
        }
        Op::BilinearResize { input } => {
            let ishape = before[*input].shape.clone();
            let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
            let (oh, ow) = (node.shape[2], node.shape[3]);
            let rows = axis_weights(h, oh);
            let cols = axis_weights(w, ow);
            for bc in 0..b * c {
                let gout = &g[bc * oh * ow..(bc + 1) * oh * ow];
                let gin = &mut before[*input].grad[bc * h * w..(bc + 1) * h * w];
                for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                        let gv = gout[oy * ow + ox];
                        gin[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                        gin[y0 * w + x1] += gv * (1.0 - wy) * wx;
                        gin[y1 * w + x0] += gv * wy * (1.0 - wx);
                        gin[y1 * w + x1] += gv * wy * wx;
                    }
                }
            }
        }
        Op::MinMany { inputs, winner } => {
            for (i, (&which, &gv)) in winner.iter().zip(g.iter()).enumerate() {
                before[inputs[which as usize]].grad[i] += gv;
            }
        }
        Op::Mul { a, b, channel_broadcast } => {
            if *channel_broadcast {
                let ashape = before[*a].shape.clone();
                let (batch, c, h, w) = (ashape[0], ashape[1], ashape[2], ashape[3]);
                let hw = h * w;
                for bi in 0..batch {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for p in 0..hw {
                            let gv = g[base + p];
                            let av = before[*a].data[base + p];
                            let bv = before[*b].data[bi * hw + p];
                            before[*a].grad[base + p] += gv * bv;
                            before[*b].grad[bi * hw + p] += gv * av;
                        }
                    }
                }
            } else {
                for i in 0..g.len() {
                    let av = before[*a].data[i];
                    let bv = before[*b].data[i];
                    before[*a].grad[i] += g[i] * bv;
                    before[*b].grad[i] += g[i] * av;
                }
            }
        }
        Op::MultilabelBce { scores, labels } => {
            let gv = g[0];
            let n = labels.len() as f64;
            for (i, &y) in labels.iter().enumerate() {
                let s = before[*scores].data[i];
                before[*scores].grad[i] += gv * (sigmoid(s) - y) / n;
            }
        }
        Op::Linear { input, weight, bias } => {
            let (b, n_in) = (before[*input].shape[0], before[*input].shape[1]);
            let n_out = before[*weight].shape[0];
            // dIn += dOut x W
            {
                let wdata = before[*weight].data.clone();
                mm_nn(g, &wdata, b, n_out, n_in, &mut before[*input].grad);
            }
            // dW += dOut^T x In
            {
                let idata = before[*input].data.clone();
                mm_tn(g, &idata, n_out, b, n_in, &mut before[*weight].grad);
            }
            for bi in 0..b {
                for o in 0..n_out {
                    before[*bias].grad[o] += g[bi * n_out + o];
                }
            }
        }
        Op::Softplus { input } => {
            for (i, &gv) in g.iter().enumerate() {
                let x = before[*input].data[i];
                before[*input].grad[i] += gv * sigmoid(x);
            }
        }
        Op::Add { a, b } => {
            for (i, &gv) in g.iter().enumerate() {
                before[*a].grad[i] += gv;
                before[*b].grad[i] += gv;
            }
        }
        Op::Scale { input, factor } => {
            for (dst, &gv) in before[*input].grad.iter_mut().zip(g) {
                *dst += gv * factor;
            }
        }
        Op::MeanAll { input } => {
            let n = before[*input].data.len() as f64;
            let gv = g[0] / n;
            for dst in before[*input].grad.iter_mut() {
                *dst += gv;
            }
        }
        Op::WeightedSum { input, weights } => {
            let gv = g[0];
            for (dst, &w) in before[*input].grad.iter_mut().zip(weights) {
                *dst += gv * w;
            }
        }
        Op::NormalizeMap { input, eps, picks } => {
            let hw = node.shape[2] * node.shape[3];
            for (bc, &(amin, amax)) in picks.iter().enumerate() {
                let plane = &before[*input].data[bc * hw..(bc + 1) * hw];
                let gout = &g[bc * hw..(bc + 1) * hw];
                let lo = plane[amin];
                let d = plane[amax] - lo + eps;
                // out_p = 1 - (v_p - lo)/d with lo, d picked at amin/amax:
                //   d/dv_q  = -u_q/d
                //   d/dlo   = sum(u)/d - sum(u (v - lo))/d^2   (at amin)
                //   d/dhi   = sum(u (v - lo))/d^2              (at amax)
                let sum_u: f64 = gout.iter().sum();
                let sum_w: f64 = gout.iter().zip(plane).map(|(u, &v)| u * (v - lo)).sum();
                let gin = &mut before[*input].grad[bc * hw..(bc + 1) * hw];
                for (dst, &u) in gin.iter_mut().zip(gout) {
                    *dst -= u / d;
                }
                gin[amin] += sum_u / d - sum_w / (d * d);
                gin[amax] += sum_w / (d * d);
            }
        }
        Op::FrobPosMean { maps, pos } => {
            let gv = g[0];
            let shape = before[*maps].shape.clone();
            let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            for (bi, cats) in pos.iter().enumerate() {
                let coef = gv / (b as f64 * cats.len() as f64);
                for &j in cats {
                    let base = (bi * c + j) * hw;
                    let norm = before[*maps].data[base..base + hw]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    for p in 0..hw {
                        let v = before[*maps].data[base + p];
                        before[*maps].grad[base + p] += coef * v / norm;
                    }
                }
            }
        }
        Op::ChannelMinPos { maps, winner } => {
            let shape = before[*maps].shape.clone();
            let (c, hw) = (shape[1], shape[2] * shape[3]);
            for (i, (&j, &gv)) in winner.iter().zip(g.iter()).enumerate() {
                let bi = i / hw;
                let p = i % hw;
                before[*maps].grad[(bi * c + j as usize) * hw + p] += gv;
            }
        }
    }
    Ok(())
}

fn conv_out_size(h: usize, w: usize, k: usize, stride: usize, padding: usize) -> Result<(usize, usize)> {
    if k == 0 || stride == 0 {
        return Err(TensorError::InvalidConfig {
            op: "conv2d",
            detail: "kernel and stride must be >= 1".into(),
        });
    }
    let span_h = h + 2 * padding;
    let span_w = w + 2 * padding;
    if span_h < k || span_w < k || (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
        return Err(TensorError::InvalidConfig {
            op: "conv2d",
            detail: format!(
                "output size is not a positive integer for {h}x{w}, k={k}, stride={stride}, padding={padding}"
            ),
        });
    }
    Ok(((span_h - k) / stride + 1, (span_w - k) / stride + 1))
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..cin {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * ohw..((ci * k + ky) * k + kx + 1) * ohw];
                for oy in 0..oh {
                    let y = (oy * stride + ky) as isize - padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &plane[y as usize * w..(y as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * stride + kx) as isize - padding as isize;
                        *d = if x < 0 || x >= w as isize { 0.0 } else { src_row[x as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..cin {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * ohw..((ci * k + ky) * k + kx + 1) * ohw];
                for oy in 0..oh {
                    let y = (oy * stride + ky) as isize - padding as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * stride + kx) as isize - padding as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        plane[y as usize * w + x as usize] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scales_like_identity() {
        // 3x3 ones, single 1x1 kernel of 2 -> all 2.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.leaf(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert!(tape.data(y).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_hand_cross_correlation() {
        // [[1,2],[3,4]] against a 2x2 kernel of ones collapses to [[10]].
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.data(y), &[10.0]);
    }

    #[test]
    fn conv_kernel_grad_is_input() {
        // d sum(out) / d kernel of the 2x2 case above is the input itself.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        let loss = tape.weighted_sum(y, &[1.0]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_rejects_fractional_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(
            tape.conv2d(x, w, b, 2, 0),
            Err(TensorError::InvalidConfig { .. })
        ));
    }

    #[test]
    fn relu_clamps_and_gates_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
        let loss = tape.weighted_sum(y, &[1.0, 1.0, 1.0]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_is_zero_everywhere() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[-3.0, -0.5, -2.0, -0.1]));
        let y = tape.relu(x).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
        let loss = tape.weighted_sum(y, &[1.0; 4]).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_pool_basic_and_tie_break() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.max_pool(x, 2, 2, 0).unwrap();
        assert_eq!(tape.data(y), &[4.0]);

        // constant map: value preserved, gradient routed to the first
        // element of the window.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 7.0));
        let y = tape.max_pool(x, 2, 2, 0).unwrap();
        assert_eq!(tape.data(y), &[7.0]);
        let loss = tape.weighted_sum(y, &[1.0]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_output_shape_with_padding() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 8, 8], 1.0));
        let y = tape.max_pool(x, 3, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    }

    #[test]
    fn global_avg_pool_hand_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.data(y), &[2.5]);
        let loss = tape.weighted_sum(y, &[1.0]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn tape_bilinear_matches_value_version() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 1, 2], &[0.0, 1.0]));
        let y = tape.bilinear_resize(x, 1, 4).unwrap();
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in tape.data(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn min_many_routes_gradient_to_first_winner() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 0.3]));
        let b = tape.leaf(t(&[2], &[0.5, 1.0]));
        let m = tape.min_many(&[a, b]).unwrap();
        assert_eq!(tape.data(m), &[0.5, 0.3]);
        let loss = tape.weighted_sum(m, &[1.0, 1.0]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a), &[0.0, 1.0]);
        assert_eq!(tape.grad(b), &[1.0, 0.0]);
    }

    #[test]
    fn multiply_identity_and_zero_masks() {
        let mut tape = Tape::new();
        let f = tape.leaf(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.leaf(Tensor::full(&[1, 1, 1, 2], 1.0));
        let y = tape.multiply(f, ones).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);

        let zeros = tape.leaf(Tensor::zeros(&[1, 1, 1, 2]));
        let z = tape.multiply(f, zeros).unwrap();
        assert!(tape.data(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multiply_channel_broadcast_gradients() {
        let mut tape = Tape::new();
        let f = tape.leaf(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = tape.leaf(t(&[1, 1, 1, 2], &[0.5, 2.0]));
        let y = tape.multiply(f, m).unwrap();
        assert_eq!(tape.data(y), &[0.5, 4.0, 1.5, 8.0]);
        let loss = tape.weighted_sum(y, &[1.0; 4]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(f), &[0.5, 2.0, 0.5, 2.0]);
        // map grad sums over channels: 1+3 and 2+4
        assert_eq!(tape.grad(m), &[4.0, 6.0]);
    }

    #[test]
    fn bce_zero_logit_is_ln2() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(&[1, 1], &[0.0]));
        let y = t(&[1, 1], &[1.0]);
        let loss = tape.multilabel_bce(s, &y).unwrap();
        assert!((tape.item(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_saturated_logit_does_not_overflow() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(&[1, 1], &[30.0]));
        let y = t(&[1, 1], &[1.0]);
        let loss = tape.multilabel_bce(s, &y).unwrap();
        assert!(tape.item(loss) < 1e-9);
        assert!(tape.item(loss) >= 0.0);
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(&[1, 1], &[0.0]));
        let y = t(&[1, 1], &[0.5]);
        assert!(matches!(
            tape.multilabel_bce(s, &y),
            Err(TensorError::NonBinaryLabel { .. })
        ));
    }

    #[test]
    fn normalize_map_hand_example() {
        let mut tape = Tape::new();
        let h = tape.leaf(t(&[1, 1, 2, 2], &[0.0, 2.0, 4.0, 8.0]));
        let m = tape.normalize_map(h, 1e-5).unwrap();
        let expect = [1.0, 0.75, 0.5, 0.0];
        for (a, b) in tape.data(m).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-4, "{:?}", tape.data(m));
        }
    }

    #[test]
    fn normalize_map_constant_is_all_ones() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::full(&[1, 1, 3, 3], 5.0));
        let m = tape.normalize_map(h, 1e-5).unwrap();
        assert!(tape.data(m).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frob_pos_mean_all_ones_map() {
        // ||ones 2x2||_F = 2 for a single positive category.
        let mut tape = Tape::new();
        let maps = tape.leaf(Tensor::full(&[1, 2, 2, 2], 1.0));
        let s = tape.frob_pos_mean(maps, &[vec![0]]).unwrap();
        assert!((tape.item(s) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn channel_min_pos_selects_positive_channels_only() {
        let mut tape = Tape::new();
        // channel 0 = 0.9, channel 1 = 0.1; only channel 0 is positive.
        let maps = tape.leaf(t(&[1, 2, 1, 1], &[0.9, 0.1]));
        let m = tape.channel_min_pos(maps, &[vec![0]]).unwrap();
        assert_eq!(tape.data(m), &[0.9]);
        let both = {
            let mut tape = Tape::new();
            let maps = tape.leaf(t(&[1, 2, 1, 1], &[0.9, 0.1]));
            let m = tape.channel_min_pos(maps, &[vec![0, 1]]).unwrap();
            tape.data(m).to_vec()
        };
        assert_eq!(both, vec![0.1]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[2.0]));
        let y = tape.scale(x, 3.0).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn linear_layer_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2], &[0.5, -0.5]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.data(y), &[1.5, 1.5]);
    }
}
