//! Static computation graphs with a hand-written reverse pass.
//!
//! Nodes are stored in topological order; each node's inputs precede it.
//! A graph ends in exactly one loss head applied to its output node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamSet, SlotId};
use crate::tensor::Tensor;

pub type NodeId = usize;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Input,
    Flatten {
        input: NodeId,
    },
    /// `y = x Wᵀ + b` with `W` of shape `[out, in]`.
    Dense {
        input: NodeId,
        weight: SlotId,
        bias: Option<SlotId>,
    },
    /// NCHW convolution, weight `[c_out, c_in, k, k]`, no bias.
    Conv2d {
        input: NodeId,
        weight: SlotId,
        stride: usize,
        padding: usize,
    },
    /// Per-channel normalization over every axis except axis 1.
    BatchNorm {
        input: NodeId,
        gamma: SlotId,
        beta: SlotId,
        stats: usize,
    },
    Relu {
        input: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
    },
}

impl Op {
    /// Nodes this op reads.
    pub fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input => vec![],
            Op::Flatten { input }
            | Op::Dense { input, .. }
            | Op::Conv2d { input, .. }
            | Op::BatchNorm { input, .. }
            | Op::Relu { input }
            | Op::GlobalAvgPool { input } => vec![input],
            Op::Add { lhs, rhs } => vec![lhs, rhs],
        }
    }

    fn param_slots(&self) -> Vec<SlotId> {
        match *self {
            Op::Dense { weight, bias, .. } => std::iter::once(weight).chain(bias).collect(),
            Op::Conv2d { weight, .. } => vec![weight],
            Op::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => vec![],
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Flatten { .. } => "flatten",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::GlobalAvgPool { .. } => "avgpool",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over the batch of `-log softmax(logits)[label]`.
    SoftmaxCrossEntropy,
    /// Mean over the batch of `Σ_o (pred_o - target_o)²`.
    SquaredError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: Op,
    /// Per-sample output shape (batch axis excluded).
    pub shape: Vec<usize>,
    /// Layer group this node's cost is attributed to.
    pub group: usize,
}

#[derive(Clone, Debug)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Tensor,
    pub targets: Targets,
}

/// Running batch-norm statistics, one entry per batch-norm node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl BnStats {
    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Exponential moving update from the batch statistics of a training pass.
    pub fn update(&mut self, pass: &ForwardPass) {
        for (i, bn) in pass.bn_batch.iter().enumerate() {
            let Some(bn) = bn else { continue };
            let unbias = if bn.count > 1 {
                bn.count as f64 / (bn.count as f64 - 1.0)
            } else {
                1.0
            };
            for c in 0..bn.mean.len() {
                self.mean[i][c] = (1.0 - BN_MOMENTUM) * self.mean[i][c] + BN_MOMENTUM * bn.mean[c];
                self.var[i][c] =
                    (1.0 - BN_MOMENTUM) * self.var[i][c] + BN_MOMENTUM * bn.var[c] * unbias;
            }
        }
    }
}

/// Which statistics batch-norm nodes normalize with.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Batch,
    Running(&'a BnStats),
}

#[derive(Clone, Debug)]
struct BnBatch {
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// Activations recorded by [`Graph::forward`] for a later reverse pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub values: Vec<Tensor>,
    bn_cache: Vec<Option<BnCache>>,
    bn_batch: Vec<Option<BnBatch>>,
}

impl ForwardPass {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node]
    }

    /// Per-channel statistics of every batch-norm node that normalized with batch
    /// statistics in this pass, in node order (biased variance).
    pub fn batch_stats(&self) -> BnStats {
        let (mut mean, mut var) = (vec![], vec![]);
        for bn in self.bn_batch.iter().flatten() {
            mean.push(bn.mean.clone());
            var.push(bn.var.clone());
        }
        BnStats { mean, var }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    nodes: Vec<Node>,
    input_shape: Vec<usize>,
    output: NodeId,
    representation: Option<NodeId>,
    loss: LossKind,
    bn_channels: Vec<usize>,
    slot_shapes: Vec<(SlotId, Vec<usize>)>,
    group_count: usize,
}

/// Loss value with gradients for parameters and (optionally) the input.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub grads: ParamSet,
    pub input_grad: Tensor,
    pub pass: ForwardPass,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn output_width(&self) -> usize {
        self.nodes[self.output].shape.iter().product()
    }

    pub fn representation(&self) -> Option<NodeId> {
        self.representation
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    /// Every parameter slot the graph reads, with its expected shape.
    pub fn slot_shapes(&self) -> &[(SlotId, Vec<usize>)] {
        &self.slot_shapes
    }

    pub fn fresh_bn_stats(&self) -> BnStats {
        BnStats {
            mean: self.bn_channels.iter().map(|&c| vec![0.0; c]).collect(),
            var: self.bn_channels.iter().map(|&c| vec![1.0; c]).collect(),
        }
    }

    pub fn has_batch_norm(&self) -> bool {
        !self.bn_channels.is_empty()
    }

    /// Last node attributed to `group`: the group's output activation.
    pub fn group_output(&self, group: usize) -> Option<NodeId> {
        self.nodes.iter().rposition(|n| n.group == group && !matches!(n.op, Op::Input))
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        for (id, shape) in &self.slot_shapes {
            let node = self
                .nodes
                .iter()
                .find(|n| n.op.param_slots().contains(id))
                .map(|n| n.name.as_str())
                .unwrap_or("?");
            let group = params.groups.get(id.group).ok_or_else(|| {
                Error::Structure(format!("{node}: parameter group {} missing", id.group))
            })?;
            let slot = group.slots.get(id.slot).ok_or_else(|| {
                Error::Structure(format!("{node}: slot {} missing in {}", id.slot, group.name))
            })?;
            if slot.value.shape() != shape.as_slice() {
                return Err(Error::shape(node, shape, slot.value.shape()));
            }
        }
        Ok(())
    }

    fn check_features(&self, features: &Tensor) -> Result<usize> {
        let shape = features.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut expected = vec![shape.first().copied().unwrap_or(0)];
            expected.extend(&self.input_shape);
            return Err(Error::shape(&self.nodes[0].name, &expected, shape));
        }
        if shape[0] == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(shape[0])
    }

    pub fn forward(&self, params: &ParamSet, features: &Tensor, bn: BnMode) -> Result<ForwardPass> {
        self.check_params(params)?;
        let batch = self.check_features(features)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut bn_cache = vec![None; self.nodes.len()];
        let mut bn_batch = vec![None; self.bn_channels.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            let mut out_shape = vec![batch];
            out_shape.extend(&node.shape);
            let out = match node.op {
                Op::Input => features.clone(),
                Op::Flatten { input } => values[input].clone().reshape(out_shape)?,
                Op::Dense { input, weight, bias } => dense_forward(
                    &values[input],
                    params.get(weight),
                    bias.map(|b| params.get(b)),
                ),
                Op::Conv2d {
                    input,
                    weight,
                    stride,
                    padding,
                } => conv_forward(&values[input], params.get(weight), stride, padding, &out_shape),
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (out, cache, batch_stats) =
                        bn_forward(&values[input], params.get(gamma), params.get(beta), stats, bn);
                    bn_cache[id] = Some(cache);
                    bn_batch[stats] = batch_stats;
                    out
                }
                Op::Relu { input } => values[input].map(|v| v.max(0.0)),
                Op::Add { lhs, rhs } => {
                    let mut out = values[lhs].clone();
                    for (o, r) in out.data_mut().iter_mut().zip(values[rhs].data()) {
                        *o += r;
                    }
                    out
                }
                Op::GlobalAvgPool { input } => avgpool_forward(&values[input]),
            };
            if !out.all_finite() {
                return Err(Error::NonFinite {
                    node: node.name.clone(),
                });
            }
            values.push(out);
        }
        Ok(ForwardPass {
            values,
            bn_cache,
            bn_batch,
        })
    }

    /// Loss value and its gradient with respect to the output node.
    pub fn loss_head(&self, logits: &Tensor, targets: &Targets) -> Result<(f64, Tensor)> {
        let batch = logits.rows();
        if targets.len() != batch {
            return Err(Error::shape("loss", &[batch], &[targets.len()]));
        }
        let width = logits.row_len();
        let mut seed = Tensor::zeros(logits.shape());
        let mut total = 0.0;
        match (self.loss, targets) {
            (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
                for (b, &label) in labels.iter().enumerate() {
                    if label >= width {
                        return Err(Error::LabelOutOfRange {
                            label,
                            classes: width,
                        });
                    }
                    let row = logits.row(b);
                    let probs = softmax(row);
                    let lse = log_sum_exp(row);
                    total += lse - row[label];
                    let g = &mut seed.data_mut()[b * width..(b + 1) * width];
                    for (k, p) in probs.iter().enumerate() {
                        g[k] = (p - if k == label { 1.0 } else { 0.0 }) / batch as f64;
                    }
                }
            }
            (LossKind::SquaredError, Targets::Values(values)) => {
                if values.len() != logits.len() {
                    return Err(Error::shape("loss", logits.shape(), values.shape()));
                }
                for (i, (p, y)) in logits.data().iter().zip(values.data()).enumerate() {
                    let r = p - y;
                    total += r * r;
                    seed.data_mut()[i] = 2.0 * r / batch as f64;
                }
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "target kind does not match the loss head".into(),
                ))
            }
        }
        let loss = total / batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                node: "loss".into(),
            });
        }
        Ok((loss, seed))
    }

    /// Reverse pass from arbitrary node seeds; returns parameter and input gradients.
    pub fn backward(
        &self,
        params: &ParamSet,
        pass: &ForwardPass,
        seeds: Vec<(NodeId, Tensor)>,
    ) -> Result<(ParamSet, Tensor)> {
        let mut grads = params.zeros_like();
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (node, seed) in seeds {
            if !seed.same_shape(&pass.values[node]) {
                return Err(Error::shape(
                    &self.nodes[node].name,
                    pass.values[node].shape(),
                    seed.shape(),
                ));
            }
            accumulate(&mut node_grads[node], seed);
        }
        let mut input_grad = Tensor::zeros(pass.values[0].shape());
        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = node_grads[id].take() else {
                continue;
            };
            match self.nodes[id].op {
                Op::Input => input_grad = dy,
                Op::Flatten { input } => {
                    let shape = pass.values[input].shape().to_vec();
                    accumulate(&mut node_grads[input], dy.reshape(shape)?);
                }
                Op::Dense { input, weight, bias } => {
                    let x = &pass.values[input];
                    let w = params.get(weight);
                    let (dx, dw, db) = dense_backward(x, w, &dy);
                    add_into(grads.get_mut(weight), &dw);
                    if let Some(b) = bias {
                        add_into(grads.get_mut(b), &db);
                    }
                    accumulate(&mut node_grads[input], dx);
                }
                Op::Conv2d {
                    input,
                    weight,
                    stride,
                    padding,
                } => {
                    let x = &pass.values[input];
                    let (dx, dw) = conv_backward(x, params.get(weight), &dy, stride, padding);
                    add_into(grads.get_mut(weight), &dw);
                    accumulate(&mut node_grads[input], dx);
                }
                Op::BatchNorm {
                    input, gamma, beta, ..
                } => {
                    let cache = pass.bn_cache[id].as_ref().expect("batch-norm cache");
                    let (dx, dg, db) = bn_backward(cache, params.get(gamma), &dy);
                    add_into(grads.get_mut(gamma), &dg);
                    add_into(grads.get_mut(beta), &db);
                    accumulate(&mut node_grads[input], dx);
                }
                Op::Relu { input } => {
                    let mut dx = dy;
                    for (g, y) in dx.data_mut().iter_mut().zip(pass.values[id].data()) {
                        if *y <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut node_grads[input], dx);
                }
                Op::Add { lhs, rhs } => {
                    accumulate(&mut node_grads[lhs], dy.clone());
                    accumulate(&mut node_grads[rhs], dy);
                }
                Op::GlobalAvgPool { input } => {
                    let x = &pass.values[input];
                    accumulate(&mut node_grads[input], avgpool_backward(x.shape(), &dy));
                }
            }
        }
        Ok((grads, input_grad))
    }

    /// Forward pass, loss, and full reverse pass in one call.
    pub fn evaluate(&self, params: &ParamSet, batch: &Batch, bn: BnMode) -> Result<Evaluation> {
        let pass = self.forward(params, &batch.features, bn)?;
        let (loss, seed) = self.loss_head(&pass.values[self.output], &batch.targets)?;
        let (grads, input_grad) = self.backward(params, &pass, vec![(self.output, seed)])?;
        Ok(Evaluation {
            loss,
            grads,
            input_grad,
            pass,
        })
    }

    /// Mean loss and its parameter gradient over a batch, normalizing with batch statistics.
    pub fn evaluate_loss_and_grads(&self, params: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet)> {
        let ev = self.evaluate(params, batch, BnMode::Batch)?;
        Ok((ev.loss, ev.grads))
    }

    pub fn loss(&self, params: &ParamSet, batch: &Batch, bn: BnMode) -> Result<f64> {
        let pass = self.forward(params, &batch.features, bn)?;
        Ok(self.loss_head(&pass.values[self.output], &batch.targets)?.0)
    }

    pub fn logits(&self, params: &ParamSet, features: &Tensor, bn: BnMode) -> Result<Tensor> {
        let mut pass = self.forward(params, features, bn)?;
        Ok(pass.values.swap_remove(self.output))
    }

    /// Multiply-add forward FLOPs per sample attributed to each layer group.
    ///
    /// Matrix products count two FLOPs per multiply-add. Normalization,
    /// activations, residual adds and pooling are linear in element count.
    /// The loss head is attributed to the deepest group.
    pub fn group_forward_flops(&self) -> Vec<u64> {
        let mut per_group = vec![0u64; self.group_count];
        for node in &self.nodes {
            let elems: u64 = node.shape.iter().product::<usize>() as u64;
            let flops = match node.op {
                Op::Input | Op::Flatten { .. } => 0,
                Op::Dense { input, .. } => {
                    let fan_in: usize = self.nodes[input].shape.iter().product();
                    2 * fan_in as u64 * elems
                }
                Op::Conv2d { input, weight, .. } => {
                    let c_in = self.nodes[input].shape[0] as u64;
                    let k = self.slot_shape(weight)[2] as u64;
                    2 * c_in * k * k * elems
                }
                Op::BatchNorm { .. } => 2 * elems,
                Op::Relu { .. } | Op::Add { .. } => elems,
                Op::GlobalAvgPool { input } => {
                    self.nodes[input].shape.iter().product::<usize>() as u64
                }
            };
            per_group[node.group] += flops;
        }
        if let Some(last) = per_group.last_mut() {
            *last += 3 * self.output_width() as u64;
        }
        per_group
    }

    fn slot_shape(&self, id: SlotId) -> &[usize] {
        self.slot_shapes
            .iter()
            .find(|(s, _)| *s == id)
            .map(|(_, shape)| shape.as_slice())
            .expect("slot registered")
    }

    /// Short description of the layer types present, for logs.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        let mut kinds: Vec<&'static str> = self.nodes.iter().map(|n| n.op.kind()).collect();
        kinds.sort_unstable();
        kinds.dedup();
        kinds
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => add_into(acc, &g),
        None => *slot = Some(g),
    }
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn dense_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (batch, fan_in) = (x.rows(), x.row_len());
    let fan_out = w.shape()[0];
    let mut out = Tensor::zeros(&[batch, fan_out]);
    let wd = w.data();
    for n in 0..batch {
        let xr = x.row(n);
        let or = &mut out.data_mut()[n * fan_out..(n + 1) * fan_out];
        for (o, slot) in or.iter_mut().enumerate() {
            let wr = &wd[o * fan_in..(o + 1) * fan_in];
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..fan_in {
                acc += wr[i] * xr[i];
            }
            *slot = acc;
        }
    }
    out
}

fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, fan_in) = (x.rows(), x.row_len());
    let fan_out = w.shape()[0];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[fan_out]);
    let wd = w.data();
    for n in 0..batch {
        let xr = x.row(n);
        let dyr = dy.row(n);
        for o in 0..fan_out {
            let g = dyr[o];
            db.data_mut()[o] += g;
            let dwr = &mut dw.data_mut()[o * fan_in..(o + 1) * fan_in];
            for i in 0..fan_in {
                dwr[i] += g * xr[i];
            }
        }
        let dxr = &mut dx.data_mut()[n * fan_in..(n + 1) * fan_in];
        for o in 0..fan_out {
            let g = dyr[o];
            let wr = &wd[o * fan_in..(o + 1) * fan_in];
            for i in 0..fan_in {
                dxr[i] += g * wr[i];
            }
        }
    }
    (dx, dw, db)
}

fn conv_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize, out_shape: &[usize]) -> Tensor {
    let (batch, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut out = Tensor::zeros(out_shape);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for n in 0..batch {
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += wdat[((co * c_in + ci) * k + ky) * k + kx]
                                    * xd[((n * c_in + ci) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    od[((n * c_out + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv_backward(x: &Tensor, w: &Tensor, dy: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor) {
    let (batch, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let xd = x.data();
    let wdat = w.data();
    let dyd = dy.data();
    for n in 0..batch {
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dyd[((n * c_out + co) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * c_in + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * c_in + ci) * k + ky) * k + kx;
                                dw.data_mut()[wi] += g * xd[xi];
                                dx.data_mut()[xi] += g * wdat[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Splits a `[B, C, rest…]` tensor's index space into `(batch, channels, inner)`.
fn bn_dims(x: &Tensor) -> (usize, usize, usize) {
    let shape = x.shape();
    let inner: usize = shape[2..].iter().product();
    (shape[0], shape[1], inner)
}

fn bn_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: usize,
    mode: BnMode,
) -> (Tensor, BnCache, Option<BnBatch>) {
    let (batch, channels, inner) = bn_dims(x);
    let count = batch * inner;
    let xd = x.data();
    let (mean, var, batch_stats) = match mode {
        BnMode::Batch => {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut s = 0.0;
                for n in 0..batch {
                    let base = (n * channels + c) * inner;
                    s += xd[base..base + inner].iter().sum::<f64>();
                }
                mean[c] = s / count as f64;
                let mut ss = 0.0;
                for n in 0..batch {
                    let base = (n * channels + c) * inner;
                    ss += xd[base..base + inner]
                        .iter()
                        .map(|v| (v - mean[c]) * (v - mean[c]))
                        .sum::<f64>();
                }
                var[c] = ss / count as f64;
            }
            (mean, var, true)
        }
        BnMode::Running(running) => (running.mean[stats].clone(), running.var[stats].clone(), false),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * inner;
            for i in base..base + inner {
                let h = (xd[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                out.data_mut()[i] = gamma.data()[c] * h + beta.data()[c];
            }
        }
    }
    let record = batch_stats.then(|| BnBatch {
        mean: mean.clone(),
        var: var.clone(),
        count,
    });
    (
        out,
        BnCache {
            xhat,
            inv_std,
            batch_stats,
        },
        record,
    )
}

fn bn_backward(cache: &BnCache, gamma: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, channels, inner) = bn_dims(dy);
    let count = (batch * inner) as f64;
    let xh = cache.xhat.data();
    let dyd = dy.data();
    let mut dgamma = Tensor::zeros(&[channels]);
    let mut dbeta = Tensor::zeros(&[channels]);
    let mut dx = Tensor::zeros(dy.shape());
    for c in 0..channels {
        let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
        for n in 0..batch {
            let base = (n * channels + c) * inner;
            for i in base..base + inner {
                sum_dy += dyd[i];
                sum_dy_xh += dyd[i] * xh[i];
            }
        }
        dgamma.data_mut()[c] = sum_dy_xh;
        dbeta.data_mut()[c] = sum_dy;
        let g = gamma.data()[c];
        let inv = cache.inv_std[c];
        for n in 0..batch {
            let base = (n * channels + c) * inner;
            for i in base..base + inner {
                dx.data_mut()[i] = if cache.batch_stats {
                    g * inv / count * (count * dyd[i] - sum_dy - xh[i] * sum_dy_xh)
                } else {
                    g * inv * dyd[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn avgpool_forward(x: &Tensor) -> Tensor {
    let (batch, channels, inner) = bn_dims(x);
    let mut out = Tensor::zeros(&[batch, channels]);
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * inner;
            out.data_mut()[n * channels + c] =
                x.data()[base..base + inner].iter().sum::<f64>() / inner as f64;
        }
    }
    out
}

fn avgpool_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let (batch, channels) = (x_shape[0], x_shape[1]);
    let inner: usize = x_shape[2..].iter().product();
    for n in 0..batch {
        for c in 0..channels {
            let g = dy.data()[n * channels + c] / inner as f64;
            let base = (n * channels + c) * inner;
            for v in &mut dx.data_mut()[base..base + inner] {
                *v = g;
            }
        }
    }
    dx
}

/// Incremental graph construction with per-sample shape inference.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    input_shape: Vec<usize>,
    bn_channels: Vec<usize>,
    slot_shapes: Vec<(SlotId, Vec<usize>)>,
    current_group: usize,
}

impl GraphBuilder {
    pub fn new(input_shape: &[usize]) -> (Self, NodeId) {
        let b = GraphBuilder {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input,
                shape: input_shape.to_vec(),
                group: 0,
            }],
            input_shape: input_shape.to_vec(),
            bn_channels: vec![],
            slot_shapes: vec![],
            current_group: 0,
        };
        (b, 0)
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node].shape
    }

    fn push(&mut self, name: String, op: Op, shape: Vec<usize>) -> NodeId {
        for slot in op.param_slots() {
            self.current_group = self.current_group.max(slot.group);
        }
        self.nodes.push(Node {
            name,
            op,
            shape,
            group: self.current_group,
        });
        self.nodes.len() - 1
    }

    fn register(&mut self, slot: SlotId, shape: Vec<usize>) -> Result<()> {
        if self.slot_shapes.iter().any(|(s, _)| *s == slot) {
            return Err(Error::Structure(format!("slot {slot:?} used twice")));
        }
        if slot.group < self.current_group {
            return Err(Error::Structure(format!(
                "slot {slot:?} belongs to a shallower group than its predecessors"
            )));
        }
        self.slot_shapes.push((slot, shape));
        Ok(())
    }

    pub fn flatten(&mut self, name: &str, input: NodeId) -> NodeId {
        let n: usize = self.nodes[input].shape.iter().product();
        self.push(name.into(), Op::Flatten { input }, vec![n])
    }

    pub fn dense(
        &mut self,
        name: &str,
        input: NodeId,
        weight: SlotId,
        bias: Option<SlotId>,
        out_features: usize,
    ) -> Result<NodeId> {
        let in_shape = &self.nodes[input].shape;
        if in_shape.len() != 1 {
            return Err(Error::Structure(format!(
                "{name}: dense input must be flat, got {in_shape:?}"
            )));
        }
        let fan_in = in_shape[0];
        self.register(weight, vec![out_features, fan_in])?;
        if let Some(b) = bias {
            self.register(b, vec![out_features])?;
        }
        Ok(self.push(name.into(), Op::Dense { input, weight, bias }, vec![out_features]))
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        input: NodeId,
        weight: SlotId,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<NodeId> {
        if !matches!(kernel, 1 | 3) || !matches!(stride, 1 | 2) {
            return Err(Error::Structure(format!(
                "{name}: unsupported conv kernel {kernel} / stride {stride}"
            )));
        }
        let in_shape = self.nodes[input].shape.clone();
        if in_shape.len() != 3 {
            return Err(Error::Structure(format!(
                "{name}: conv input must be [C, H, W], got {in_shape:?}"
            )));
        }
        let padding = kernel / 2;
        let oh = (in_shape[1] + 2 * padding - kernel) / stride + 1;
        let ow = (in_shape[2] + 2 * padding - kernel) / stride + 1;
        self.register(weight, vec![out_channels, in_shape[0], kernel, kernel])?;
        Ok(self.push(
            name.into(),
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
            vec![out_channels, oh, ow],
        ))
    }

    pub fn batch_norm(&mut self, name: &str, input: NodeId, gamma: SlotId, beta: SlotId) -> Result<NodeId> {
        let shape = self.nodes[input].shape.clone();
        let channels = shape[0];
        self.register(gamma, vec![channels])?;
        self.register(beta, vec![channels])?;
        let stats = self.bn_channels.len();
        self.bn_channels.push(channels);
        Ok(self.push(
            name.into(),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                stats,
            },
            shape,
        ))
    }

    pub fn relu(&mut self, name: &str, input: NodeId) -> NodeId {
        let shape = self.nodes[input].shape.clone();
        self.push(name.into(), Op::Relu { input }, shape)
    }

    pub fn add(&mut self, name: &str, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.nodes[lhs].shape != self.nodes[rhs].shape {
            return Err(Error::shape(name, &self.nodes[lhs].shape, &self.nodes[rhs].shape));
        }
        let shape = self.nodes[lhs].shape.clone();
        Ok(self.push(name.into(), Op::Add { lhs, rhs }, shape))
    }

    pub fn global_avg_pool(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let shape = &self.nodes[input].shape;
        if shape.len() != 3 {
            return Err(Error::Structure(format!("{name}: pooling needs [C, H, W]")));
        }
        let c = shape[0];
        Ok(self.push(name.into(), Op::GlobalAvgPool { input }, vec![c]))
    }

    pub fn finish(
        self,
        output: NodeId,
        representation: Option<NodeId>,
        loss: LossKind,
    ) -> Result<Graph> {
        if self.nodes[output].shape.len() != 1 {
            return Err(Error::Structure("graph output must be flat".into()));
        }
        let group_count = self
            .slot_shapes
            .iter()
            .map(|(s, _)| s.group + 1)
            .max()
            .unwrap_or(0);
        Ok(Graph {
            nodes: self.nodes,
            input_shape: self.input_shape,
            output,
            representation,
            loss,
            bn_channels: self.bn_channels,
            slot_shapes: self.slot_shapes,
            group_count,
        })
    }
}
