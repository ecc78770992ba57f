//! Model constructors and their canonical layer-group partitions.
//!
//! Groups are numbered `#1` … `#M` from input to output. A dense layer's
//! weight and bias form one group; a convolution forms one group together
//! with the affine parameters of the batch norm that follows it.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphBuilder, LossKind, NodeId};
use crate::error::{Error, Result};
use crate::params::{LayerPartition, ParamGroup, ParamSet, Slot, SlotId};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    MicroResnet,
}

/// Architecture description.
///
/// For `mlp`, `widths` lists the hidden layer widths (possibly empty). For
/// `micro-resnet`, `widths` is the channel plan `[stem, block1, block2,
/// block3, block4]`; blocks 2 and 4 downsample with stride 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_shape: Vec<usize>,
    pub widths: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_shape: vec![inputs],
            widths: hidden.to_vec(),
            classes,
        }
    }

    /// Ten-group residual net on `channels × 8 × 8` images.
    pub fn micro_resnet(channels: usize, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::MicroResnet,
            input_shape: vec![channels, 8, 8],
            widths: vec![4, 4, 8, 8, 16],
            classes,
        }
    }

    /// Number of layer groups the built model will have.
    pub fn group_count(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => self.widths.len() + 1,
            ModelKind::MicroResnet => 10,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = vec![];
        if self.classes < 2 {
            errs.push(format!("model.classes must be >= 2, got {}", self.classes));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            errs.push(format!("model.input_shape must be non-empty and positive, got {:?}", self.input_shape));
        }
        if self.widths.contains(&0) {
            errs.push("model.widths must be positive".into());
        }
        if self.kind == ModelKind::MicroResnet {
            if self.input_shape.len() != 3 {
                errs.push("micro-resnet input_shape must be [C, H, W]".into());
            } else if self.input_shape[1] < 4 || self.input_shape[2] < 4 {
                errs.push("micro-resnet input must be at least 4x4".into());
            }
            if self.widths.len() != 5 {
                errs.push(format!(
                    "micro-resnet needs a 5-entry channel plan, got {}",
                    self.widths.len()
                ));
            }
        }
        errs
    }
}

/// A built model: graph, initial parameters and partition.
#[derive(Clone, Debug)]
pub struct Model {
    pub graph: Graph,
    pub params: ParamSet,
    pub partition: LayerPartition,
}

pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
    match spec.kind {
        ModelKind::Mlp => build_mlp(spec, seed),
        ModelKind::MicroResnet => build_micro_resnet(spec, seed),
    }
}

struct Init {
    rng: seed::Rng,
    groups: Vec<ParamGroup>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: seed::derived_rng(seed, "init", 0),
            groups: vec![],
        }
    }

    fn open_group(&mut self) -> usize {
        let g = self.groups.len();
        self.groups.push(ParamGroup {
            name: format!("#{}", g + 1),
            slots: vec![],
        });
        g
    }

    fn add(&mut self, group: usize, name: String, value: Tensor) -> SlotId {
        let slots = &mut self.groups[group].slots;
        slots.push(Slot { name, value });
        SlotId {
            group,
            slot: slots.len() - 1,
        }
    }

    /// He-normal weights with standard deviation `√(2 / fan_in)`.
    fn he(&mut self, group: usize, name: String, shape: &[usize], fan_in: usize) -> SlotId {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(&mut self.rng))
            .collect();
        let value = Tensor::new(shape.to_vec(), data).expect("shape");
        self.add(group, name, value)
    }

    fn constant(&mut self, group: usize, name: String, shape: &[usize], v: f64) -> SlotId {
        self.add(group, name, Tensor::filled(shape, v))
    }
}

fn invalid(spec: &ModelSpec) -> Result<()> {
    let errs = spec.validate();
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(errs))
    }
}

pub fn build_mlp(spec: &ModelSpec, seed: u64) -> Result<Model> {
    if spec.kind != ModelKind::Mlp {
        return Err(Error::InvalidArgument("build_mlp needs an mlp spec".into()));
    }
    invalid(spec)?;
    let mut init = Init::new(seed);
    let (mut gb, input) = GraphBuilder::new(&spec.input_shape);
    let mut x = if spec.input_shape.len() > 1 {
        gb.flatten("flatten", input)
    } else {
        input
    };
    let mut fan_in: usize = spec.input_shape.iter().product();
    let widths: Vec<usize> = spec.widths.iter().copied().chain([spec.classes]).collect();
    let mut representation = x;
    for (i, &width) in widths.iter().enumerate() {
        let g = init.open_group();
        let w = init.he(g, format!("fc{}.weight", i + 1), &[width, fan_in], fan_in);
        let b = init.constant(g, format!("fc{}.bias", i + 1), &[width], 0.0);
        representation = x;
        x = gb.dense(&format!("fc{}", i + 1), x, w, Some(b), width)?;
        if i + 1 < widths.len() {
            x = gb.relu(&format!("relu{}", i + 1), x);
        }
        fan_in = width;
    }
    let graph = gb.finish(x, Some(representation), LossKind::SoftmaxCrossEntropy)?;
    let params = ParamSet::new(init.groups);
    let partition = params.partition();
    Ok(Model {
        graph,
        params,
        partition,
    })
}

fn conv_bn(
    gb: &mut GraphBuilder,
    init: &mut Init,
    group: usize,
    prefix: &str,
    input: NodeId,
    out_channels: usize,
    kernel: usize,
    stride: usize,
) -> Result<NodeId> {
    let c_in = gb.shape(input)[0];
    let fan_in = c_in * kernel * kernel;
    let w = init.he(
        group,
        format!("{prefix}.conv.weight"),
        &[out_channels, c_in, kernel, kernel],
        fan_in,
    );
    let gamma = init.constant(group, format!("{prefix}.bn.weight"), &[out_channels], 1.0);
    let beta = init.constant(group, format!("{prefix}.bn.bias"), &[out_channels], 0.0);
    let c = gb.conv2d(&format!("{prefix}.conv"), input, w, out_channels, kernel, stride)?;
    gb.batch_norm(&format!("{prefix}.bn"), c, gamma, beta)
}

/// Stem conv (`#1`), four basic blocks with two conv groups each (`#2`–`#9`),
/// global average pooling and a linear classifier (`#10`). A block's 1×1
/// shortcut projection joins the group of its second convolution.
pub fn build_micro_resnet(spec: &ModelSpec, seed: u64) -> Result<Model> {
    if spec.kind != ModelKind::MicroResnet {
        return Err(Error::InvalidArgument("build_micro_resnet needs a micro-resnet spec".into()));
    }
    invalid(spec)?;
    let mut init = Init::new(seed);
    let (mut gb, input) = GraphBuilder::new(&spec.input_shape);
    let g = init.open_group();
    let stem = conv_bn(&mut gb, &mut init, g, "stem", input, spec.widths[0], 3, 1)?;
    let mut x = gb.relu("stem.relu", stem);
    for (b, &width) in spec.widths[1..].iter().enumerate() {
        let prefix = format!("block{}", b + 1);
        let stride = if b % 2 == 1 { 2 } else { 1 };
        let block_in = x;
        let g1 = init.open_group();
        let h = conv_bn(&mut gb, &mut init, g1, &format!("{prefix}.a"), block_in, width, 3, stride)?;
        let h = gb.relu(&format!("{prefix}.a.relu"), h);
        let g2 = init.open_group();
        let h = conv_bn(&mut gb, &mut init, g2, &format!("{prefix}.b"), h, width, 3, 1)?;
        let shortcut = if stride != 1 || gb.shape(block_in)[0] != width {
            conv_bn(&mut gb, &mut init, g2, &format!("{prefix}.shortcut"), block_in, width, 1, stride)?
        } else {
            block_in
        };
        let sum = gb.add(&format!("{prefix}.add"), h, shortcut)?;
        x = gb.relu(&format!("{prefix}.relu"), sum);
    }
    let pooled = gb.global_avg_pool("pool", x)?;
    let g = init.open_group();
    let fan_in = spec.widths[4];
    let w = init.he(g, "fc.weight".into(), &[spec.classes, fan_in], fan_in);
    let b = init.constant(g, "fc.bias".into(), &[spec.classes], 0.0);
    let logits = gb.dense("fc", pooled, w, Some(b), spec.classes)?;
    let graph = gb.finish(logits, Some(pooled), LossKind::SoftmaxCrossEntropy)?;
    let params = ParamSet::new(init.groups);
    let partition = params.partition();
    Ok(Model {
        graph,
        params,
        partition,
    })
}

/// Per-group parameter counts and the total.
pub fn group_param_counts(partition: &LayerPartition) -> (Vec<usize>, usize) {
    partition.group_param_counts()
}
