#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use fedpart::autodiff::{Batch, Graph, GraphBuilder, LossKind, NodeId, Targets};
use fedpart::config::ExperimentConfig;
use fedpart::{seed, ParamGroup, ParamSet, Slot, SlotId, Tensor};

/// The 8-client blob task: MLP with three groups, 20 local iterations a
/// round, 12 rounds (four sweeps when partial).
pub fn toy_config(mode: &str, reset_optimizer: bool, seed: u64) -> ExperimentConfig {
    ExperimentConfig::from_json_str(
        &json!({
            "model": {"kind": "mlp", "input_shape": [4], "widths": [16, 16], "classes": 3},
            "data": {"synthetic": {"kind": "blobs", "n": 600, "classes": 3, "dim": 4, "separation": 3.0}},
            "clients": 8,
            "schedule": {"groups": 3, "rounds_per_layer": 1, "warmup_rounds": 0, "interleave_fnu_rounds": 0,
                         "cycles": 4, "order": "sequential", "mode": mode},
            "algo": {"algorithm": "fedavg", "local_iters": 20, "batch_size": 16, "optimizer": "adam",
                     "reset_optimizer_each_round": reset_optimizer, "hyper": {"lr": 0.01}},
            "seed": seed,
        })
        .to_string(),
    )
    .expect("toy config is valid")
}

struct Slots {
    group: usize,
    next: usize,
}

impl Slots {
    fn open(&mut self) {
        self.group += 1;
        self.next = 0;
    }

    fn take(&mut self) -> SlotId {
        self.next += 1;
        SlotId {
            group: self.group,
            slot: self.next - 1,
        }
    }
}

/// A small random graph mixing every layer type, random parameters and a
/// random batch of two to four samples.
pub fn random_micro_graph(seed_value: u64) -> (Graph, ParamSet, Batch) {
    let mut rng = seed::derived_rng(seed_value, "micro-graph", 0);
    let mut slots = Slots { group: 0, next: 0 };
    let image = seed_value % 2 == 0;
    let input_shape = if image {
        vec![rng.random_range(1..3), rng.random_range(4..7), rng.random_range(4..7)]
    } else {
        vec![rng.random_range(2..6)]
    };
    let (mut gb, input) = GraphBuilder::new(&input_shape);
    let mut x: NodeId = input;
    if image {
        let channels = rng.random_range(1..4);
        let kernel = if rng.random_bool(0.5) { 3 } else { 1 };
        let stride = rng.random_range(1..3);
        x = gb.conv2d("conv1", x, slots.take(), channels, kernel, stride).unwrap();
        if rng.random_bool(0.7) {
            x = gb.batch_norm("bn1", x, slots.take(), slots.take()).unwrap();
        }
        x = gb.relu("relu1", x);
        if rng.random_bool(0.6) {
            slots.open();
            let h = gb.conv2d("conv2", x, slots.take(), channels, 3, 1).unwrap();
            let h = gb.batch_norm("bn2", h, slots.take(), slots.take()).unwrap();
            x = gb.add("add", h, x).unwrap();
            x = gb.relu("relu2", x);
        }
        x = if rng.random_bool(0.5) {
            gb.global_avg_pool("pool", x).unwrap()
        } else {
            gb.flatten("flatten", x)
        };
        slots.open();
    }
    let hidden = rng.random_range(2..6);
    let w = slots.take();
    let b = rng.random_bool(0.7).then(|| slots.take());
    x = gb.dense("fc1", x, w, b, hidden).unwrap();
    x = gb.relu("relu3", x);
    if rng.random_bool(0.5) {
        slots.open();
        let (w1, b1) = (slots.take(), slots.take());
        let skip = gb.dense("fc2", x, w1, Some(b1), hidden).unwrap();
        x = gb.add("add2", skip, x).unwrap();
    }
    slots.open();
    let classes = rng.random_range(2..5);
    let (wo, bo) = (slots.take(), slots.take());
    let out = gb.dense("out", x, wo, Some(bo), classes).unwrap();
    let loss = if rng.random_bool(0.5) {
        LossKind::SoftmaxCrossEntropy
    } else {
        LossKind::SquaredError
    };
    let graph = gb.finish(out, None, loss).unwrap();

    let mut groups: Vec<ParamGroup> = (0..graph.group_count())
        .map(|g| ParamGroup {
            name: format!("#{}", g + 1),
            slots: vec![],
        })
        .collect();
    let mut shapes = graph.slot_shapes().to_vec();
    shapes.sort_by_key(|(id, _)| *id);
    for (id, shape) in shapes {
        let len = shape.iter().product();
        let data = (0..len).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.5 * z + 0.1
        }).collect();
        groups[id.group].slots.push(Slot {
            name: format!("s{}", id.slot),
            value: Tensor::new(shape, data).unwrap(),
        });
    }
    let params = ParamSet::new(groups);

    let n = rng.random_range(2..5);
    let mut shape = vec![n];
    shape.extend(&input_shape);
    let len: usize = shape.iter().product();
    let features = Tensor::new(shape, (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
    let targets = match loss {
        LossKind::SoftmaxCrossEntropy => Targets::Classes((0..n).map(|_| rng.random_range(0..classes)).collect()),
        LossKind::SquaredError => Targets::Values(
            Tensor::new(vec![n, classes], (0..n * classes).map(|_| rng.random::<f64>()).collect()).unwrap(),
        ),
    };
    (graph, params, Batch { features, targets })
}
