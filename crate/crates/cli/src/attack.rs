use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde_json::json;

use fedpart::analysis::{dlg_attack, sample_gradient, DlgConfig, InputOptimizer};
use fedpart::autodiff::Targets;
use fedpart::data::{load_dataset, save_dataset, Dataset};
use fedpart::engine::load_checkpoint;
use fedpart::{LayerMask, LayerPartition, Tensor};

use crate::{emit_json, CmdResult, Failure, Globals};

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file holding the victim sample.
    #[arg(long)]
    sample: PathBuf,
    /// Row of the dataset to attack.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// `all`, or a comma-separated list of group names such as `#1,#3`.
    #[arg(long, default_value = "all")]
    groups: String,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[arg(long, value_enum, default_value_t = Optimizer::Gd)]
    optimizer: Optimizer,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Optimizer {
    Gd,
    Adam,
}

fn parse_groups(spec: &str, partition: &LayerPartition) -> Result<LayerMask, Failure> {
    let m = partition.len();
    if spec.trim() == "all" {
        return Ok(LayerMask::all(m));
    }
    let mut bits = vec![false; m];
    let mut unknown = vec![];
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match partition.index_of(name) {
            Some(i) => bits[i] = true,
            None => unknown.push(name.to_string()),
        }
    }
    if !unknown.is_empty() {
        return Err(Failure::config(format!(
            "unknown group(s) {}; valid names: all, {}",
            unknown.join(", "),
            partition.names().join(", ")
        )));
    }
    if !bits.contains(&true) {
        return Err(Failure::config("--groups selects no group"));
    }
    Ok(LayerMask::from_bits(bits))
}

pub fn cmd_attack(args: AttackArgs, g: &Globals) -> CmdResult {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let mask = parse_groups(&args.groups, &model.partition)?;
    let data = load_dataset(&args.sample)?;
    if args.index >= data.len() {
        return Err(Failure::config(format!(
            "--index {} out of range for {} samples",
            args.index,
            data.len()
        )));
    }
    if data.sample_shape() != model.graph.input_shape() {
        return Err(Failure::config(format!(
            "sample shape {:?} does not match the model input {:?}",
            data.sample_shape(),
            model.graph.input_shape()
        )));
    }
    let features = data.features().select_rows(&[args.index]);
    let label = data.labels()[args.index];
    let targets = Targets::Classes(vec![label]);
    let truth = features.clone().reshape(data.sample_shape().to_vec())?;
    let grads = sample_gradient(&model.graph, &model.params, &features, &targets)?;
    let cfg = DlgConfig {
        iters: args.iters,
        step: args.step,
        seed: g.seed.unwrap_or(0),
        optimizer: match args.optimizer {
            Optimizer::Gd => InputOptimizer::Gd,
            Optimizer::Adam => InputOptimizer::Adam,
        },
        ..DlgConfig::default()
    };
    let res = dlg_attack(&model.graph, &model.params, &grads, &mask, &targets, &cfg, Some(&truth))?;
    if let Some(dir) = &g.out {
        std::fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
        let mut shape = vec![1];
        shape.extend(data.sample_shape());
        let recon = Dataset::new(
            Tensor::new(shape, res.reconstruction.data().to_vec())?,
            vec![label],
            data.classes(),
        )?;
        save_dataset(&recon, dir.join("reconstruction.fpds"))?;
    }
    let report = json!({
        "groups": mask.set_indices().iter().map(|&i| model.partition.names()[i].clone()).collect::<Vec<_>>(),
        "index": args.index,
        "label": label,
        "result": res,
    });
    emit_json(&report, g.out.as_ref(), "attack.json")?;
    Ok(())
}
