use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Subcommand, ValueEnum};
use serde_json::json;

use fedpart::analysis::{estimate_k, running_average, KMaskFamily, KNormalization, MIN_K_SAMPLES};
use fedpart::config::{load_data, ExperimentConfig};
use fedpart::data::load_dataset;
use fedpart::engine::load_checkpoint;
use fedpart::metrics::{parse_rounds_jsonl, StepSizeSeries};

use crate::{emit_json, CmdResult, Failure, Globals};

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Monte-Carlo estimate of the mask-variance ratio k on a checkpoint.
    KEstimate(KArgs),
    /// Running average of the logged masked-gradient norms.
    Theorem1 {
        /// A `rounds.jsonl` log written with `track_theorem1` enabled.
        #[arg(long)]
        log: PathBuf,
    },
    /// First-after / last-before aggregation step-size ratio per round.
    Mismatch {
        /// A `stepsizes.csv` log.
        #[arg(long)]
        steps: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Norm {
    Raw,
    PerParameter,
}

#[derive(Args, Debug)]
pub struct KArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file to sample from.
    #[arg(long, conflicts_with = "config")]
    data: Option<PathBuf>,
    /// Regenerate the training data of an experiment config instead.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = Norm::PerParameter)]
    normalization: Norm,
    /// Compare random equal-size masks of this count instead of the layer groups.
    #[arg(long)]
    random_masks: Option<usize>,
}

pub fn cmd_analyze(cmd: AnalyzeCommand, g: &Globals) -> CmdResult {
    match cmd {
        AnalyzeCommand::KEstimate(args) => k_estimate(args, g),
        AnalyzeCommand::Theorem1 { log } => theorem1(log, g),
        AnalyzeCommand::Mismatch { steps } => mismatch(steps, g),
    }
}

fn k_estimate(args: KArgs, g: &Globals) -> CmdResult {
    if args.samples < MIN_K_SAMPLES {
        return Err(Failure::config(format!(
            "--samples must be >= {MIN_K_SAMPLES}, got {}",
            args.samples
        )));
    }
    let data = match (&args.data, &args.config) {
        (Some(path), _) => load_dataset(path)?,
        (None, Some(cfg_path)) => {
            let cfg = ExperimentConfig::from_path(cfg_path)?;
            load_data(&cfg, g.seed.unwrap_or(cfg.seed))?.0
        }
        (None, None) => return Err(Failure::config("k-estimate needs --data or --config")),
    };
    if args.random_masks == Some(0) {
        return Err(Failure::config("--random-masks must be >= 1"));
    }
    let (model, meta) = load_checkpoint(&args.checkpoint)?;
    let normalization = match args.normalization {
        Norm::Raw => KNormalization::Raw,
        Norm::PerParameter => KNormalization::PerParameter,
    };
    let est = estimate_k(
        &model.graph,
        &model.params,
        &data,
        args.samples,
        normalization,
        args.random_masks.map_or(KMaskFamily::Groups, |masks| KMaskFamily::RandomEqual { masks }),
        g.seed.unwrap_or(0),
    )?;
    let mut report = serde_json::to_value(&est).map_err(anyhow::Error::from)?;
    report["checkpoint_round"] = json!(meta.round);
    emit_json(&report, g.out.as_ref(), "k_estimate.json")?;
    Ok(())
}

fn theorem1(log: PathBuf, g: &Globals) -> CmdResult {
    let text = std::fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
    let records = parse_rounds_jsonl(&text)?;
    if records.is_empty() {
        return Err(Failure::Runtime(anyhow::anyhow!("{} holds no rounds", log.display())));
    }
    let mut values = Vec::with_capacity(records.len());
    for r in &records {
        let v = if r.groups.is_empty() {
            0.0
        } else {
            r.masked_grad_norm_sq.with_context(|| {
                format!(
                    "round {} has no masked-gradient value; rerun with track_theorem1 = true",
                    r.round
                )
            })?
        };
        values.push(v);
    }
    let avg = running_average(&values);
    let report = json!({
        "rounds": records.iter().map(|r| r.round).collect::<Vec<_>>(),
        "metric": values,
        "running_average": avg,
        "final": avg.last().copied().unwrap_or(0.0),
    });
    emit_json(&report, g.out.as_ref(), "theorem1.json")?;
    Ok(())
}

fn mismatch(steps: PathBuf, g: &Globals) -> CmdResult {
    let text = std::fs::read_to_string(&steps).with_context(|| format!("reading {}", steps.display()))?;
    let series = StepSizeSeries::from_csv(&text)?;
    let ratios = series.post_pre_ratios();
    if ratios.is_empty() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{} spans fewer than two rounds with non-zero steps",
            steps.display()
        )));
    }
    let mean = ratios.iter().map(|(_, r)| r).sum::<f64>() / ratios.len() as f64;
    let report = json!({
        "ratios": ratios.iter().map(|(round, ratio)| json!({"round": round, "ratio": ratio})).collect::<Vec<_>>(),
        "mean": mean,
    });
    emit_json(&report, g.out.as_ref(), "mismatch.json")?;
    Ok(())
}
