use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::{json, Value};

use fedpart::config::{run_experiment_seed, ExperimentConfig};
use fedpart::engine::{save_checkpoint, CheckpointMeta};
use fedpart::metrics::{emit_logs, ExperimentSummary};

use crate::{CmdResult, Failure, Globals};

fn mean_std(values: &[f64]) -> Value {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    json!({ "mean": mean, "std": std, "values": values })
}

fn aggregate(cfg: &ExperimentConfig, summaries: &[ExperimentSummary]) -> Value {
    let col = |f: fn(&ExperimentSummary) -> f64| summaries.iter().map(f).collect::<Vec<_>>();
    let ratios: Vec<f64> = summaries.iter().filter_map(|s| s.mean_post_pre_ratio).collect();
    json!({
        "config_hash": cfg.hash(),
        "seeds": summaries.iter().map(|s| s.seed).collect::<Vec<_>>(),
        "rounds": summaries.first().map_or(0, |s| s.rounds),
        "final_accuracy": mean_std(&col(|s| s.final_accuracy)),
        "best_accuracy": mean_std(&col(|s| s.best_accuracy)),
        "total_comm_bytes_per_client": mean_std(&col(|s| s.total_comm_bytes_per_client as f64)),
        "total_flops_fwd": mean_std(&col(|s| s.total_flops_fwd as f64)),
        "total_flops_bwd": mean_std(&col(|s| s.total_flops_bwd as f64)),
        "mean_post_pre_ratio": if ratios.is_empty() { Value::Null } else { mean_std(&ratios) },
    })
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_run(config: &Path, g: &Globals) -> CmdResult {
    let mut cfg = ExperimentConfig::from_path(config).map_err(|e| match e {
        fedpart::Error::InvalidConfig(errs) => Failure::Config(errs),
        other => Failure::config(other.to_string()),
    })?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.out_dir = Some(out.clone());
    }
    if g.threads.is_some() {
        cfg.threads = g.threads;
    }
    cfg.check()?;
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("fedpart-out"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.json"), &serde_json::to_string_pretty(&cfg).map_err(anyhow::Error::from)?)?;

    let mut summaries = vec![];
    for r in 0..cfg.repeat {
        let seed = cfg.repeat_seed(r);
        let (log, sim) = run_experiment_seed(&cfg, seed)?;
        let dir = out.join(format!("seed-{seed}"));
        emit_logs(&log, &dir)?;
        write(
            &dir.join("plan.json"),
            &serde_json::to_string_pretty(&sim.server.plan.to_audit_json()).map_err(anyhow::Error::from)?,
        )?;
        let meta = CheckpointMeta {
            round: sim.server.round,
            config_hash: cfg.hash(),
            model: cfg.model.clone(),
        };
        save_checkpoint(dir.join("model.fprt"), &sim.server.global, &meta)?;
        println!(
            "seed {seed}: {} rounds, final acc {:.4}, best acc {:.4}, upstream {} B/client",
            log.summary.rounds,
            log.summary.final_accuracy,
            log.summary.best_accuracy,
            log.summary.total_comm_bytes_per_client
        );
        summaries.push(log.summary);
    }
    let agg = aggregate(&cfg, &summaries);
    write(
        &out.join("aggregate.json"),
        &format!("{}\n", serde_json::to_string_pretty(&agg).map_err(anyhow::Error::from)?),
    )?;
    println!(
        "final acc {:.4} ± {:.4} over {} seed(s); logs in {}",
        agg["final_accuracy"]["mean"].as_f64().unwrap_or(0.0),
        agg["final_accuracy"]["std"].as_f64().unwrap_or(0.0),
        summaries.len(),
        out.display()
    );
    Ok(())
}
