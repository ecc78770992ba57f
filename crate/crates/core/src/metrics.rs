//! Step sizes, communication and compute accounting, accuracy, and log files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Graph};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{LayerMask, LayerPartition, ParamSet};
use crate::schedule::Phase;

/// L2 norm of the concatenated difference over every group.
pub fn step_size(prev: &ParamSet, next: &ParamSet) -> Result<f64> {
    prev.check_conforms(next, "step size")?;
    let mut acc = 0.0;
    for (a, b) in prev.groups.iter().flat_map(|g| &g.slots).zip(next.groups.iter().flat_map(|g| &g.slots)) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            let d = y - x;
            acc += d * d;
        }
    }
    Ok(acc.sqrt())
}

/// Upstream bytes one client sends for a round: the masked groups' parameters only.
pub fn comm_bytes_for_round(mask: &LayerMask, partition: &LayerPartition, bytes_per_param: u64) -> u64 {
    partition
        .groups
        .iter()
        .enumerate()
        .filter(|(g, _)| mask.is_set(*g))
        .map(|(_, grp)| grp.param_count as u64 * bytes_per_param)
        .sum()
}

/// Forward and backward FLOPs from a per-group forward cost profile.
///
/// Forward always runs through the whole network. Backward runs from the
/// output down to the shallowest trainable group inclusive, at twice each
/// traversed group's forward cost.
pub fn flops_from_profile(per_group_forward: &[u64], mask: &LayerMask, samples: u64) -> (u64, u64) {
    let forward: u64 = per_group_forward.iter().sum::<u64>() * samples;
    let backward = match mask.first_set() {
        Some(first) => 2 * per_group_forward[first..].iter().sum::<u64>() * samples,
        None => 0,
    };
    (forward, backward)
}

pub fn flops_for_round(graph: &Graph, mask: &LayerMask, batch_size: u64, local_iterations: u64) -> (u64, u64) {
    flops_from_profile(&graph.group_forward_flops(), mask, batch_size * local_iterations)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_accuracy(graph: &Graph, params: &ParamSet, bn: BnMode, test: &Dataset) -> Result<f64> {
    let logits = graph.logits(params, test.features(), bn)?;
    let correct = test
        .labels()
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(logits.row(*i)) == l)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub round: usize,
    pub clients: usize,
    pub upstream_bytes_per_client: u64,
    pub upstream_bytes_total: u64,
    /// Training FLOPs summed over participating clients.
    pub forward_flops: u64,
    pub backward_flops: u64,
    /// Test-set evaluation FLOPs on the server (kept out of training totals).
    pub eval_flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub upstream_bytes_per_client: u64,
    pub upstream_bytes_total: u64,
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub eval_flops: u64,
}

/// Per-round costs and running totals, in exact integer arithmetic.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub entries: Vec<CostEntry>,
    pub totals: CostTotals,
}

impl CostLedger {
    pub fn record(&mut self, entry: CostEntry) {
        let t = &mut self.totals;
        t.upstream_bytes_per_client += entry.upstream_bytes_per_client;
        t.upstream_bytes_total += entry.upstream_bytes_total;
        t.forward_flops += entry.forward_flops;
        t.backward_flops += entry.backward_flops;
        t.eval_flops += entry.eval_flops;
        self.entries.push(entry);
    }

    /// Totals recomputed from the entries.
    pub fn recomputed(&self) -> CostTotals {
        let mut t = CostTotals::default();
        for e in &self.entries {
            t.upstream_bytes_per_client += e.upstream_bytes_per_client;
            t.upstream_bytes_total += e.upstream_bytes_total;
            t.forward_flops += e.forward_flops;
            t.backward_flops += e.backward_flops;
            t.eval_flops += e.eval_flops;
        }
        t
    }
}

/// Iteration-level step sizes, averaged over the clients that ran each iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepSizeSeries {
    pub points: Vec<StepPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPoint {
    pub round: usize,
    /// 1-based local iteration within the round.
    pub iteration: usize,
    pub step_size: f64,
    pub clients: usize,
}

impl StepSizeSeries {
    /// Ratio of each round's first step to the previous round's last step.
    pub fn post_pre_ratios(&self) -> Vec<(usize, f64)> {
        let mut out = vec![];
        let mut last_of_prev: Option<(usize, f64)> = None;
        let mut i = 0;
        while i < self.points.len() {
            let round = self.points[i].round;
            let first = self.points[i].step_size;
            let mut j = i;
            while j + 1 < self.points.len() && self.points[j + 1].round == round {
                j += 1;
            }
            if let Some((_, pre)) = last_of_prev {
                if pre > 0.0 {
                    out.push((round, first / pre));
                }
            }
            last_of_prev = Some((round, self.points[j].step_size));
            i = j + 1;
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,iteration,global_iteration,step_size,clients\n");
        for (k, p) in self.points.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{},{}", p.round, p.iteration, k + 1, p.step_size, p.clients);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty step-size file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let find = |name: &str| {
            cols.iter()
                .position(|c| *c == name)
                .ok_or_else(|| Error::Format(format!("step-size file lacks column {name}")))
        };
        let (ri, ii, si) = (find("round")?, find("iteration")?, find("step_size")?);
        let ci = cols.iter().position(|c| *c == "clients");
        let mut points = vec![];
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let get = |i: usize| {
                f.get(i)
                    .map(|v| v.trim())
                    .ok_or_else(|| Error::Format(format!("line {}: missing field", n + 2)))
            };
            let bad = |e: &dyn std::fmt::Display| Error::Format(format!("line {}: {e}", n + 2));
            points.push(StepPoint {
                round: get(ri)?.parse().map_err(|e| bad(&e))?,
                iteration: get(ii)?.parse().map_err(|e| bad(&e))?,
                step_size: get(si)?.parse().map_err(|e| bad(&e))?,
                clients: match ci {
                    Some(c) => get(c)?.parse().map_err(|e| bad(&e))?,
                    None => 0,
                },
            });
        }
        Ok(StepSizeSeries { points })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub phase: Phase,
    pub cycle: usize,
    pub groups: Vec<String>,
    pub participants: Vec<usize>,
    pub test_accuracy: f64,
    pub mean_loss: f64,
    /// First local step after the preceding aggregation.
    pub step_post: f64,
    /// Last local step before this round's aggregation.
    pub step_pre: f64,
    pub local_iterations: usize,
    pub comm_bytes: u64,
    pub comm_bytes_total: u64,
    pub flops_fwd: u64,
    pub flops_bwd: u64,
    pub eval_flops: u64,
    /// `‖S ⊙ ∇f(w̄)‖²` at the pre-round global model, when tracked.
    pub masked_grad_norm_sq: Option<f64>,
    /// Which batch-norm statistics the server evaluated with.
    pub bn_eval: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub total_comm_bytes_per_client: u64,
    pub total_flops_fwd: u64,
    pub total_flops_bwd: u64,
    pub mean_post_pre_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLog {
    pub records: Vec<RoundRecord>,
    pub step_sizes: StepSizeSeries,
    pub ledger: CostLedger,
    pub summary: ExperimentSummary,
}

pub fn summary_csv(records: &[RoundRecord]) -> String {
    let mut s = String::from("round,phase,acc,comm_bytes,flops_fwd,flops_bwd,step_pre,step_post\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.phase.as_str(),
            r.test_accuracy,
            r.comm_bytes,
            r.flops_fwd,
            r.flops_bwd,
            r.step_pre,
            r.step_post
        );
    }
    s
}

pub fn rounds_jsonl(records: &[RoundRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_rounds_jsonl(text: &str) -> Result<Vec<RoundRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `rounds.jsonl`, `summary.csv`, `stepsizes.csv` and `ledger.json` into `out_dir`.
pub fn emit_logs(log: &ExperimentLog, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("rounds.jsonl"), &rounds_jsonl(&log.records)?)?;
    write(&dir.join("summary.csv"), &summary_csv(&log.records))?;
    write(&dir.join("stepsizes.csv"), &log.step_sizes.to_csv())?;
    let ledger = serde_json::json!({ "ledger": log.ledger, "summary": log.summary });
    write(&dir.join("ledger.json"), &serde_json::to_string_pretty(&ledger)?)?;
    Ok(())
}
