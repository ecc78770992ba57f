//! Round-by-round trainable-group schedules.
//!
//! A partial schedule is: `warmup_rounds` full-network rounds, then `cycles`
//! sweeps over the `M` groups where each group trains for `rounds_per_layer`
//! consecutive rounds, with `interleave_fnu_rounds` full-network rounds
//! between consecutive sweeps (never after the last one).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::LayerMask;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrder {
    Sequential,
    Reverse,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Partial-network rounds as described above.
    Partial,
    /// Baseline: the same number of rounds, every one training all groups.
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub groups: usize,
    pub rounds_per_layer: usize,
    pub warmup_rounds: usize,
    pub interleave_fnu_rounds: usize,
    pub cycles: usize,
    pub order: LayerOrder,
    #[serde(default = "default_mode")]
    pub mode: ScheduleMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_mode() -> ScheduleMode {
    ScheduleMode::Partial
}

impl ScheduleConfig {
    pub fn sequential(groups: usize, rounds_per_layer: usize, warmup_rounds: usize, cycles: usize) -> Self {
        ScheduleConfig {
            groups,
            rounds_per_layer,
            warmup_rounds,
            interleave_fnu_rounds: 0,
            cycles,
            order: LayerOrder::Sequential,
            mode: ScheduleMode::Partial,
            seed: 0,
        }
    }

    /// The full-network baseline with an identical round budget.
    pub fn full_equivalent(&self) -> Self {
        ScheduleConfig {
            mode: ScheduleMode::Full,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = vec![];
        if self.groups == 0 {
            errs.push("schedule.groups must be >= 1".into());
        }
        if self.rounds_per_layer == 0 {
            errs.push("schedule.rounds_per_layer must be >= 1".into());
        }
        if self.cycles == 0 {
            errs.push("schedule.cycles must be >= 1".into());
        }
        errs
    }

    pub fn total_rounds(&self) -> usize {
        self.warmup_rounds
            + self.cycles * self.groups * self.rounds_per_layer
            + self.cycles.saturating_sub(1) * self.interleave_fnu_rounds
    }

    /// Group visiting order for one sweep (1-based cycle index).
    pub fn cycle_order(&self, cycle: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.groups).collect();
        match self.order {
            LayerOrder::Sequential => {}
            LayerOrder::Reverse => order.reverse(),
            LayerOrder::Random => order.shuffle(&mut seed::derived_rng(self.seed, "layer-order", cycle as u64)),
        }
        order
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Pnu,
    Interleave,
    /// A round of the full-network baseline schedule.
    Fnu,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Pnu => "pnu",
            Phase::Interleave => "interleave",
            Phase::Fnu => "fnu",
        }
    }

    pub fn is_full(self) -> bool {
        self != Phase::Pnu
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    /// 1-based.
    pub round: usize,
    pub phase: Phase,
    /// 0 during warm-up; interleave rounds carry the index of the sweep they follow.
    pub cycle: usize,
    pub mask: LayerMask,
}

impl PlanEntry {
    /// Trained group names (`#1` …).
    pub fn group_names(&self) -> Vec<String> {
        self.mask.set_indices().iter().map(|g| format!("#{}", g + 1)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub groups: usize,
    pub entries: Vec<PlanEntry>,
}

impl RoundPlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, round: usize) -> Result<&PlanEntry> {
        if round == 0 || round > self.entries.len() {
            return Err(Error::OutOfRange {
                index: round,
                len: self.entries.len(),
            });
        }
        Ok(&self.entries[round - 1])
    }

    /// Audit form: one object per round with `round`, `phase`, `groups`, `cycle`.
    pub fn to_audit_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.entries
                .iter()
                .map(|e| {
                    serde_json::json!({
                        "round": e.round,
                        "phase": e.phase.as_str(),
                        "groups": e.group_names(),
                        "cycle": e.cycle,
                    })
                })
                .collect(),
        )
    }
}

pub fn build_schedule(cfg: &ScheduleConfig) -> Result<RoundPlan> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    let m = cfg.groups;
    let mut entries = Vec::with_capacity(cfg.total_rounds());
    let mut push = |phase: Phase, cycle: usize, mask: LayerMask| {
        let round = entries.len() + 1;
        entries.push(PlanEntry {
            round,
            phase,
            cycle,
            mask,
        });
    };
    for _ in 0..cfg.warmup_rounds {
        push(Phase::Warmup, 0, LayerMask::all(m));
    }
    for cycle in 1..=cfg.cycles {
        if cycle > 1 {
            for _ in 0..cfg.interleave_fnu_rounds {
                push(Phase::Interleave, cycle - 1, LayerMask::all(m));
            }
        }
        for g in cfg.cycle_order(cycle) {
            for _ in 0..cfg.rounds_per_layer {
                push(Phase::Pnu, cycle, LayerMask::one_hot(m, g));
            }
        }
    }
    if cfg.mode == ScheduleMode::Full {
        for e in &mut entries {
            e.phase = Phase::Fnu;
            e.mask = LayerMask::all(m);
        }
    }
    Ok(RoundPlan { groups: m, entries })
}

pub fn mask_for_round(plan: &RoundPlan, round: usize) -> Result<&LayerMask> {
    plan.entry(round).map(|e| &e.mask)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: &'static str,
    pub round: Option<usize>,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.round {
            Some(r) => write!(f, "{} (round {r}): {}", self.kind, self.detail),
            None => write!(f, "{}: {}", self.kind, self.detail),
        }
    }
}

/// Checks every plan invariant against the configuration. Empty means valid.
pub fn validate_schedule(plan: &RoundPlan, cfg: &ScheduleConfig) -> Vec<Violation> {
    let mut out = vec![];
    let mut flag = |kind: &'static str, round: Option<usize>, detail: String| {
        out.push(Violation { kind, round, detail });
    };
    for e in cfg.validate() {
        flag("config", None, e);
    }
    let m = cfg.groups;
    if plan.len() != cfg.total_rounds() {
        flag(
            "length",
            None,
            format!("{} rounds, expected {}", plan.len(), cfg.total_rounds()),
        );
    }
    for (i, e) in plan.entries.iter().enumerate() {
        if e.round != i + 1 {
            flag("contiguity", Some(e.round), format!("entry {i} carries round {}", e.round));
        }
        if e.mask.len() != m {
            flag("mask width", Some(e.round), format!("{} bits for {m} groups", e.mask.len()));
            continue;
        }
        let expected_full = cfg.mode == ScheduleMode::Full || e.phase.is_full();
        if expected_full && !e.mask.is_full() {
            flag("mask arity", Some(e.round), format!("{:?} round must train every group", e.phase));
        }
        if !expected_full && e.mask.count_set() != 1 {
            flag(
                "mask arity",
                Some(e.round),
                format!("partial round trains {} groups", e.mask.count_set()),
            );
        }
        if cfg.mode == ScheduleMode::Full && e.phase != Phase::Fnu {
            flag("phase", Some(e.round), "baseline plan holds a non-fnu round".into());
        }
    }
    if cfg.mode == ScheduleMode::Full {
        return out;
    }

    // Phase layout: warm-up block first, interleave blocks only between sweeps.
    let mut seen_other = false;
    for e in &plan.entries {
        match e.phase {
            Phase::Warmup if seen_other => {
                flag("phase order", Some(e.round), "warm-up after training began".into())
            }
            Phase::Warmup => {}
            Phase::Fnu => flag("phase", Some(e.round), "fnu round inside a partial plan".into()),
            _ => seen_other = true,
        }
    }
    let warmup = plan.entries.iter().filter(|e| e.phase == Phase::Warmup).count();
    if warmup != cfg.warmup_rounds {
        flag("phase order", None, format!("{warmup} warm-up rounds, expected {}", cfg.warmup_rounds));
    }
    for (i, e) in plan.entries.iter().enumerate() {
        if e.phase != Phase::Interleave {
            continue;
        }
        let before = plan.entries[..i].iter().rev().find(|x| x.phase != Phase::Interleave);
        let after = plan.entries[i + 1..].iter().find(|x| x.phase != Phase::Interleave);
        let between = matches!((before, after), (Some(b), Some(a))
            if b.phase == Phase::Pnu && a.phase == Phase::Pnu && a.cycle == b.cycle + 1 && e.cycle == b.cycle);
        if !between {
            flag("interleave placement", Some(e.round), "interleave round not between two sweeps".into());
        }
    }

    // Per-sweep coverage and ordering.
    for cycle in 1..=cfg.cycles {
        let trained: Vec<(usize, usize)> = plan
            .entries
            .iter()
            .filter(|e| e.phase == Phase::Pnu && e.cycle == cycle && e.mask.len() == m)
            .filter_map(|e| e.mask.first_set().map(|g| (e.round, g)))
            .collect();
        let mut counts = vec![0usize; m];
        for &(_, g) in &trained {
            counts[g] += 1;
        }
        for (g, &c) in counts.iter().enumerate() {
            if c != cfg.rounds_per_layer {
                flag(
                    "coverage",
                    None,
                    format!("cycle {cycle}: group #{} trained {c} times, expected {}", g + 1, cfg.rounds_per_layer),
                );
            }
        }
        let seq: Vec<usize> = trained.iter().map(|&(_, g)| g).collect();
        for w in seq.windows(2) {
            let ok = match cfg.order {
                LayerOrder::Sequential => w[0] <= w[1],
                LayerOrder::Reverse => w[0] >= w[1],
                LayerOrder::Random => true,
            };
            if !ok {
                flag("monotonicity", None, format!("cycle {cycle}: #{} followed by #{}", w[0] + 1, w[1] + 1));
            }
        }
        // Each group's rounds are contiguous within the sweep.
        let mut finished = vec![false; m];
        for (i, &g) in seq.iter().enumerate() {
            if finished[g] {
                flag("contiguity", None, format!("cycle {cycle}: group #{} trained in split runs", g + 1));
                break;
            }
            if i + 1 < seq.len() && seq[i + 1] != g {
                finished[g] = true;
            }
        }
    }
    let stray = plan.entries.iter().filter(|e| e.phase == Phase::Pnu && (e.cycle == 0 || e.cycle > cfg.cycles));
    for e in stray {
        flag("coverage", Some(e.round), format!("round assigned to unknown cycle {}", e.cycle));
    }
    out
}
