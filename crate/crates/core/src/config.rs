//! Experiment configuration: JSON schema, total validation and the
//! end-to-end experiment driver.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    balanced_test_split, generate_synthetic, load_dataset, partition_dirichlet, partition_iid, Dataset,
    SyntheticParams,
};
use crate::engine::{AlgoConfig, BnEvalPolicy, SimSettings, Simulation};
use crate::error::{Error, Result};
use crate::metrics::{ExperimentLog, ExperimentSummary};
use crate::model_zoo::{self, ModelSpec};
use crate::schedule::{build_schedule, ScheduleConfig};
use crate::seed;

/// Keys that must appear in every experiment config.
pub const REQUIRED_KEYS: [&str; 5] = ["model", "data", "clients", "schedule", "algo"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticParams),
    File {
        train: PathBuf,
        /// Held-out set; when absent a balanced split is cut from `train`.
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub data: DataSource,
    #[serde(default = "default_partition")]
    pub partition: PartitionConfig,
    pub clients: usize,
    #[serde(default = "one")]
    pub participation: f64,
    /// Test samples per class when the test set is split off the training data.
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    pub schedule: ScheduleConfig,
    pub algo: AlgoConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub repeat: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_bytes")]
    pub bytes_per_param: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Log `‖S ⊙ ∇f(w̄)‖²` before every round (one extra full-batch pass).
    #[serde(default)]
    pub track_theorem1: bool,
    #[serde(default = "default_bn_eval")]
    pub bn_eval: BnEvalPolicy,
}

fn default_partition() -> PartitionConfig {
    PartitionConfig::Iid
}
fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn default_test_per_class() -> usize {
    50
}
fn default_bytes() -> u64 {
    4
}
fn default_bn_eval() -> BnEvalPolicy {
    BnEvalPolicy::ServerRunning
}

impl ExperimentConfig {
    /// Parses and fully validates a JSON config, reporting every problem found.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(vec![format!("malformed JSON: {e}")]))?;
        let Some(obj) = value.as_object() else {
            return Err(Error::InvalidConfig(vec!["config must be a JSON object".into()]));
        };
        let missing: Vec<String> = REQUIRED_KEYS
            .iter()
            .filter(|k| !obj.contains_key(**k))
            .map(|k| format!("missing required key `{k}`"))
            .collect();
        if !missing.is_empty() {
            return Err(Error::InvalidConfig(missing));
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::InvalidConfig(vec![e.to_string()]))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.model.validate();
        match &self.data {
            DataSource::Synthetic(p) => {
                errs.extend(p.validate());
                if p.sample_shape() != self.model.input_shape {
                    errs.push(format!(
                        "data sample shape {:?} does not match model.input_shape {:?}",
                        p.sample_shape(),
                        self.model.input_shape
                    ));
                }
                if p.classes != self.model.classes {
                    errs.push(format!(
                        "data.classes = {} but model.classes = {}",
                        p.classes, self.model.classes
                    ));
                }
                let needed = p.classes * self.test_per_class + self.clients;
                if p.n < needed {
                    errs.push(format!(
                        "data.n = {} is too small for {} test samples per class plus one sample per client",
                        p.n, self.test_per_class
                    ));
                }
            }
            DataSource::File { train, .. } => {
                if train.as_os_str().is_empty() {
                    errs.push("data.file.train must name a file".into());
                }
            }
        }
        if let PartitionConfig::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                errs.push(format!("partition.alpha must be > 0, got {alpha}"));
            }
        }
        if self.clients == 0 {
            errs.push("clients must be >= 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            errs.push(format!("participation must be in (0, 1], got {}", self.participation));
        }
        if self.test_per_class == 0 {
            errs.push("test_per_class must be >= 1".into());
        }
        errs.extend(self.schedule.validate());
        if self.schedule.groups != self.model.group_count() {
            errs.push(format!(
                "schedule.groups = {} but the model has {} layer groups",
                self.schedule.groups,
                self.model.group_count()
            ));
        }
        errs.extend(self.algo.validate());
        if self.repeat == 0 {
            errs.push("repeat must be >= 1".into());
        }
        if !matches!(self.bytes_per_param, 4 | 8) {
            errs.push(format!("bytes_per_param must be 4 or 8, got {}", self.bytes_per_param));
        }
        if self.threads == Some(0) {
            errs.push("threads must be >= 1 when set".into());
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    /// Hex SHA-256 of the config's canonical JSON serialization, leaving out
    /// `out_dir` and `threads`, which do not affect results.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            out_dir: None,
            threads: None,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Master seed of repetition `index`.
    pub fn repeat_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }
}

/// Train and test sets for one master seed.
pub fn load_data(cfg: &ExperimentConfig, master: u64) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic(p) => {
            let all = generate_synthetic(p, seed::derive(master, "data", 0))?;
            let (test, train) = balanced_test_split(&all, cfg.test_per_class, seed::derive(master, "test-split", 0))?;
            Ok((train, test))
        }
        DataSource::File { train, test } => {
            let all = load_dataset(train)?;
            match test {
                Some(t) => Ok((all, load_dataset(t)?)),
                None => {
                    let (test, train) =
                        balanced_test_split(&all, cfg.test_per_class, seed::derive(master, "test-split", 0))?;
                    Ok((train, test))
                }
            }
        }
    }
}

/// Builds the simulation for one master seed without running any round.
pub fn prepare(cfg: &ExperimentConfig, master: u64) -> Result<Simulation> {
    cfg.check()?;
    let (train, test) = load_data(cfg, master)?;
    if train.sample_shape() != cfg.model.input_shape.as_slice() {
        return Err(Error::InvalidConfig(vec![format!(
            "dataset sample shape {:?} does not match model.input_shape {:?}",
            train.sample_shape(),
            cfg.model.input_shape
        )]));
    }
    if train.classes() > cfg.model.classes {
        return Err(Error::InvalidConfig(vec![format!(
            "dataset has {} classes, model has {}",
            train.classes(),
            cfg.model.classes
        )]));
    }
    let part_seed = seed::derive(master, "partition", 0);
    let shards = match cfg.partition {
        PartitionConfig::Iid => partition_iid(&train, cfg.clients, part_seed)?,
        PartitionConfig::Dirichlet { alpha } => partition_dirichlet(&train, cfg.clients, alpha, part_seed)?,
    };
    let model = model_zoo::build(&cfg.model, seed::derive(master, "model", 0))?;
    let mut sched = cfg.schedule.clone();
    sched.seed = seed::derive(master, "schedule", cfg.schedule.seed);
    let plan = build_schedule(&sched)?;
    Simulation::new(
        model.graph,
        model.params,
        plan,
        cfg.algo.clone(),
        train,
        test,
        shards.shards,
        SimSettings {
            master_seed: master,
            participation: cfg.participation,
            bytes_per_param: cfg.bytes_per_param,
            track_masked_grad: cfg.track_theorem1,
            bn_eval: cfg.bn_eval,
        },
    )
}

/// Runs every round of the schedule for one master seed.
pub fn run_experiment_seed(cfg: &ExperimentConfig, master: u64) -> Result<(ExperimentLog, Simulation)> {
    let mut sim = prepare(cfg, master)?;
    let records = sim.run_all()?;
    let ratios = sim.step_sizes.post_pre_ratios();
    let mean_post_pre_ratio =
        (!ratios.is_empty()).then(|| ratios.iter().map(|(_, r)| r).sum::<f64>() / ratios.len() as f64);
    let summary = ExperimentSummary {
        seed: master,
        rounds: records.len(),
        final_accuracy: records.last().map_or(0.0, |r| r.test_accuracy),
        best_accuracy: records.iter().map(|r| r.test_accuracy).fold(0.0, f64::max),
        total_comm_bytes_per_client: sim.ledger.totals.upstream_bytes_per_client,
        total_flops_fwd: sim.ledger.totals.forward_flops,
        total_flops_bwd: sim.ledger.totals.backward_flops,
        mean_post_pre_ratio,
    };
    let log = ExperimentLog {
        records,
        step_sizes: sim.step_sizes.clone(),
        ledger: sim.ledger.clone(),
        summary,
    };
    Ok((log, sim))
}

/// Runs the experiment at the config's master seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentLog> {
    Ok(run_experiment_seed(cfg, cfg.seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_json() -> String {
        r#"{
            "model": {"kind": "mlp", "input_shape": [4], "widths": [6], "classes": 3},
            "data": {"synthetic": {"kind": "blobs", "n": 240, "classes": 3, "dim": 4}},
            "clients": 2,
            "test_per_class": 20,
            "schedule": {"groups": 2, "rounds_per_layer": 1, "warmup_rounds": 1,
                         "interleave_fnu_rounds": 0, "cycles": 1, "order": "sequential"},
            "algo": {"algorithm": "fedavg", "local_iters": 3, "batch_size": 16},
            "seed": 7
        }"#
        .into()
    }

    #[test]
    fn toy_config_runs_schedule_length() {
        let cfg = ExperimentConfig::from_json_str(&toy_json()).unwrap();
        let log = run_experiment(&cfg).unwrap();
        assert_eq!(log.records.len(), 3);
        let again = run_experiment(&cfg).unwrap();
        assert_eq!(log, again);
    }

    #[test]
    fn missing_key_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(&toy_json()).unwrap();
        v.as_object_mut().unwrap().remove("schedule");
        let err = ExperimentConfig::from_json_str(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("`schedule`"), "{err}");
    }

    #[test]
    fn every_violation_is_reported() {
        let mut v: serde_json::Value = serde_json::from_str(&toy_json()).unwrap();
        v["participation"] = 1.5.into();
        v["schedule"]["groups"] = 5.into();
        v["algo"]["batch_size"] = 0.into();
        let Err(Error::InvalidConfig(errs)) = ExperimentConfig::from_json_str(&v.to_string()) else {
            panic!("expected config error");
        };
        assert_eq!(errs.len(), 3, "{errs:?}");
    }

    #[test]
    fn unknown_field_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&toy_json()).unwrap();
        v["algo"]["learning_rate"] = 0.1.into();
        assert!(ExperimentConfig::from_json_str(&v.to_string()).is_err());
    }

    #[test]
    fn hash_is_stable() {
        let cfg = ExperimentConfig::from_json_str(&toy_json()).unwrap();
        assert_eq!(cfg.hash(), cfg.clone().hash());
        assert_eq!(cfg.hash().len(), 64);
        let mut moved = cfg.clone();
        moved.out_dir = Some("elsewhere".into());
        moved.threads = Some(3);
        assert_eq!(moved.hash(), cfg.hash());
        moved.seed += 1;
        assert_ne!(moved.hash(), cfg.hash());
    }
}
