//! Federated rounds: client sampling, masked local training, partial upload
//! and server-side averaging.
//!
//! Clients of a round may train on parallel lanes. Every source of
//! randomness is keyed by `(master seed, round, client id)` and the server
//! sorts updates by client id before summing, so results are bit-identical
//! at any lane count.

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta};

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::masked_grad_metric;
use crate::autodiff::{
    contrastive_loss, l2_penalty, masked_adam_step, masked_sgd_step, AdamHyper, Batch, BnMode, BnStats, Graph,
    OptimState, Targets,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    comm_bytes_for_round, evaluate_accuracy, flops_from_profile, CostEntry, CostLedger, RoundRecord, StepPoint,
    StepSizeSeries,
};
use crate::params::{LayerMask, LayerPartition, ParamGroup, ParamSet};
use crate::schedule::{PlanEntry, RoundPlan};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    Fedprox,
    Fedmoon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalOptimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    /// FedProx proximal weight.
    pub mu: f64,
    /// MOON temperature.
    pub tau: f64,
    /// MOON contrastive weight.
    pub mu_con: f64,
    pub local_epochs: usize,
    /// Fixed local iteration count per round; overrides `local_epochs` when set.
    pub local_iters: Option<usize>,
    pub batch_size: usize,
    pub optimizer: LocalOptimizer,
    /// Learning rate and Adam constants (`lr` is also the SGD step).
    pub hyper: AdamHyper,
    /// Apply the FedProx / MOON terms during full-network rounds too.
    pub regularize_full_rounds: bool,
    pub shuffle: bool,
    /// Start every round from zeroed optimizer moments and step counter.
    pub reset_optimizer_each_round: bool,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        AlgoConfig {
            algorithm: Algorithm::Fedavg,
            mu: 0.01,
            tau: 0.5,
            mu_con: 1.0,
            local_epochs: 1,
            local_iters: None,
            batch_size: 32,
            optimizer: LocalOptimizer::Adam,
            hyper: AdamHyper::default(),
            regularize_full_rounds: true,
            shuffle: true,
            reset_optimizer_each_round: false,
        }
    }
}

impl AlgoConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.hyper.validate();
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            errs.push(format!("algo.mu must be >= 0, got {}", self.mu));
        }
        if !(self.tau > 0.0) {
            errs.push(format!("algo.tau must be > 0, got {}", self.tau));
        }
        if !(self.mu_con >= 0.0 && self.mu_con.is_finite()) {
            errs.push(format!("algo.mu_con must be >= 0, got {}", self.mu_con));
        }
        if self.local_epochs == 0 {
            errs.push("algo.local_epochs must be >= 1".into());
        }
        if self.local_iters == Some(0) {
            errs.push("algo.local_iters must be >= 1 when set".into());
        }
        if self.batch_size == 0 {
            errs.push("algo.batch_size must be >= 1".into());
        }
        errs
    }
}

/// Per-client persistent state.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub shard: Vec<usize>,
    /// Local running batch-norm statistics; never uploaded.
    pub bn: BnStats,
    /// The client's model at the end of its previous local training.
    pub last_local: Option<ParamSet>,
    pub optim: OptimState,
}

impl ClientState {
    pub fn new(id: usize, shard: Vec<usize>, graph: &Graph, params: &ParamSet) -> Self {
        ClientState {
            id,
            shard,
            bn: graph.fresh_bn_stats(),
            last_local: None,
            optim: OptimState::new(params),
        }
    }
}

/// What a client uploads: the trainable groups only.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client: usize,
    pub groups: Vec<(usize, ParamGroup)>,
    pub samples: usize,
    pub losses: Vec<f64>,
    pub step_sizes: Vec<f64>,
    /// Samples processed across all local iterations.
    pub samples_processed: u64,
}

impl ClientUpdate {
    pub fn param_count(&self) -> usize {
        self.groups.iter().map(|(_, g)| g.param_count()).sum()
    }
}

/// Round-level facts local training needs beyond the client and the model.
#[derive(Clone, Copy, Debug)]
pub struct LocalContext<'a> {
    pub graph: &'a Graph,
    pub data: &'a Dataset,
    pub master_seed: u64,
    pub round: usize,
    /// Whether this round trains the full network (warm-up, interleave, baseline).
    pub full_round: bool,
}

fn batch_plan(client: &ClientState, algo: &AlgoConfig, ctx: &LocalContext) -> Vec<Vec<usize>> {
    let n = client.shard.len();
    let bs = algo.batch_size.min(n);
    let mut rng = seed::derived_rng(
        seed::derive(ctx.master_seed, "client", client.id as u64),
        "batches",
        ctx.round as u64,
    );
    let mut epoch = || {
        let mut order = client.shard.clone();
        if algo.shuffle {
            order.shuffle(&mut rng);
        }
        order.chunks(bs).map(<[usize]>::to_vec).collect::<Vec<_>>()
    };
    match algo.local_iters {
        Some(iters) => {
            let mut out = Vec::with_capacity(iters);
            while out.len() < iters {
                for b in epoch() {
                    if out.len() == iters {
                        break;
                    }
                    out.push(b);
                }
            }
            out
        }
        None => (0..algo.local_epochs).flat_map(|_| epoch()).collect(),
    }
}

fn representation_of(graph: &Graph, params: &ParamSet, batch: &Batch) -> Result<crate::tensor::Tensor> {
    let node = graph
        .representation()
        .ok_or_else(|| Error::Structure("graph exposes no representation node".into()))?;
    let pass = graph.forward(params, &batch.features, BnMode::Batch)?;
    Ok(pass.values[node].clone())
}

/// Runs masked local training from `global` and returns the trainable groups.
///
/// Frozen groups of the working copy are never written, and neither are
/// their optimizer moments.
pub fn local_train(
    client: &mut ClientState,
    global: &ParamSet,
    mask: &LayerMask,
    algo: &AlgoConfig,
    ctx: &LocalContext,
) -> Result<ClientUpdate> {
    if client.shard.is_empty() {
        return Err(Error::EmptyShard(client.id));
    }
    mask.check_groups(global.group_count())?;
    global.check_conforms(&client.optim.m, "client optimizer state")?;
    if algo.local_epochs == 0 {
        return Err(Error::InvalidArgument("local_epochs must be >= 1".into()));
    }
    let regularize = !ctx.full_round || algo.regularize_full_rounds;
    let use_prox = regularize && algo.algorithm == Algorithm::Fedprox;
    let moon_prev = match (regularize, algo.algorithm) {
        (true, Algorithm::Fedmoon) => client.last_local.clone(),
        _ => None,
    };
    if algo.reset_optimizer_each_round {
        client.optim = OptimState::new(global);
    }
    let graph = ctx.graph;
    let trainable = mask.set_indices();
    let mut working = global.clone();
    let mut losses = vec![];
    let mut steps = vec![];
    let mut processed = 0u64;
    for indices in batch_plan(client, algo, ctx) {
        let batch = ctx.data.batch(&indices);
        processed += indices.len() as u64;
        let pass = graph.forward(&working, &batch.features, BnMode::Batch)?;
        let (mut loss, seed_out) = graph.loss_head(&pass.values[graph.output()], &batch.targets)?;
        let mut seeds = vec![(graph.output(), seed_out)];
        if let Some(prev) = &moon_prev {
            let node = graph
                .representation()
                .ok_or_else(|| Error::Structure("MOON needs a representation node".into()))?;
            let z_global = representation_of(graph, global, &batch)?;
            let z_prev = representation_of(graph, prev, &batch)?;
            let (con, mut dz) = contrastive_loss(&pass.values[node], &z_global, &z_prev, algo.tau);
            loss += algo.mu_con * con;
            for v in dz.data_mut() {
                *v *= algo.mu_con;
            }
            seeds.push((node, dz));
        }
        let (mut grads, _) = graph.backward(&working, &pass, seeds)?;
        client.bn.update(&pass);
        if use_prox {
            let (pen, pgrad) = l2_penalty(&working, global, mask, algo.mu);
            loss += pen;
            for (g, p) in grads.groups.iter_mut().zip(&pgrad.groups) {
                for (gs, ps) in g.slots.iter_mut().zip(&p.slots) {
                    for (a, b) in gs.value.data_mut().iter_mut().zip(ps.value.data()) {
                        *a += b;
                    }
                }
            }
        }
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite {
                node: format!("client {} local objective", client.id),
            });
        }
        let before: Vec<Vec<f64>> = trainable.iter().map(|&g| working.groups[g].flatten()).collect();
        match algo.optimizer {
            LocalOptimizer::Adam => masked_adam_step(&mut working, &grads, mask, &mut client.optim, &algo.hyper)?,
            LocalOptimizer::Sgd => masked_sgd_step(&mut working, &grads, mask, algo.hyper.lr)?,
        }
        let mut sq = 0.0;
        for (&g, old) in trainable.iter().zip(&before) {
            for (a, b) in working.groups[g].flatten().iter().zip(old) {
                sq += (a - b) * (a - b);
            }
        }
        steps.push(sq.sqrt());
        losses.push(loss);
    }
    let groups = trainable.iter().map(|&g| (g, working.groups[g].clone())).collect();
    client.last_local = Some(working);
    Ok(ClientUpdate {
        client: client.id,
        groups,
        samples: client.shard.len(),
        losses,
        step_sizes: steps,
        samples_processed: processed,
    })
}

/// Unweighted mean of the uploaded groups, summed in ascending client id order.
///
/// The mean is taken as `x₀ + Σᵢ (xᵢ − x₀) / n` with `x₀` the lowest-id
/// client, which returns identical uploads bit for bit. Groups outside the
/// mask are copied from `global` untouched.
pub fn aggregate(updates: &[ClientUpdate], global: &ParamSet, mask: &LayerMask) -> Result<ParamSet> {
    mask.check_groups(global.group_count())?;
    if updates.is_empty() {
        return Err(Error::InvalidArgument("no client updates to aggregate".into()));
    }
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client);
    if order.windows(2).any(|w| w[0].client == w[1].client) {
        return Err(Error::Structure("duplicate client update".into()));
    }
    let expected = mask.set_indices();
    for u in &order {
        let got: Vec<usize> = u.groups.iter().map(|(g, _)| *g).collect();
        if got != expected {
            return Err(Error::Structure(format!(
                "client {} uploaded groups {got:?}, round trains {expected:?}",
                u.client
            )));
        }
        for (g, grp) in &u.groups {
            let reference = &global.groups[*g];
            if grp.slots.len() != reference.slots.len()
                || grp.slots.iter().zip(&reference.slots).any(|(a, b)| a.value.shape() != b.value.shape())
            {
                return Err(Error::Structure(format!(
                    "client {} group {} does not match the global shapes",
                    u.client, reference.name
                )));
            }
        }
    }
    let count = order.len() as f64;
    let mut out = global.clone();
    for (k, &g) in expected.iter().enumerate() {
        let target = &mut out.groups[g];
        for (s, slot) in target.slots.iter_mut().enumerate() {
            let data = slot.value.data_mut();
            let base = order[0].groups[k].1.slots[s].value.data();
            let mut acc = vec![0.0; data.len()];
            for u in &order[1..] {
                for ((a, v), b) in acc.iter_mut().zip(u.groups[k].1.slots[s].value.data()).zip(base) {
                    *a += v - b;
                }
            }
            for ((d, a), b) in data.iter_mut().zip(&acc).zip(base) {
                *d = b + a / count;
            }
        }
    }
    Ok(out)
}

/// Number of clients drawn per round: `⌈participation · N⌉`, at least one.
pub fn sampled_count(participation: f64, clients: usize) -> usize {
    (((participation * clients as f64) - 1e-9).ceil() as usize).clamp(1, clients)
}

/// Seeded sample without replacement, returned in ascending id order.
pub fn sample_clients(master_seed: u64, round: usize, clients: usize, participation: f64) -> Vec<usize> {
    let k = sampled_count(participation, clients);
    if k == clients {
        return (0..clients).collect();
    }
    let mut rng = seed::derived_rng(master_seed, "client-sampling", round as u64);
    let mut picked = index::sample(&mut rng, clients, k).into_vec();
    picked.sort_unstable();
    picked
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnEvalPolicy {
    /// The server's own running statistics, which are never refreshed from clients.
    ServerRunning,
    /// Statistics of the evaluation batch itself.
    TestBatch,
}

impl BnEvalPolicy {
    fn label(self, graph: &Graph) -> &'static str {
        match (graph.has_batch_norm(), self) {
            (false, _) => "none",
            (true, BnEvalPolicy::ServerRunning) => "server-running-stale",
            (true, BnEvalPolicy::TestBatch) => "test-batch",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub global: ParamSet,
    /// Completed aggregations.
    pub round: usize,
    pub plan: RoundPlan,
    pub partition: LayerPartition,
    pub algo: AlgoConfig,
    pub bn: BnStats,
}

/// Knobs of a simulation that are not part of the model, data or algorithm.
#[derive(Clone, Debug)]
pub struct SimSettings {
    pub master_seed: u64,
    pub participation: f64,
    pub bytes_per_param: u64,
    pub track_masked_grad: bool,
    pub bn_eval: BnEvalPolicy,
}

/// A running federation: server, clients and the data they index into.
pub struct Simulation {
    pub graph: Graph,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub train: Dataset,
    pub test: Dataset,
    pub settings: SimSettings,
    pub step_sizes: StepSizeSeries,
    pub ledger: CostLedger,
    profile: Vec<u64>,
}

impl Simulation {
    pub fn new(
        graph: Graph,
        params: ParamSet,
        plan: RoundPlan,
        algo: AlgoConfig,
        train: Dataset,
        test: Dataset,
        shards: Vec<Vec<usize>>,
        settings: SimSettings,
    ) -> Result<Self> {
        graph.check_params(&params)?;
        let partition = params.partition();
        if plan.groups != partition.len() {
            return Err(Error::InvalidConfig(vec![format!(
                "schedule has {} groups, model has {}",
                plan.groups,
                partition.len()
            )]));
        }
        if !(settings.participation > 0.0 && settings.participation <= 1.0) {
            return Err(Error::InvalidConfig(vec![format!(
                "participation must be in (0, 1], got {}",
                settings.participation
            )]));
        }
        let clients: Vec<ClientState> = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| ClientState::new(id, shard, &graph, &params))
            .collect();
        if let Some(c) = clients.iter().find(|c| c.shard.is_empty()) {
            return Err(Error::EmptyShard(c.id));
        }
        let profile = graph.group_forward_flops();
        let bn = graph.fresh_bn_stats();
        Ok(Simulation {
            graph,
            server: ServerState {
                global: params,
                round: 0,
                plan,
                partition,
                algo,
                bn,
            },
            clients,
            train,
            test,
            settings,
            step_sizes: StepSizeSeries::default(),
            ledger: CostLedger::default(),
            profile,
        })
    }

    pub fn evaluate(&self) -> Result<f64> {
        let bn = match self.settings.bn_eval {
            BnEvalPolicy::ServerRunning => BnMode::Running(&self.server.bn),
            BnEvalPolicy::TestBatch => BnMode::Batch,
        };
        evaluate_accuracy(&self.graph, &self.server.global, bn, &self.test)
    }

    /// Trains the sampled clients on `entry`'s mask and aggregates them.
    pub fn run_round(&mut self, entry: &PlanEntry) -> Result<RoundRecord> {
        let round = entry.round;
        let mask = &entry.mask;
        let masked_grad_norm_sq = if self.settings.track_masked_grad {
            Some(masked_grad_metric(&self.graph, &self.server.global, &self.train, mask)?)
        } else {
            None
        };
        let selected = sample_clients(
            self.settings.master_seed,
            round,
            self.clients.len(),
            self.settings.participation,
        );
        let ctx = LocalContext {
            graph: &self.graph,
            data: &self.train,
            master_seed: self.settings.master_seed,
            round,
            full_round: entry.phase.is_full(),
        };
        let global = &self.server.global;
        let algo = &self.server.algo;
        let mut chosen: Vec<&mut ClientState> = self
            .clients
            .iter_mut()
            .filter(|c| selected.binary_search(&c.id).is_ok())
            .collect();
        let results: Vec<Result<ClientUpdate>> = chosen
            .par_iter_mut()
            .map(|c| local_train(c, global, mask, algo, &ctx))
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        for r in results {
            updates.push(r?);
        }
        updates.sort_by_key(|u| u.client);
        let next = aggregate(&updates, global, mask)?;

        let max_iters = updates.iter().map(|u| u.step_sizes.len()).max().unwrap_or(0);
        for k in 0..max_iters {
            let vals: Vec<f64> = updates.iter().filter_map(|u| u.step_sizes.get(k).copied()).collect();
            self.step_sizes.points.push(StepPoint {
                round,
                iteration: k + 1,
                step_size: vals.iter().sum::<f64>() / vals.len() as f64,
                clients: vals.len(),
            });
        }
        let round_points = &self.step_sizes.points[self.step_sizes.points.len() - max_iters..];
        let step_post = round_points.first().map_or(0.0, |p| p.step_size);
        let step_pre = round_points.last().map_or(0.0, |p| p.step_size);
        let mean_loss = updates
            .iter()
            .map(|u| u.losses.iter().sum::<f64>() / u.losses.len().max(1) as f64)
            .sum::<f64>()
            / updates.len() as f64;

        let bytes = comm_bytes_for_round(mask, &self.server.partition, self.settings.bytes_per_param);
        let (mut fwd, mut bwd) = (0u64, 0u64);
        for u in &updates {
            let (f, b) = flops_from_profile(&self.profile, mask, u.samples_processed);
            fwd += f;
            bwd += b;
        }
        let eval_flops = self.profile.iter().sum::<u64>() * self.test.len() as u64;
        self.ledger.record(CostEntry {
            round,
            clients: updates.len(),
            upstream_bytes_per_client: bytes,
            upstream_bytes_total: bytes * updates.len() as u64,
            forward_flops: fwd,
            backward_flops: bwd,
            eval_flops,
        });

        self.server.global = next;
        self.server.round += 1;
        let test_accuracy = self.evaluate()?;
        Ok(RoundRecord {
            round,
            phase: entry.phase,
            cycle: entry.cycle,
            groups: entry.group_names(),
            participants: selected,
            test_accuracy,
            mean_loss,
            step_post,
            step_pre,
            local_iterations: max_iters,
            comm_bytes: bytes,
            comm_bytes_total: bytes * updates.len() as u64,
            flops_fwd: fwd,
            flops_bwd: bwd,
            eval_flops,
            masked_grad_norm_sq,
            bn_eval: self.settings.bn_eval.label(&self.graph).into(),
        })
    }

    /// Runs every remaining round of the plan.
    pub fn run_all(&mut self) -> Result<Vec<RoundRecord>> {
        let entries: Vec<PlanEntry> = self.server.plan.entries[self.server.round..].to_vec();
        entries.iter().map(|e| self.run_round(e)).collect()
    }
}

/// One-round convenience: looks up `round` in the server's plan.
pub fn run_round(sim: &mut Simulation, round: usize) -> Result<RoundRecord> {
    let entry = sim.server.plan.entry(round)?.clone();
    sim.run_round(&entry)
}

/// Batch for a single sample, as the attack tools need it.
pub fn single_sample_batch(data: &Dataset, index: usize) -> Batch {
    Batch {
        features: data.features().select_rows(&[index]),
        targets: Targets::Classes(vec![data.labels()[index]]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, partition_iid, SyntheticParams};
    use crate::model_zoo::{self, ModelSpec};
    use crate::params::Slot;
    use crate::schedule::{build_schedule, ScheduleConfig};
    use crate::tensor::Tensor;

    fn group(vals: &[f64]) -> ParamGroup {
        ParamGroup {
            name: "#1".into(),
            slots: vec![Slot {
                name: "w".into(),
                value: Tensor::new(vec![vals.len()], vals.to_vec()).unwrap(),
            }],
        }
    }

    fn update(client: usize, vals: &[f64]) -> ClientUpdate {
        ClientUpdate {
            client,
            groups: vec![(0, group(vals))],
            samples: 1,
            losses: vec![],
            step_sizes: vec![],
            samples_processed: 0,
        }
    }

    #[test]
    fn aggregate_means_and_orders() {
        let global = ParamSet::new(vec![group(&[0.0, 0.0])]);
        let mask = LayerMask::all(1);
        let out = aggregate(&[update(1, &[1.0, 3.0]), update(0, &[3.0, 5.0])], &global, &mask).unwrap();
        assert_eq!(out.groups[0].slots[0].value.data(), &[2.0, 4.0]);
        let a = [update(0, &[0.1, 0.7]), update(1, &[0.2, 0.3]), update(2, &[0.3, 0.9])];
        let b = [a[2].clone(), a[0].clone(), a[1].clone()];
        assert!(aggregate(&a, &global, &mask)
            .unwrap()
            .bit_eq(&aggregate(&b, &global, &mask).unwrap()));
        let same = [update(0, &[0.1, 0.7]), update(1, &[0.1, 0.7]), update(2, &[0.1, 0.7])];
        assert_eq!(
            aggregate(&same, &global, &mask).unwrap().groups[0].slots[0].value.data(),
            &[0.1, 0.7]
        );
    }

    #[test]
    fn aggregate_rejects_bad_payloads() {
        let global = ParamSet::new(vec![group(&[0.0, 0.0])]);
        let mask = LayerMask::all(1);
        assert!(aggregate(&[update(0, &[1.0])], &global, &mask).is_err());
        let mut missing = update(0, &[1.0, 2.0]);
        missing.groups.clear();
        assert!(aggregate(&[missing], &global, &mask).is_err());
        assert!(aggregate(&[update(0, &[1.0, 2.0]), update(0, &[1.0, 2.0])], &global, &mask).is_err());
    }

    #[test]
    fn sampling_counts() {
        assert_eq!(sampled_count(0.2, 150), 30);
        assert_eq!(sampled_count(1.0, 4), 4);
        assert_eq!(sampled_count(0.01, 4), 1);
        let s = sample_clients(5, 3, 150, 0.2);
        assert_eq!(s.len(), 30);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_clients(5, 3, 150, 0.2));
        assert_ne!(s, sample_clients(5, 4, 150, 0.2));
    }

    fn toy_sim(algo: AlgoConfig, clients: usize) -> Simulation {
        let data = generate_synthetic(&SyntheticParams { n: 120, ..Default::default() }, 1).unwrap();
        let model = model_zoo::build(&ModelSpec::mlp(4, &[5], 3), 2).unwrap();
        let shards = partition_iid(&data, clients, 3).unwrap().shards;
        let plan = build_schedule(&ScheduleConfig::sequential(2, 1, 1, 2)).unwrap();
        Simulation::new(
            model.graph,
            model.params,
            plan,
            algo,
            data.clone(),
            data,
            shards,
            SimSettings {
                master_seed: 9,
                participation: 1.0,
                bytes_per_param: 4,
                track_masked_grad: false,
                bn_eval: BnEvalPolicy::ServerRunning,
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_is_a_null_round() {
        let mut algo = AlgoConfig::default();
        algo.hyper.lr = 0.0;
        algo.local_iters = Some(3);
        let mut sim = toy_sim(algo, 3);
        let before = sim.server.global.clone();
        let rec = run_round(&mut sim, 1).unwrap();
        assert!(sim.server.global.bit_eq(&before));
        assert_eq!(rec.step_post, 0.0);
        assert!(sim.step_sizes.points.iter().all(|p| p.step_size == 0.0));
        assert_eq!(sim.server.round, 1);
    }

    #[test]
    fn frozen_groups_survive_a_partial_round() {
        let mut sim = toy_sim(AlgoConfig::default(), 3);
        let before = sim.server.global.clone();
        let rec = run_round(&mut sim, 3).unwrap();
        assert_eq!(rec.groups, vec!["#2".to_string()]);
        assert!(sim.server.global.groups[0].bit_eq(&before.groups[0]));
        assert!(!sim.server.global.groups[1].bit_eq(&before.groups[1]));
        for c in &sim.clients {
            assert!(c.optim.m.groups[0].slots.iter().all(|s| s.value.data().iter().all(|&v| v == 0.0)));
        }
        assert_eq!(rec.comm_bytes, 4 * 18);
    }

    #[test]
    fn huge_proximal_weight_pins_parameters() {
        let algo = AlgoConfig {
            algorithm: Algorithm::Fedprox,
            mu: 1e9,
            optimizer: LocalOptimizer::Sgd,
            hyper: AdamHyper { lr: 1e-9, ..AdamHyper::default() },
            ..AlgoConfig::default()
        };
        let mut sim = toy_sim(algo, 2);
        let before = sim.server.global.flatten();
        run_round(&mut sim, 1).unwrap();
        let after = sim.server.global.flatten();
        let drift = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "drift {drift}");
    }

    #[test]
    fn moon_first_round_matches_fedavg() {
        let avg = AlgoConfig {
            local_iters: Some(4),
            ..AlgoConfig::default()
        };
        let moon = AlgoConfig {
            algorithm: Algorithm::Fedmoon,
            ..avg.clone()
        };
        let mut a = toy_sim(avg, 2);
        let mut b = toy_sim(moon, 2);
        let ra = run_round(&mut a, 1).unwrap();
        let rb = run_round(&mut b, 1).unwrap();
        assert!(a.server.global.bit_eq(&b.server.global));
        assert_eq!(ra.mean_loss, rb.mean_loss);
        run_round(&mut b, 2).unwrap();
    }
}
