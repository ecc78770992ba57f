use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::image::psnr;
use crate::autodiff::{Batch, BnMode, BnStats, Graph, Targets};
use crate::error::{Error, Result};
use crate::params::{LayerMask, ParamSet};
use crate::seed;
use crate::tensor::Tensor;

const MAX_RESTARTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DlgConfig {
    pub iters: usize,
    pub step: f64,
    pub seed: u64,
    /// Parameter-space perturbation size for the finite-difference
    /// Hessian-vector product.
    pub fd_eps: f64,
    /// Box the reconstruction is projected onto after every step.
    pub clamp: Option<(f64, f64)>,
    pub optimizer: InputOptimizer,
}

/// Update rule for the reconstruction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputOptimizer {
    /// `x ← x − step·∇D`.
    #[default]
    Gd,
    /// Adam with `lr = step` and the usual constants.
    Adam,
}

impl Default for DlgConfig {
    fn default() -> Self {
        DlgConfig {
            iters: 300,
            step: 0.1,
            seed: 0,
            fd_eps: 1e-4,
            clamp: Some((0.0, 1.0)),
            optimizer: InputOptimizer::Gd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    /// Best iterate, shaped like one sample.
    pub reconstruction: Tensor,
    /// Gradient-matching objective at the best iterate.
    pub final_loss: f64,
    /// Objective at every iterate of the final attempt, iteration 0 included.
    pub loss_trace: Vec<f64>,
    /// Best-so-far objective after every iterate.
    pub best_trace: Vec<f64>,
    pub psnr_db: Option<f64>,
    /// PSNR of the random starting point.
    pub initial_psnr_db: Option<f64>,
    pub restarts: usize,
}

fn default_bn(graph: &Graph) -> Option<BnStats> {
    graph.has_batch_norm().then(|| graph.fresh_bn_stats())
}

fn mode(stats: &Option<BnStats>) -> BnMode<'_> {
    match stats {
        Some(s) => BnMode::Running(s),
        None => BnMode::Batch,
    }
}

fn random_input(graph: &Graph, rng: &mut seed::Rng) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(graph.input_shape());
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect()).expect("shape")
}

fn project(x: &mut Tensor, clamp: Option<(f64, f64)>) {
    if let Some((lo, hi)) = clamp {
        for v in x.data_mut() {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Parameter gradient of one sample as a client would transmit it, using the
/// same batch-norm handling as [`dlg_attack`].
pub fn sample_gradient(graph: &Graph, params: &ParamSet, features: &Tensor, targets: &Targets) -> Result<ParamSet> {
    let bn = default_bn(graph);
    let batch = Batch {
        features: features.clone(),
        targets: targets.clone(),
    };
    Ok(graph.evaluate(params, &batch, mode(&bn))?.grads)
}

/// Gradient-matching objective and its input gradient.
struct Matcher<'a> {
    graph: &'a Graph,
    params: &'a ParamSet,
    target: &'a ParamSet,
    groups: Vec<usize>,
    targets: &'a Targets,
    bn: Option<BnStats>,
    fd_eps: f64,
}

impl Matcher<'_> {
    fn batch(&self, x: &Tensor) -> Batch {
        Batch {
            features: x.clone(),
            targets: self.targets.clone(),
        }
    }

    /// Objective value and the residual `∇_w L(x) − g` on the matched groups.
    fn objective(&self, x: &Tensor) -> Result<(f64, ParamSet)> {
        let ev = self.graph.evaluate(self.params, &self.batch(x), mode(&self.bn))?;
        let mut residual = self.params.zeros_like();
        let mut d = 0.0;
        for &g in &self.groups {
            for (s, slot) in residual.groups[g].slots.iter_mut().enumerate() {
                let got = ev.grads.groups[g].slots[s].value.data();
                let want = self.target.groups[g].slots[s].value.data();
                for ((r, a), b) in slot.value.data_mut().iter_mut().zip(got).zip(want) {
                    *r = a - b;
                    d += *r * *r;
                }
            }
        }
        Ok((d, residual))
    }

    /// `∇_x D = 2·∇_x⟨∇_w L(x, w), r⟩`, by a central difference of input
    /// gradients at `w ± h·r`.
    fn input_gradient(&self, x: &Tensor, residual: &ParamSet) -> Result<Tensor> {
        let norm = residual.sum_sq().sqrt();
        if norm == 0.0 {
            return Ok(Tensor::zeros(x.shape()));
        }
        let h = self.fd_eps / norm;
        let shifted = |sign: f64| -> Result<Tensor> {
            let mut w = self.params.clone();
            for &g in &self.groups {
                for (s, slot) in w.groups[g].slots.iter_mut().enumerate() {
                    let r = residual.groups[g].slots[s].value.data();
                    for (v, d) in slot.value.data_mut().iter_mut().zip(r) {
                        *v += sign * h * d;
                    }
                }
            }
            Ok(self.graph.evaluate(&w, &self.batch(x), mode(&self.bn))?.input_grad)
        };
        let plus = shifted(1.0)?;
        let minus = shifted(-1.0)?;
        let scale = 2.0 / (2.0 * h);
        let data = plus
            .data()
            .iter()
            .zip(minus.data())
            .map(|(p, m)| (p - m) * scale)
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Reconstructs one input from (possibly partial) parameter gradients.
///
/// Minimizes `Σ_{groups in mask} ‖∇_w L(x̂|w) − g‖²` over `x̂` by plain
/// gradient descent with a fixed step, starting from a seeded uniform draw
/// on `[0, 1]`, and returns the best iterate. A non-finite objective restarts
/// from a fresh draw, at most three times. Batch-norm graphs normalize with
/// fresh running statistics.
pub fn dlg_attack(
    graph: &Graph,
    params: &ParamSet,
    target: &ParamSet,
    groups: &LayerMask,
    targets: &Targets,
    cfg: &DlgConfig,
    truth: Option<&Tensor>,
) -> Result<AttackResult> {
    params.check_conforms(target, "target gradients")?;
    groups.check_groups(params.group_count())?;
    if groups.count_set() == 0 {
        return Err(Error::InvalidArgument("attack needs at least one gradient group".into()));
    }
    if targets.len() != 1 {
        return Err(Error::InvalidArgument("attack reconstructs exactly one sample".into()));
    }
    if !(cfg.step.is_finite() && cfg.fd_eps > 0.0) {
        return Err(Error::InvalidArgument("attack step must be finite and fd_eps > 0".into()));
    }
    let matcher = Matcher {
        graph,
        params,
        target,
        groups: groups.set_indices(),
        targets,
        bn: default_bn(graph),
        fd_eps: cfg.fd_eps,
    };
    let sample_of = |x: &Tensor| x.clone().reshape(graph.input_shape().to_vec());
    for attempt in 0..=MAX_RESTARTS {
        let mut rng = seed::derived_rng(cfg.seed, "dlg-init", attempt as u64);
        let mut x = random_input(graph, &mut rng);
        let start = sample_of(&x)?;
        let mut best = (f64::INFINITY, x.clone());
        let mut trace = Vec::with_capacity(cfg.iters + 1);
        let mut best_trace = Vec::with_capacity(cfg.iters + 1);
        let mut failed = false;
        let (mut m, mut v) = (vec![0.0; x.len()], vec![0.0; x.len()]);
        for it in 0..=cfg.iters {
            let (d, residual) = match matcher.objective(&x) {
                Ok(v) if v.0.is_finite() => v,
                Ok(_) => {
                    failed = true;
                    break;
                }
                Err(e) if e.is_numeric() => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            trace.push(d);
            if d < best.0 {
                best = (d, x.clone());
            }
            best_trace.push(best.0);
            if it == cfg.iters || d == 0.0 {
                break;
            }
            let grad = matcher.input_gradient(&x, &residual)?;
            if !grad.all_finite() {
                failed = true;
                break;
            }
            match cfg.optimizer {
                InputOptimizer::Gd => {
                    for (xi, g) in x.data_mut().iter_mut().zip(grad.data()) {
                        *xi -= cfg.step * g;
                    }
                }
                InputOptimizer::Adam => {
                    let t = (it + 1) as i32;
                    let (b1, b2) = (0.9f64, 0.999f64);
                    let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                    for (i, (xi, g)) in x.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        *xi -= cfg.step * (m[i] / bc1) / ((v[i] / bc2).sqrt() + 1e-8);
                    }
                }
            }
            project(&mut x, cfg.clamp);
        }
        if failed {
            continue;
        }
        let reconstruction = sample_of(&best.1)?;
        let (psnr_db, initial_psnr_db) = match truth {
            Some(t) => (Some(psnr(t, &reconstruction)?), Some(psnr(t, &start)?)),
            None => (None, None),
        };
        return Ok(AttackResult {
            reconstruction,
            final_loss: best.0,
            loss_trace: trace,
            best_trace,
            psnr_db,
            initial_psnr_db,
            restarts: attempt,
        });
    }
    Err(Error::NonFinite {
        node: format!("attack objective after {MAX_RESTARTS} restarts"),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub iters: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig {
            iters: 200,
            step: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationResult {
    /// Best input found, shaped like one sample, values in `[0, 1]`.
    pub input: Tensor,
    pub objective: f64,
    /// Best-so-far objective after every iterate.
    pub best_trace: Vec<f64>,
}

/// Projected gradient ascent on the mean activation of one channel of a
/// group's output, with the input kept in `[0, 1]`.
pub fn activation_maximization(
    graph: &Graph,
    params: &ParamSet,
    target: (usize, usize),
    cfg: &AscentConfig,
) -> Result<ActivationResult> {
    let (group, channel) = target;
    let node = graph
        .group_output(group)
        .ok_or_else(|| Error::InvalidArgument(format!("no layer group with index {group}")))?;
    let shape = graph.nodes()[node].shape.clone();
    let channels = shape.first().copied().unwrap_or(1);
    if channel >= channels {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} out of range: group #{} output has {channels} channels",
            group + 1
        )));
    }
    let per_channel: usize = shape.iter().skip(1).product();
    let mut seed_shape = vec![1];
    seed_shape.extend(&shape);
    let mut seed_t = Tensor::zeros(&seed_shape);
    for v in &mut seed_t.data_mut()[channel * per_channel..(channel + 1) * per_channel] {
        *v = 1.0 / per_channel as f64;
    }
    let bn = default_bn(graph);
    let mut rng = seed::derived_rng(cfg.seed, "activation-init", 0);
    let mut x = random_input(graph, &mut rng);
    let mut best = (f64::NEG_INFINITY, x.clone());
    let mut best_trace = Vec::with_capacity(cfg.iters + 1);
    for it in 0..=cfg.iters {
        let pass = graph.forward(params, &x, mode(&bn))?;
        let value: f64 = pass.values[node].data()[channel * per_channel..(channel + 1) * per_channel]
            .iter()
            .sum::<f64>()
            / per_channel as f64;
        if value > best.0 {
            best = (value, x.clone());
        }
        best_trace.push(best.0);
        if it == cfg.iters {
            break;
        }
        let (_, dx) = graph.backward(params, &pass, vec![(node, seed_t.clone())])?;
        for (v, g) in x.data_mut().iter_mut().zip(dx.data()) {
            *v += cfg.step * g;
        }
        project(&mut x, Some((0.0, 1.0)));
    }
    Ok(ActivationResult {
        input: best.1.clone().reshape(graph.input_shape().to_vec())?,
        objective: best.0,
        best_trace,
    })
}
