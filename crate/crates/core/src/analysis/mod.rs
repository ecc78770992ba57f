//! Analysis instruments: masked gradient norms, the mask-variance ratio `k`,
//! gradient-inversion attacks and image similarity scores.

mod attack;
mod image;

pub use attack::{
    activation_maximization, dlg_attack, sample_gradient, ActivationResult, AscentConfig, AttackResult, DlgConfig,
    InputOptimizer,
};
pub use image::{psnr, ssim, PSNR_CAP_DB};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Graph};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{LayerMask, LayerPartition, ParamSet};
use crate::seed;

/// Minimum Monte-Carlo sample count accepted by the `k` estimators.
pub const MIN_K_SAMPLES: usize = 100;

/// Full-batch mean gradient over `dataset`, normalizing with batch statistics.
pub fn full_gradient(graph: &Graph, params: &ParamSet, dataset: &Dataset) -> Result<ParamSet> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    Ok(graph.evaluate_loss_and_grads(params, &dataset.full_batch())?.1)
}

/// Squared norm of the mask-filtered gradient `‖S ⊙ g‖²`.
pub fn masked_norm_sq(grads: &ParamSet, mask: &LayerMask) -> Result<f64> {
    mask.check_groups(grads.group_count())?;
    Ok(mask
        .set_indices()
        .into_iter()
        .map(|g| grads.groups[g].slots.iter().map(|s| s.value.sum_sq()).sum::<f64>())
        .sum())
}

/// `‖S ⊙ ∇f(w)‖²` with `∇f` the full-batch gradient over `dataset`.
pub fn masked_grad_metric(graph: &Graph, params: &ParamSet, dataset: &Dataset, mask: &LayerMask) -> Result<f64> {
    mask.check_groups(params.group_count())?;
    if mask.count_set() == 0 {
        return Ok(0.0);
    }
    masked_norm_sq(&full_gradient(graph, params, dataset)?, mask)
}

/// Running averages `(1/T) Σ_{t≤T} m_t` of a per-round metric series.
pub fn running_average(values: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            sum / (i + 1) as f64
        })
        .collect()
}

/// How per-group deviation norms are made comparable across groups of different sizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KNormalization {
    /// `‖S_j ⊙ d‖` as is.
    Raw,
    /// `‖S_j ⊙ d‖ / √(group size)`, a root-mean-square per parameter.
    #[default]
    PerParameter,
}

/// Which masks `k` compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KMaskFamily {
    /// One mask per layer group.
    #[default]
    Groups,
    /// `masks` disjoint masks of near-equal size over a seeded random
    /// permutation of all coordinates.
    RandomEqual { masks: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KEstimate {
    pub k_hat: f64,
    pub n_samples: usize,
    /// Which masks were compared.
    pub mask_family: String,
    pub normalization: KNormalization,
    pub group_names: Vec<String>,
    /// Monte-Carlo mean of the (normalized) deviation norm per mask.
    pub deviation_norms: Vec<f64>,
    /// The ordered pair `(numerator, denominator)` attaining `k_hat`.
    pub argmax_pair: (usize, usize),
}

/// Largest ratio over ordered pairs of per-mask mean deviation norms.
pub fn k_from_norms(norms: &[f64]) -> Result<(f64, (usize, usize))> {
    if norms.is_empty() {
        return Err(Error::InvalidArgument("empty mask family".into()));
    }
    if let Some(j) = norms.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::ZeroDeviation(j));
    }
    let mut best = (1.0, (0, 0));
    for (a, &na) in norms.iter().enumerate() {
        for (b, &nb) in norms.iter().enumerate() {
            let r = na / nb;
            if r > best.0 {
                best = (r, (a, b));
            }
        }
    }
    Ok(best)
}

/// Estimates `k` from `n_samples` draws of a deviation vector split into consecutive groups.
///
/// `sample` receives the estimator's RNG and returns one flat deviation
/// vector whose length is the sum of `group_sizes`.
pub fn estimate_k_from_samples(
    group_sizes: &[usize],
    n_samples: usize,
    normalization: KNormalization,
    seed_value: u64,
    mut sample: impl FnMut(&mut seed::Rng) -> Result<Vec<f64>>,
) -> Result<(f64, (usize, usize), Vec<f64>)> {
    if n_samples < MIN_K_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "n_samples must be >= {MIN_K_SAMPLES}, got {n_samples}"
        )));
    }
    if group_sizes.is_empty() || group_sizes.contains(&0) {
        return Err(Error::InvalidArgument("every mask must select at least one parameter".into()));
    }
    let total: usize = group_sizes.iter().sum();
    let mut rng = seed::derived_rng(seed_value, "k-estimate", 0);
    let mut sums = vec![0.0; group_sizes.len()];
    for _ in 0..n_samples {
        let d = sample(&mut rng)?;
        if d.len() != total {
            return Err(Error::Structure(format!(
                "deviation sample has {} values, groups cover {total}",
                d.len()
            )));
        }
        let mut at = 0;
        for (j, &size) in group_sizes.iter().enumerate() {
            let sq: f64 = d[at..at + size].iter().map(|v| v * v).sum();
            at += size;
            sums[j] += match normalization {
                KNormalization::Raw => sq.sqrt(),
                KNormalization::PerParameter => (sq / size as f64).sqrt(),
            };
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / n_samples as f64).collect();
    let (k, pair) = k_from_norms(&means)?;
    Ok((k, pair, means))
}

/// Monte-Carlo `k` over a mask family of `params`.
///
/// Each draw picks one example uniformly with replacement and measures
/// `‖S_j ⊙ (∇L(x|w) − ∇f(w))‖` for every mask `j`. Graphs with batch norm
/// normalize with the pooled dataset's statistics for both terms.
pub fn estimate_k(
    graph: &Graph,
    params: &ParamSet,
    dataset: &Dataset,
    n_samples: usize,
    normalization: KNormalization,
    family: KMaskFamily,
    seed_value: u64,
) -> Result<KEstimate> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let partition = LayerPartition::from_params(params);
    let (group_sizes, _) = partition.group_param_counts();
    let total: usize = group_sizes.iter().sum();
    // `order[i]` is the flat coordinate placed at position `i` before splitting into masks.
    let (sizes, order, names, label) = match family {
        KMaskFamily::Groups => (
            group_sizes.clone(),
            None,
            partition.names(),
            format!("one-hot group masks over {} groups", group_sizes.len()),
        ),
        KMaskFamily::RandomEqual { masks } => {
            if masks == 0 || masks > total {
                return Err(Error::InvalidArgument(format!(
                    "random mask count must be in 1..={total}, got {masks}"
                )));
            }
            let mut order: Vec<usize> = (0..total).collect();
            order.shuffle(&mut seed::derived_rng(seed_value, "k-masks", 0));
            let sizes = (0..masks).map(|j| total / masks + usize::from(j < total % masks)).collect();
            let names = (1..=masks).map(|j| format!("random-{j}")).collect();
            (sizes, Some(order), names, format!("{masks} random equal-size masks"))
        }
    };
    let full = dataset.full_batch();
    let pass = graph.forward(params, &full.features, BnMode::Batch)?;
    let stats = pass.batch_stats();
    let mode = if graph.has_batch_norm() {
        BnMode::Running(&stats)
    } else {
        BnMode::Batch
    };
    let mean_grad = graph.evaluate(params, &full, mode)?.grads.flatten();
    let n = dataset.len();
    let (k_hat, argmax_pair, deviation_norms) =
        estimate_k_from_samples(&sizes, n_samples, normalization, seed_value, |rng| {
            let i = rng.random_range(0..n);
            let g = graph.evaluate(params, &dataset.batch(&[i]), mode)?.grads.flatten();
            let d: Vec<f64> = g.iter().zip(&mean_grad).map(|(a, b)| a - b).collect();
            Ok(match &order {
                Some(order) => order.iter().map(|&c| d[c]).collect(),
                None => d,
            })
        })?;
    Ok(KEstimate {
        k_hat,
        n_samples,
        mask_family: label,
        normalization,
        group_names: names,
        deviation_norms,
        argmax_pair,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticParams};
    use crate::model_zoo::{self, ModelSpec};

    fn toy() -> (model_zoo::Model, Dataset) {
        let data = generate_synthetic(&SyntheticParams::default(), 3).unwrap();
        (model_zoo::build(&ModelSpec::mlp(4, &[6, 5], 3), 1).unwrap(), data)
    }

    #[test]
    fn metric_annihilation_and_identity() {
        let (m, d) = toy();
        let none = LayerMask::none(3);
        assert_eq!(masked_grad_metric(&m.graph, &m.params, &d, &none).unwrap(), 0.0);
        let g = full_gradient(&m.graph, &m.params, &d).unwrap();
        let all = masked_grad_metric(&m.graph, &m.params, &d, &LayerMask::all(3)).unwrap();
        assert_eq!(all, masked_norm_sq(&g, &LayerMask::all(3)).unwrap());
        let parts: f64 = (0..3)
            .map(|j| masked_grad_metric(&m.graph, &m.params, &d, &LayerMask::one_hot(3, j)).unwrap())
            .sum();
        assert!((parts - all).abs() <= 1e-12 * all.max(1.0));
    }

    #[test]
    fn k_single_mask_is_one() {
        let (k, pair, _) =
            estimate_k_from_samples(&[3], 100, KNormalization::Raw, 0, |rng| {
                Ok((0..3).map(|_| rng.random::<f64>() + 0.1).collect())
            })
            .unwrap();
        assert_eq!(k, 1.0);
        assert_eq!(pair, (0, 0));
    }

    #[test]
    fn k_floor_and_zero_deviation() {
        let err = estimate_k_from_samples(&[1], 99, KNormalization::Raw, 0, |_| Ok(vec![1.0])).unwrap_err();
        assert!(err.to_string().contains(">= 100"));
        let err = estimate_k_from_samples(&[1, 1], 100, KNormalization::Raw, 0, |_| Ok(vec![1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::ZeroDeviation(1)));
        assert!(err.to_string().contains("zero deviation norm"));
    }

    #[test]
    fn k_is_relabeling_invariant() {
        let (k1, _) = k_from_norms(&[1.0, 2.0, 1.5]).unwrap();
        let (k2, _) = k_from_norms(&[1.5, 1.0, 2.0]).unwrap();
        assert_eq!(k1, k2);
        assert_eq!(k1, 2.0);
    }

    #[test]
    fn k_on_random_mlp_is_finite_and_at_least_one() {
        let (m, d) = toy();
        let est = estimate_k(&m.graph, &m.params, &d, 200, KNormalization::PerParameter, KMaskFamily::Groups, 5).unwrap();
        assert!(est.k_hat >= 1.0 && est.k_hat.is_finite());
        assert_eq!(est.deviation_norms.len(), 3);
    }

    #[test]
    fn running_average_matches_definition() {
        assert_eq!(running_average(&[2.0, 4.0, 0.0]), vec![2.0, 3.0, 2.0]);
    }

    #[test]
    fn random_equal_masks_cover_all_coordinates() {
        let (m, d) = toy();
        let est = estimate_k(&m.graph, &m.params, &d, 200, KNormalization::Raw, KMaskFamily::RandomEqual { masks: 4 }, 5)
            .unwrap();
        assert_eq!(est.deviation_norms.len(), 4);
        assert_eq!(est.group_names[3], "random-4");
        assert!(est.k_hat >= 1.0 && est.k_hat.is_finite());
        let bad = estimate_k(&m.graph, &m.params, &d, 200, KNormalization::Raw, KMaskFamily::RandomEqual { masks: 0 }, 5);
        assert!(bad.is_err());
    }
}
