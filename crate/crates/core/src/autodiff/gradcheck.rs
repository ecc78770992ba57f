use crate::autodiff::graph::{Batch, BnMode, Graph};
use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Per-group maximum of `|analytic − central| / max(1, |central|)`.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub per_group: Vec<f64>,
}

/// Compares reverse-mode gradients against central differences, parameter by parameter.
pub fn finite_difference_check(graph: &Graph, params: &ParamSet, batch: &Batch, eps: f64) -> Result<GradCheck> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let (_, analytic) = graph.evaluate_loss_and_grads(params, batch)?;
    let mut probe = params.clone();
    let mut per_group = vec![0.0f64; params.group_count()];
    for id in params.slot_ids().collect::<Vec<_>>() {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = graph.loss(&probe, batch, BnMode::Batch)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = graph.loss(&probe, batch, BnMode::Batch)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let central = (up - down) / (2.0 * eps);
            let err = (analytic.get(id).data()[i] - central).abs() / central.abs().max(1.0);
            per_group[id.group] = per_group[id.group].max(err);
        }
    }
    Ok(GradCheck {
        max_rel_error: per_group.iter().copied().fold(0.0, f64::max),
        per_group,
    })
}
