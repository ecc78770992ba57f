//! Auxiliary differentiable terms used by the local objectives.

use crate::params::{LayerMask, ParamSet};
use crate::tensor::Tensor;

/// `(μ/2)·Σ‖w − anchor‖²` over the masked groups, with its gradient `μ·(w − anchor)`.
///
/// Groups outside the mask contribute nothing and receive a zero gradient.
pub fn l2_penalty(params: &ParamSet, anchor: &ParamSet, mask: &LayerMask, mu: f64) -> (f64, ParamSet) {
    let mut grad = params.zeros_like();
    let mut value = 0.0;
    for g in 0..params.group_count() {
        if !mask.is_set(g) {
            continue;
        }
        for (s, slot) in params.groups[g].slots.iter().enumerate() {
            let a = anchor.groups[g].slots[s].value.data();
            let out = grad.groups[g].slots[s].value.data_mut();
            for (i, w) in slot.value.data().iter().enumerate() {
                let d = w - a[i];
                value += d * d;
                out[i] = mu * d;
            }
        }
    }
    (0.5 * mu * value, grad)
}

/// Cosine similarity of two vectors and its gradient with respect to `a`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    const EPS: f64 = 1e-12;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
    let sim = dot / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - sim * x / (na * na))
        .collect();
    (sim, grad)
}

/// Model-contrastive loss averaged over rows of `z`.
///
/// Row `i` contributes `−log(e^{s⁺/τ} / (e^{s⁺/τ} + e^{s⁻/τ}))` where `s⁺` is the
/// cosine similarity to `positive[i]` and `s⁻` to `negative[i]`. Returns the
/// mean loss and its gradient with respect to `z`.
pub fn contrastive_loss(z: &Tensor, positive: &Tensor, negative: &Tensor, tau: f64) -> (f64, Tensor) {
    let rows = z.rows();
    let mut grad = Tensor::zeros(z.shape());
    let mut total = 0.0;
    let w = z.row_len();
    for r in 0..rows {
        let (sp, gp) = cosine_similarity(z.row(r), positive.row(r));
        let (sn, gn) = cosine_similarity(z.row(r), negative.row(r));
        let (lp, ln) = (sp / tau, sn / tau);
        let max = lp.max(ln);
        let lse = max + ((lp - max).exp() + (ln - max).exp()).ln();
        total += lse - lp;
        let pp = (lp - lse).exp();
        let pn = (ln - lse).exp();
        // d/dz = (pp − 1)/τ · ∂s⁺ + pn/τ · ∂s⁻
        let out = &mut grad.data_mut()[r * w..(r + 1) * w];
        for i in 0..w {
            out[i] = ((pp - 1.0) * gp[i] + pn * gn[i]) / tau / rows as f64;
        }
    }
    (total / rows as f64, grad)
}
