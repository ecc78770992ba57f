//! Masked optimizer steps.
//!
//! Groups whose mask bit is clear are never written: their parameters and,
//! for Adam, their moment accumulators stay bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{LayerMask, ParamSet};

fn check_step(params: &ParamSet, grads: &ParamSet, mask: &LayerMask, lr: f64) -> Result<()> {
    params.check_conforms(grads, "gradients")?;
    mask.check_groups(params.group_count())?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    Ok(())
}

/// `w ← w − lr·g` on trainable groups only.
pub fn masked_sgd_step(params: &mut ParamSet, grads: &ParamSet, mask: &LayerMask, lr: f64) -> Result<()> {
    check_step(params, grads, mask, lr)?;
    for (g, (group, grad)) in params.groups.iter_mut().zip(&grads.groups).enumerate() {
        if !mask.is_set(g) {
            continue;
        }
        for (slot, gslot) in group.slots.iter_mut().zip(&grad.slots) {
            for (w, d) in slot.value.data_mut().iter_mut().zip(gslot.value.data()) {
                *w -= lr * d;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = vec![];
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errs.push(format!("adam.lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            errs.push(format!("adam.beta1 must be in [0, 1), got {}", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            errs.push(format!("adam.beta2 must be in [0, 1), got {}", self.beta2));
        }
        if !(self.eps > 0.0) {
            errs.push(format!("adam.eps must be > 0, got {}", self.eps));
        }
        errs
    }
}

/// First and second moment accumulators plus the shared step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        OptimState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam step on the trainable groups.
///
/// Per coordinate, in this exact order:
/// `m = β1·m + (1−β1)·g`, `v = β2·v + (1−β2)·g·g`,
/// `m̂ = m / (1 − β1^t)`, `v̂ = v / (1 − β2^t)`, `w = w − lr·m̂ / (√v̂ + ε)`,
/// where `t` is the step counter after incrementing.
pub fn masked_adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    mask: &LayerMask,
    state: &mut OptimState,
    hyper: &AdamHyper,
) -> Result<()> {
    check_step(params, grads, mask, hyper.lr)?;
    params.check_conforms(&state.m, "adam first moment")?;
    params.check_conforms(&state.v, "adam second moment")?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for g in 0..params.group_count() {
        if !mask.is_set(g) {
            continue;
        }
        let slots = params.groups[g].slots.iter_mut();
        let moments = state.m.groups[g].slots.iter_mut().zip(state.v.groups[g].slots.iter_mut());
        for ((slot, (ms, vs)), gs) in slots.zip(moments).zip(&grads.groups[g].slots) {
            let w = slot.value.data_mut();
            let m = ms.value.data_mut();
            let v = vs.value.data_mut();
            for i in 0..w.len() {
                let d = gs.value.data()[i];
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * d;
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * d * d;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamGroup, Slot};
    use crate::tensor::Tensor;

    fn scalars(values: &[f64]) -> ParamSet {
        ParamSet::new(
            values
                .iter()
                .enumerate()
                .map(|(i, &v)| ParamGroup {
                    name: format!("#{}", i + 1),
                    slots: vec![Slot {
                        name: "w".into(),
                        value: Tensor::new(vec![1], vec![v]).unwrap(),
                    }],
                })
                .collect(),
        )
    }

    #[test]
    fn sgd_respects_mask() {
        let mut w = scalars(&[0.0, 0.0]);
        let g = scalars(&[1.0, 2.0]);
        masked_sgd_step(&mut w, &g, &LayerMask::from_bits(vec![true, false]), 0.1).unwrap();
        assert_eq!(w.flatten(), vec![-0.1, 0.0]);
    }

    #[test]
    fn all_zero_mask_is_identity() {
        let before = scalars(&[0.3, -1.7, 2.0]);
        let g = scalars(&[1.0, 2.0, 3.0]);
        let mut w = before.clone();
        masked_sgd_step(&mut w, &g, &LayerMask::none(3), 0.5).unwrap();
        assert!(w.bit_eq(&before));
        let mut state = OptimState::new(&w);
        masked_adam_step(&mut w, &g, &LayerMask::none(3), &mut state, &AdamHyper::default()).unwrap();
        assert!(w.bit_eq(&before));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = scalars(&[0.5]);
        let g = scalars(&[1.0]);
        let mut state = OptimState::new(&w);
        masked_adam_step(&mut w, &g, &LayerMask::all(1), &mut state, &AdamHyper::default()).unwrap();
        assert!((w.flatten()[0] - (0.5 - 0.001)).abs() < 1e-10);
    }

    #[test]
    fn adam_frozen_group_keeps_moments() {
        let mut w = scalars(&[0.5, 0.5]);
        let g = scalars(&[1.0, 3.0]);
        let mut state = OptimState::new(&w);
        let mask = LayerMask::from_bits(vec![true, false]);
        masked_adam_step(&mut w, &g, &mask, &mut state, &AdamHyper::default()).unwrap();
        masked_adam_step(&mut w, &g, &mask, &mut state, &AdamHyper::default()).unwrap();
        assert_eq!(w.flatten()[1].to_bits(), 0.5f64.to_bits());
        assert_eq!(state.m.flatten()[1].to_bits(), 0f64.to_bits());
        assert_eq!(state.v.flatten()[1].to_bits(), 0f64.to_bits());
        assert_eq!(state.step, 2);
    }

    #[test]
    fn structure_mismatch_rejected() {
        let mut w = scalars(&[0.0, 0.0]);
        let g = scalars(&[1.0]);
        assert!(masked_sgd_step(&mut w, &g, &LayerMask::all(2), 0.1).is_err());
        let g2 = scalars(&[1.0, 1.0]);
        assert!(masked_sgd_step(&mut w, &g2, &LayerMask::all(3), 0.1).is_err());
    }
}
