//! Grouped parameter storage and the per-group trainability mask.
//!
//! A [`ParamSet`] is an ordered list of named layer groups (`#1` … `#M`),
//! each holding one or more named slots. Gradients and optimizer moments use
//! the same type so that every masked operation can walk the three sets in
//! lockstep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Address of a parameter slot: group index, then slot index inside the group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotId {
    pub group: usize,
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub slots: Vec<Slot>,
}

impl ParamGroup {
    pub fn param_count(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Slot values concatenated in slot order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for s in &self.slots {
            out.extend_from_slice(s.value.data());
        }
        out
    }

    pub fn bit_eq(&self, other: &ParamGroup) -> bool {
        self.name == other.name
            && self.slots.len() == other.slots.len()
            && self
                .slots
                .iter()
                .zip(&other.slots)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub groups: Vec<ParamGroup>,
}

impl ParamSet {
    pub fn new(groups: Vec<ParamGroup>) -> Self {
        ParamSet { groups }
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(ParamGroup::param_count).sum()
    }

    pub fn get(&self, id: SlotId) -> &Tensor {
        &self.groups[id.group].slots[id.slot].value
    }

    pub fn get_mut(&mut self, id: SlotId) -> &mut Tensor {
        &mut self.groups[id.group].slots[id.slot].value
    }

    pub fn slot_ids(&self) -> impl Iterator<Item = SlotId> + '_ {
        self.groups.iter().enumerate().flat_map(|(g, grp)| {
            (0..grp.slots.len()).map(move |s| SlotId { group: g, slot: s })
        })
    }

    /// Same structure, every value zero.
    pub fn zeros_like(&self) -> ParamSet {
        self.map(|_| 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup {
                    name: g.name.clone(),
                    slots: g
                        .slots
                        .iter()
                        .map(|s| Slot {
                            name: s.name.clone(),
                            value: s.value.map(&f),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Errors unless `other` has the same groups, slot names and shapes.
    pub fn check_conforms(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.groups.len() != other.groups.len() {
            return Err(Error::Structure(format!(
                "{what}: {} groups, expected {}",
                other.groups.len(),
                self.groups.len()
            )));
        }
        for (a, b) in self.groups.iter().zip(&other.groups) {
            if a.slots.len() != b.slots.len() {
                return Err(Error::Structure(format!(
                    "{what}: group {} has {} slots, expected {}",
                    a.name,
                    b.slots.len(),
                    a.slots.len()
                )));
            }
            for (sa, sb) in a.slots.iter().zip(&b.slots) {
                if sa.value.shape() != sb.value.shape() {
                    return Err(Error::shape(
                        format!("{what}: {}/{}", a.name, sa.name),
                        sa.value.shape(),
                        sb.value.shape(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// All values concatenated in group then slot order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for g in &self.groups {
            for s in &g.slots {
                out.extend_from_slice(s.value.data());
            }
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) against this set's structure.
    pub fn unflatten_like(&self, values: &[f64]) -> Result<ParamSet> {
        if values.len() != self.param_count() {
            return Err(Error::Structure(format!(
                "flat vector of {} values for a set of {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut out = self.clone();
        let mut at = 0;
        for g in &mut out.groups {
            for s in &mut g.slots {
                let n = s.value.len();
                s.value.data_mut().copy_from_slice(&values[at..at + n]);
                at += n;
            }
        }
        Ok(out)
    }

    pub fn sum_sq(&self) -> f64 {
        self.groups
            .iter()
            .flat_map(|g| &g.slots)
            .map(|s| s.value.sum_sq())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.groups
            .iter()
            .flat_map(|g| &g.slots)
            .all(|s| s.value.all_finite())
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| a.bit_eq(b))
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn partition(&self) -> LayerPartition {
        LayerPartition::from_params(self)
    }
}

/// Binary per-group selection: `true` marks a trainable group.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerMask(Vec<bool>);

impl LayerMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        LayerMask(bits)
    }

    pub fn all(groups: usize) -> Self {
        LayerMask(vec![true; groups])
    }

    pub fn none(groups: usize) -> Self {
        LayerMask(vec![false; groups])
    }

    pub fn one_hot(groups: usize, index: usize) -> Self {
        let mut bits = vec![false; groups];
        bits[index] = true;
        LayerMask(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_set(&self, group: usize) -> bool {
        self.0[group]
    }

    pub fn count_set(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn is_full(&self) -> bool {
        self.0.iter().all(|b| *b)
    }

    pub fn set_indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
            .collect()
    }

    /// Shallowest trainable group, if any.
    pub fn first_set(&self) -> Option<usize> {
        self.0.iter().position(|b| *b)
    }

    pub fn check_groups(&self, groups: usize) -> Result<()> {
        if self.0.len() != groups {
            return Err(Error::Structure(format!(
                "mask has {} bits for {groups} groups",
                self.0.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionGroup {
    pub name: String,
    pub slots: Vec<SlotId>,
    pub slot_names: Vec<String>,
    pub param_count: usize,
}

/// Ordered, depth-sorted layer groups `#1` … `#M` with their slot membership.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub groups: Vec<PartitionGroup>,
}

impl LayerPartition {
    pub fn from_params(params: &ParamSet) -> Self {
        LayerPartition {
            groups: params
                .groups
                .iter()
                .enumerate()
                .map(|(g, grp)| PartitionGroup {
                    name: grp.name.clone(),
                    slots: (0..grp.slots.len())
                        .map(|s| SlotId { group: g, slot: s })
                        .collect(),
                    slot_names: grp.slots.iter().map(|s| s.name.clone()).collect(),
                    param_count: grp.param_count(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Per-group parameter counts and their total.
    pub fn group_param_counts(&self) -> (Vec<usize>, usize) {
        let counts: Vec<usize> = self.groups.iter().map(|g| g.param_count).collect();
        let total = counts.iter().sum();
        (counts, total)
    }

    /// Checks that the groups form a set partition of `params`' slots.
    pub fn check_covers(&self, params: &ParamSet) -> Result<()> {
        let mut seen: Vec<SlotId> = self.groups.iter().flat_map(|g| g.slots.clone()).collect();
        let n = seen.len();
        seen.sort();
        seen.dedup();
        if seen.len() != n {
            return Err(Error::Structure("partition groups overlap".into()));
        }
        let all: Vec<SlotId> = params.slot_ids().collect();
        if seen != all {
            return Err(Error::Structure(
                "partition does not cover the parameter slots exactly".into(),
            ));
        }
        if self.groups.iter().any(|g| g.param_count == 0) {
            return Err(Error::Structure("partition has an empty group".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ParamSet {
        ParamSet::new(vec![
            ParamGroup {
                name: "#1".into(),
                slots: vec![Slot {
                    name: "w".into(),
                    value: Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(),
                }],
            },
            ParamGroup {
                name: "#2".into(),
                slots: vec![
                    Slot {
                        name: "w".into(),
                        value: Tensor::new(vec![1], vec![3.0]).unwrap(),
                    },
                    Slot {
                        name: "b".into(),
                        value: Tensor::new(vec![1], vec![4.0]).unwrap(),
                    },
                ],
            },
        ])
    }

    #[test]
    fn flatten_roundtrip() {
        let p = toy();
        assert_eq!(p.flatten(), vec![1.0, 2.0, 3.0, 4.0]);
        let q = p.unflatten_like(&[5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(q.get(SlotId { group: 1, slot: 1 }).data(), &[8.0]);
        assert!(p.unflatten_like(&[1.0]).is_err());
    }

    #[test]
    fn partition_covers() {
        let p = toy();
        let part = p.partition();
        part.check_covers(&p).unwrap();
        assert_eq!(part.group_param_counts(), (vec![2, 2], 4));
        let mut bad = part.clone();
        bad.groups[1].slots.pop();
        assert!(bad.check_covers(&p).is_err());
    }

    #[test]
    fn mask_helpers() {
        let m = LayerMask::one_hot(4, 2);
        assert_eq!(m.set_indices(), vec![2]);
        assert_eq!(m.first_set(), Some(2));
        assert!(!m.is_full());
        assert!(LayerMask::all(3).is_full());
        assert!(m.check_groups(3).is_err());
    }
}
