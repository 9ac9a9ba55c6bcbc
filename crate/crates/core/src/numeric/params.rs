use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Index of a parameter group inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub value: Tensor2,
}

/// Trainable flag per group. Covers every group of the set it was built for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask(Vec<bool>);

impl FreezeMask {
    pub fn all_trainable(n: usize) -> Self {
        FreezeMask(vec![true; n])
    }

    pub fn all_frozen(n: usize) -> Self {
        FreezeMask(vec![false; n])
    }

    pub fn from_trainable(n: usize, trainable: &[GroupId]) -> Self {
        let mut m = vec![false; n];
        for g in trainable {
            m[g.0] = true;
        }
        FreezeMask(m)
    }

    pub fn is_trainable(&self, g: GroupId) -> bool {
        self.0[g.0]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn trainable_groups(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(i, _)| GroupId(i))
    }
}

/// Named parameter groups with a freeze mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    groups: Vec<ParamGroup>,
    mask: FreezeMask,
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            groups: Vec::new(),
            mask: FreezeMask(Vec::new()),
        }
    }

    /// Appends a trainable group and returns its id.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor2) -> GroupId {
        self.groups.push(ParamGroup {
            name: name.into(),
            value,
        });
        self.mask.0.push(true);
        GroupId(self.groups.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn get(&self, g: GroupId) -> &Tensor2 {
        &self.groups[g.0].value
    }

    pub fn get_mut(&mut self, g: GroupId) -> &mut Tensor2 {
        &mut self.groups[g.0].value
    }

    pub fn name(&self, g: GroupId) -> &str {
        &self.groups[g.0].name
    }

    pub fn find(&self, name: &str) -> Option<GroupId> {
        self.groups.iter().position(|g| g.name == name).map(GroupId)
    }

    pub fn ids(&self) -> impl Iterator<Item = GroupId> {
        (0..self.groups.len()).map(GroupId)
    }

    pub fn mask(&self) -> &FreezeMask {
        &self.mask
    }

    pub fn is_trainable(&self, g: GroupId) -> bool {
        self.mask.is_trainable(g)
    }

    pub fn set_mask(&mut self, mask: FreezeMask) -> Result<()> {
        if mask.len() != self.groups.len() {
            return Err(Error::shape("freeze mask", self.groups.len(), mask.len()));
        }
        self.mask = mask;
        Ok(())
    }

    pub fn with_mask(&self, mask: FreezeMask) -> Result<ParamSet> {
        let mut p = self.clone();
        p.set_mask(mask)?;
        Ok(p)
    }

    /// Replaces the value of a group, keeping its shape.
    pub fn replace(&mut self, g: GroupId, value: Tensor2) -> Result<()> {
        let cur = &mut self.groups[g.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::shape(
                "replace",
                format!("{:?}", cur.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        *cur = value;
        Ok(())
    }

    /// `self += scale * grads` on trainable groups only.
    pub fn apply_step(&mut self, grads: &GradRecord, scale: f64) {
        for g in self.mask.clone().trainable_groups() {
            self.groups[g.0].value.add_scaled(grads.get(g), scale);
        }
    }

    pub fn num_values(&self) -> usize {
        self.groups.iter().map(|g| g.value.len()).sum()
    }

    /// Bitwise equality of the values of the given groups.
    pub fn bit_identical(&self, other: &ParamSet, groups: &[GroupId]) -> bool {
        groups.iter().all(|&g| {
            let a = self.get(g).as_slice();
            let b = other.get(g).as_slice();
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

/// Gradient arrays aligned with the groups of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRecord {
    grads: Vec<Tensor2>,
}

impl GradRecord {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradRecord {
            grads: params
                .groups()
                .iter()
                .map(|g| Tensor2::zeros(g.value.rows(), g.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, g: GroupId) -> &Tensor2 {
        &self.grads[g.0]
    }

    pub fn get_mut(&mut self, g: GroupId) -> &mut Tensor2 {
        &mut self.grads[g.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (GroupId, &Tensor2)> {
        self.grads.iter().enumerate().map(|(i, t)| (GroupId(i), t))
    }

    pub fn add_scaled(&mut self, other: &GradRecord, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_scaled(b, scale);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
    }

    /// Rescales to at most `max_norm` in global L2 norm.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }

    pub fn is_zero(&self, g: GroupId) -> bool {
        self.grads[g.0].as_slice().iter().all(|&v| v == 0.0)
    }
}
