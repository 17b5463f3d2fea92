use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Parameter group. Ordering is the canonical serialization order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupId {
    /// Feature extractor.
    Shared,
    /// Current task head.
    NewHead,
    /// Auxiliary coarse-label head of the dual-head variant.
    AuxHead,
    /// Knowledge-preserving head, numbered from 1.
    OldHead(usize),
    /// Approximate inverse of the head.
    Inverse,
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::Shared => f.write_str("shared"),
            GroupId::NewHead => f.write_str("new_head"),
            GroupId::AuxHead => f.write_str("aux_head"),
            GroupId::OldHead(i) => write!(f, "old_head_{i}"),
            GroupId::Inverse => f.write_str("inverse"),
        }
    }
}

impl FromStr for GroupId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(GroupId::Shared),
            "new_head" => Ok(GroupId::NewHead),
            "aux_head" => Ok(GroupId::AuxHead),
            "inverse" => Ok(GroupId::Inverse),
            _ => s
                .strip_prefix("old_head_")
                .and_then(|i| i.parse().ok())
                .filter(|&i| i >= 1)
                .map(GroupId::OldHead)
                .ok_or_else(|| Error::Format(format!("unknown parameter group `{s}`"))),
        }
    }
}

impl Serialize for GroupId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroupId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: GroupId,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named parameter groups with per-group frozen flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    groups: BTreeMap<GroupId, Vec<Param<T>>>,
    frozen: BTreeSet<GroupId>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { groups: BTreeMap::new(), frozen: BTreeSet::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_group(&mut self, id: GroupId, params: Vec<Param<T>>) -> Result<()> {
        let mut names = BTreeSet::new();
        if !params.iter().all(|p| names.insert(p.name.as_str())) {
            return Err(Error::Validation(format!("duplicate parameter name in group {id}")));
        }
        self.groups.insert(id, params);
        Ok(())
    }

    pub fn remove_group(&mut self, id: GroupId) -> Option<Vec<Param<T>>> {
        self.frozen.remove(&id);
        self.groups.remove(&id)
    }

    pub fn has_group(&self, id: GroupId) -> bool {
        self.groups.contains_key(&id)
    }

    pub fn group(&self, id: GroupId) -> Result<&[Param<T>]> {
        self.groups.get(&id).map(Vec::as_slice).ok_or_else(|| Error::MissingGroup(id.to_string()))
    }

    pub fn group_mut(&mut self, id: GroupId) -> Result<&mut Vec<Param<T>>> {
        self.groups.get_mut(&id).ok_or_else(|| Error::MissingGroup(id.to_string()))
    }

    pub fn group_ids(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.groups.keys().copied()
    }

    pub fn freeze(&mut self, id: GroupId) -> Result<()> {
        if !self.has_group(id) {
            return Err(Error::MissingGroup(id.to_string()));
        }
        self.frozen.insert(id);
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, id: GroupId) -> bool {
        self.frozen.contains(&id)
    }

    pub fn frozen(&self) -> &BTreeSet<GroupId> {
        &self.frozen
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &Param<T>)> {
        self.groups.iter().flat_map(|(&group, ps)| {
            ps.iter().enumerate().map(move |(index, p)| (ParamKey { group, index }, p))
        })
    }

    pub fn get(&self, key: ParamKey) -> Result<&Param<T>> {
        self.group(key.group)?
            .get(key.index)
            .ok_or_else(|| Error::MissingGroup(format!("{}[{}]", key.group, key.index)))
    }

    pub fn num_values(&self) -> usize {
        self.iter().map(|(_, p)| p.tensor.len()).sum()
    }

    /// Copies group `src` of `from` into group `dst` of `self`.
    pub fn copy_group_from(&mut self, from: &ParamSet<T>, src: GroupId, dst: GroupId) -> Result<()> {
        let mut params = from.group(src)?.to_vec();
        params.iter_mut().for_each(|p| p.tensor.grad = None);
        self.insert_group(dst, params)
    }

    pub fn clear_grads(&mut self) {
        self.groups.values_mut().flatten().for_each(|p| p.tensor.grad = None);
    }

    /// Registers every parameter on `tape`; frozen groups become constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<ParamVars> {
        self.bind_only(tape, |_| true)
    }

    /// Like [`bind`](Self::bind) but only groups accepted by `trainable`
    /// (and not frozen) require gradients.
    pub fn bind_only(&self, tape: &mut Tape<T>, trainable: impl Fn(GroupId) -> bool) -> Result<ParamVars> {
        let mut vars = BTreeMap::new();
        for (key, p) in self.iter() {
            let rg = trainable(key.group) && !self.is_frozen(key.group);
            vars.insert(key, tape.leaf(&p.tensor, rg)?);
        }
        Ok(ParamVars { vars })
    }

    /// Adds tape gradients into the grad slots of trainable parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &ParamVars) {
        for (&key, &var) in &vars.vars {
            if self.is_frozen(key.group) {
                continue;
            }
            let Some(g) = tape.grad(var) else { continue };
            let Some(p) = self.groups.get_mut(&key.group).and_then(|ps| ps.get_mut(key.index)) else {
                continue;
            };
            match &mut p.tensor.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }

    /// Snapshot of the listed groups.
    pub fn subset(&self, groups: &[GroupId]) -> Result<ParamSubset<T>> {
        let mut entries = Vec::new();
        for &g in groups {
            for (index, p) in self.group(g)?.iter().enumerate() {
                let mut t = p.tensor.clone();
                t.grad = None;
                entries.push((ParamKey { group: g, index }, t));
            }
        }
        Ok(ParamSubset { entries })
    }

    /// Checks that `other` carries the same groups with identical shapes.
    pub fn check_same_layout(&self, other: &ParamSet<T>, groups: &[GroupId]) -> Result<()> {
        for &g in groups {
            let (a, b) = (self.group(g)?, other.group(g)?);
            let same = a.len() == b.len()
                && a.iter().zip(b).all(|(p, q)| p.name == q.name && p.tensor.shape() == q.tensor.shape());
            if !same {
                return Err(Error::shape("restore", format!("group {g} layout differs")));
            }
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<ParamKey, Var>,
}

impl ParamVars {
    /// Handles for parameters registered on a tape by other means.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (ParamKey, Var)>) -> Self {
        ParamVars { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, group: GroupId, index: usize) -> Result<Var> {
        self.vars
            .get(&ParamKey { group, index })
            .copied()
            .ok_or_else(|| Error::MissingGroup(format!("{group}[{index}]")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, Var)> + '_ {
        self.vars.iter().map(|(&k, &v)| (k, v))
    }
}

/// Ordered copy of selected parameters (anchors and Fisher diagonals).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSubset<T> {
    pub entries: Vec<(ParamKey, Tensor<T>)>,
}

impl<T: Real> ParamSubset<T> {
    pub fn zeros_like(&self) -> Self {
        ParamSubset {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (*k, Tensor::zeros(t.shape().to_vec()).expect("valid shape")))
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn aligned_with(&self, other: &ParamSubset<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((k, a), (j, b))| k == j && a.shape() == b.shape())
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.entries.iter().map(|(k, _)| *k)
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: BTreeMap<ParamKey, Vec<T>>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        SgdMomentum { lr, momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Updates every trainable parameter and clears its gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        let frozen = params.frozen.clone();
        for (&group, ps) in params.groups.iter_mut() {
            if frozen.contains(&group) {
                continue;
            }
            for (index, p) in ps.iter_mut().enumerate() {
                let grad = p
                    .tensor
                    .grad
                    .take()
                    .ok_or_else(|| Error::MissingGradient(format!("{group}/{}", p.name)))?;
                let v = self
                    .velocity
                    .entry(ParamKey { group, index })
                    .or_insert_with(|| vec![T::zero(); grad.len()]);
                for ((theta, vel), g) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                    *vel = self.momentum * *vel + (g + self.weight_decay * *theta);
                    *theta -= self.lr * *vel;
                }
            }
        }
        Ok(())
    }
}
