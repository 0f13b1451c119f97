use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::numkit::gradcheck::ParamStore;
use crate::numkit::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    TextCnn,
    LoraFormer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Selects the LoRA weight vector during aggregation.
    pub lora: bool,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, tensor: Tensor, trainable: bool, lora: bool) -> Self {
        ParamGroup {
            name: name.into(),
            tensor,
            trainable,
            lora,
        }
    }

    /// The role of the group; exactly one applies.
    pub fn role(&self) -> Role {
        match (self.trainable, self.lora) {
            (_, true) => Role::Adapter,
            (true, false) => Role::Trainable,
            (false, false) => Role::Frozen,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Frozen,
    Adapter,
    Trainable,
}

/// An ordered, uniquely named list of parameter groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    kind: ModelKind,
    groups: Vec<ParamGroup>,
}

impl ParamSet {
    pub fn new(kind: ModelKind, groups: Vec<ParamGroup>) -> Result<Self> {
        let mut seen = HashSet::new();
        for g in &groups {
            if !seen.insert(g.name.as_str()) {
                return Err(Error::Structure(format!("duplicate group `{}`", g.name)));
            }
            if g.lora && !g.trainable {
                return Err(Error::Structure(format!("adapter `{}` is frozen", g.name)));
            }
        }
        Ok(ParamSet { kind, groups })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn get(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|g| &g.tensor)
            .ok_or_else(|| Error::Structure(format!("no group named `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.groups
            .iter_mut()
            .find(|g| g.name == name)
            .map(|g| &mut g.tensor)
            .ok_or_else(|| Error::Structure(format!("no group named `{name}`")))
    }

    /// `(name, tensor)` for every trainable group, in order.
    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.groups
            .iter_mut()
            .filter(|g| g.trainable)
            .map(|g| (g.name.as_str(), &mut g.tensor))
    }

    /// Replaces every tensor, keeping names and flags. Shapes must match.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<ParamSet> {
        if tensors.len() != self.groups.len() {
            return Err(Error::Structure(format!(
                "{} tensors for {} groups",
                tensors.len(),
                self.groups.len()
            )));
        }
        let groups = self
            .groups
            .iter()
            .zip(tensors)
            .map(|(g, t)| {
                if t.shape() != g.tensor.shape() {
                    return Err(Error::Structure(format!(
                        "`{}`: shape {:?} for {:?}",
                        g.name,
                        t.shape(),
                        g.tensor.shape()
                    )));
                }
                Ok(ParamGroup {
                    tensor: t,
                    ..g.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(ParamSet {
            kind: self.kind,
            groups,
        })
    }

    /// Same kind, names, shapes and flags in the same order.
    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.kind != other.kind {
            return Err(Error::Structure(format!("{:?} vs {:?}", self.kind, other.kind)));
        }
        if self.groups.len() != other.groups.len() {
            return Err(Error::Structure(format!(
                "{} groups vs {}",
                self.groups.len(),
                other.groups.len()
            )));
        }
        for (a, b) in self.groups.iter().zip(&other.groups) {
            if a.name != b.name
                || a.tensor.shape() != b.tensor.shape()
                || a.trainable != b.trainable
                || a.lora != b.lora
            {
                return Err(Error::Structure(format!("group `{}` vs `{}`", a.name, b.name)));
            }
        }
        Ok(())
    }

    pub fn count(&self, role: Option<Role>) -> usize {
        self.groups
            .iter()
            .filter(|g| role.is_none_or(|r| g.role() == r))
            .map(|g| g.tensor.numel())
            .sum()
    }

    pub fn total_params(&self) -> usize {
        self.count(None)
    }

    /// Adapters plus trainable non-adapter groups.
    pub fn trainable_params(&self) -> usize {
        self.groups
            .iter()
            .filter(|g| g.trainable)
            .map(|g| g.tensor.numel())
            .sum()
    }

    pub fn has_adapters(&self) -> bool {
        self.groups.iter().any(|g| g.lora)
    }

    pub(crate) fn groups_mut(&mut self) -> &mut Vec<ParamGroup> {
        &mut self.groups
    }
}

impl ParamStore for ParamSet {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        ParamSet::tensor_mut(self, name).ok()
    }
}
