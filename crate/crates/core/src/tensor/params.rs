use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Real, Tensor};
use crate::{Error, Result};

/// Ownership group of a parameter inside an adapted model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Pre-trained uni-modal weights (frozen after pre-training).
    Base,
    /// PET patch embedding.
    PetEmbed,
    /// Low-rank pairs and DoRA magnitudes.
    Peft,
    /// PET input skip projection and its mixing weight.
    PetSkip,
    /// Missing-modality adapter.
    Adapter,
    /// Survival head.
    Prognosis,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Base,
        ParamGroup::PetEmbed,
        ParamGroup::Peft,
        ParamGroup::PetSkip,
        ParamGroup::Adapter,
        ParamGroup::Prognosis,
    ];

    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Base => 0,
            ParamGroup::PetEmbed => 1,
            ParamGroup::Peft => 2,
            ParamGroup::PetSkip => 3,
            ParamGroup::Adapter => 4,
            ParamGroup::Prognosis => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.code() == code)
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Base => "base",
            ParamGroup::PetEmbed => "pet_embed",
            ParamGroup::Peft => "peft",
            ParamGroup::PetSkip => "pet_skip",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Prognosis => "prognosis",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<E> {
    pub name: String,
    pub value: Tensor<E>,
    pub group: ParamGroup,
    pub frozen: bool,
}

/// Ordered, named parameter collection.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E> {
    entries: Vec<Param<E>>,
    index: HashMap<String, usize>,
}

impl<E: Real> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>, group: ParamGroup) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            value,
            group,
            frozen: false,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<E>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<E>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<E>> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<E>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_frozen_where(&mut self, frozen: bool, pred: impl Fn(&Param<E>) -> bool) {
        for p in self.entries.iter_mut().filter(|p| pred(p)) {
            p.frozen = frozen;
        }
    }

    /// SHA-256 over names, shapes and bit patterns of the selected entries.
    pub fn digest(&self, pred: impl Fn(&Param<E>) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.entries.iter().filter(|p| pred(p)) {
            h.update((p.name.len() as u32).to_le_bytes());
            h.update(p.name.as_bytes());
            for &s in p.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<F: Real>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    group: p.group,
                    frozen: p.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Removes every entry of `group`, returning how many were dropped.
    pub fn remove_group(&mut self, group: ParamGroup) -> usize {
        let before = self.entries.len();
        self.entries.retain(|p| p.group != group);
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        before - self.entries.len()
    }
}
