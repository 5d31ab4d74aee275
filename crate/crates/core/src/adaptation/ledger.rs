use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AdaptationConfig;
use crate::backbone::{Architecture, ModelConfig, Stem};
use crate::data::Modality;
use crate::tensor::{ParamGroup, ParamStore, Real};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub name: String,
    pub numel: usize,
    pub group: ParamGroup,
    pub frozen: bool,
}

/// Every parameter of a model (or model pair) with its group and freeze flag.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLedger {
    pub entries: Vec<LedgerEntry>,
    /// Size of the uni-modal model the ledger is compared against.
    pub base_total: usize,
}

impl ParamLedger {
    pub fn from_store<E: Real>(store: &ParamStore<E>) -> Self {
        let entries: Vec<LedgerEntry> = store
            .iter()
            .map(|p| LedgerEntry {
                name: p.name.clone(),
                numel: p.value.len(),
                group: p.group,
                frozen: p.frozen,
            })
            .collect();
        let base_total = entries.iter().filter(|e| e.group == ParamGroup::Base).map(|e| e.numel).sum();
        ParamLedger { entries, base_total }
    }

    /// Ledger of an architecture without allocating its weights. Entries in
    /// `frozen` groups are marked frozen.
    pub fn from_arch(arch: &Architecture, frozen: &[ParamGroup]) -> Self {
        let entries: Vec<LedgerEntry> = arch
            .param_specs()
            .into_iter()
            .map(|s| LedgerEntry {
                numel: s.numel(),
                frozen: frozen.contains(&s.group),
                name: s.name,
                group: s.group,
            })
            .collect();
        let base_total = ParamLedger::uni_total(&arch.config);
        ParamLedger { entries, base_total }
    }

    fn uni_total(cfg: &ModelConfig) -> usize {
        Architecture::uni(*cfg, Modality::Ct).param_specs().iter().map(|s| s.numel()).sum()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.numel).sum()
    }

    pub fn trainable(&self) -> usize {
        self.entries.iter().filter(|e| !e.frozen).map(|e| e.numel).sum()
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.entries.iter().filter(|e| e.group == group).map(|e| e.numel).sum()
    }
}

/// Ledger of a PEMMA model: frozen base plus trainable PET paths and
/// low-rank pairs.
pub fn pemma_ledger(cfg: &ModelConfig, adapt: &AdaptationConfig) -> ParamLedger {
    let mut arch = Architecture::uni(*cfg, Modality::Ct);
    arch.pet_paths = true;
    arch.peft = Some(adapt.clone());
    ParamLedger::from_arch(&arch, &[ParamGroup::Base])
}

/// Two independent uni-modal models; only the PET member is trained.
pub fn late_fusion_ledger(cfg: &ModelConfig) -> ParamLedger {
    let mut entries = Vec::new();
    for (modality, frozen) in [(Modality::Ct, true), (Modality::Pet, false)] {
        let arch = Architecture::uni(*cfg, modality);
        entries.extend(arch.param_specs().into_iter().map(|s| LedgerEntry {
            name: format!("{}/{}", modality.tag(), s.name),
            numel: s.numel(),
            group: s.group,
            frozen,
        }));
    }
    ParamLedger {
        entries,
        base_total: ParamLedger::uni_total(cfg),
    }
}

/// One model with a two-channel stem, retrained in full.
pub fn early_fusion_ledger(cfg: &ModelConfig) -> ParamLedger {
    let mut arch = Architecture::uni(*cfg, Modality::Ct);
    arch.stem = Stem::EarlyFusion { zero_fill: false };
    ParamLedger::from_arch(&arch, &[])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub method: String,
    pub total: usize,
    pub trainable: usize,
    /// `trainable / total`
    pub trainable_ratio: f64,
    /// Size of the uni-modal model.
    pub base_total: usize,
    /// `total / base_total`
    pub relative_size: f64,
    pub groups: BTreeMap<String, usize>,
}

pub fn param_report(method: &str, ledger: &ParamLedger) -> ParamReport {
    let total = ledger.total();
    let trainable = ledger.trainable();
    let groups = ParamGroup::ALL
        .iter()
        .map(|&g| (g.label().to_string(), ledger.group_count(g)))
        .filter(|&(_, n)| n > 0)
        .collect();
    ParamReport {
        method: method.to_string(),
        total,
        trainable,
        trainable_ratio: trainable as f64 / total as f64,
        base_total: ledger.base_total,
        relative_size: total as f64 / ledger.base_total as f64,
        groups,
    }
}
