//! Saving and loading trained models inside a run directory.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use pemma_core::backbone::{predict_case, Architecture, Model};
use pemma_core::data::{Case, Mode};
use pemma_core::fusion::{FusionWeights, LateFusion, MaskProbabilities};
use pemma_core::tensor::{read_checkpoint, write_checkpoint, CheckpointEntry, ParamGroup, ParamStore};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MODEL_CARD: &str = "model.json";
pub const BASE_CKPT: &str = "base.ckpt";
pub const DELTA_CKPT: &str = "delta.ckpt";
pub const CT_CKPT: &str = "ct.ckpt";
pub const PET_CKPT: &str = "pet.ckpt";

/// Describes how to rebuild the model stored next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelCard {
    /// `base.ckpt` holds the frozen weights, `delta.ckpt` (when present)
    /// everything added on top of them.
    Single { arch: Architecture },
    /// Two uni-modal models in `ct.ckpt` and `pet.ckpt`.
    Late { ct: Architecture, pet: Architecture, w_c: f64 },
}

#[derive(Clone, Debug)]
pub enum Bundle {
    Single(Model<f32>),
    Late(LateFusion<f32>),
}

pub fn write_entries(path: &Path, entries: &[CheckpointEntry]) -> CliResult<()> {
    let f = File::create(path)?;
    write_checkpoint(BufWriter::new(f), entries)?;
    Ok(())
}

pub fn read_entries(path: &Path) -> CliResult<Vec<CheckpointEntry>> {
    let f = File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    Ok(read_checkpoint(BufReader::new(f))?)
}

fn store_from(entries: &[CheckpointEntry]) -> CliResult<ParamStore<f32>> {
    let mut store = ParamStore::new();
    store.apply_entries(entries, true)?;
    Ok(store)
}

/// Loads a single model from its frozen part plus an optional delta.
pub fn load_single(arch: Architecture, base: &Path, delta: Option<&Path>) -> CliResult<Model<f32>> {
    let mut store = store_from(&read_entries(base)?)?;
    if let Some(d) = delta {
        store.apply_entries(&read_entries(d)?, true)?;
    }
    Ok(Model::from_parts(arch, store)?)
}

impl Bundle {
    pub fn modes(&self) -> Vec<Mode> {
        match self {
            Bundle::Single(m) => m.arch.modes(),
            Bundle::Late(_) => Mode::ALL.to_vec(),
        }
    }

    pub fn check_mode(&self, mode: Mode) -> CliResult<()> {
        match self {
            Bundle::Single(m) => Ok(m.arch.check_mode(mode)?),
            Bundle::Late(_) => Ok(()),
        }
    }

    pub fn predict(&self, case: &Case, mode: Mode) -> CliResult<MaskProbabilities> {
        Ok(match self {
            Bundle::Single(m) => predict_case(m, case, mode)?,
            Bundle::Late(l) => l.predict(case, mode)?,
        })
    }

    pub fn single(&self) -> CliResult<&Model<f32>> {
        match self {
            Bundle::Single(m) => Ok(m),
            Bundle::Late(_) => Err(CliError::config("this stage needs a single model, not a late-fusion pair")),
        }
    }

    /// Writes the card and checkpoints; returns the file names written.
    pub fn save(&self, dir: &Path) -> CliResult<Vec<String>> {
        let mut files = Vec::new();
        let card = match self {
            Bundle::Single(m) => {
                write_entries(&dir.join(BASE_CKPT), &m.params.to_entries(|p| p.group == ParamGroup::Base))?;
                files.push(BASE_CKPT.to_string());
                let delta = m.params.to_entries(|p| p.group != ParamGroup::Base);
                if !delta.is_empty() {
                    write_entries(&dir.join(DELTA_CKPT), &delta)?;
                    files.push(DELTA_CKPT.to_string());
                }
                ModelCard::Single { arch: m.arch.clone() }
            }
            Bundle::Late(l) => {
                write_entries(&dir.join(CT_CKPT), &l.ct.params.to_entries(|_| true))?;
                write_entries(&dir.join(PET_CKPT), &l.pet.params.to_entries(|_| true))?;
                files.extend([CT_CKPT.to_string(), PET_CKPT.to_string()]);
                ModelCard::Late {
                    ct: l.ct.arch.clone(),
                    pet: l.pet.arch.clone(),
                    w_c: l.weights.w_c(),
                }
            }
        };
        std::fs::write(dir.join(MODEL_CARD), serde_json::to_string_pretty(&card)?)?;
        files.push(MODEL_CARD.to_string());
        Ok(files)
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let card_path = dir.join(MODEL_CARD);
        let text = std::fs::read_to_string(&card_path)
            .map_err(|e| CliError::config(format!("{} is not a model run ({e})", dir.display())))?;
        let card: ModelCard = serde_json::from_str(&text)?;
        Ok(match card {
            ModelCard::Single { arch } => {
                let delta = dir.join(DELTA_CKPT);
                let delta = delta.exists().then_some(delta);
                Bundle::Single(load_single(arch, &dir.join(BASE_CKPT), delta.as_deref())?)
            }
            ModelCard::Late { ct, pet, w_c } => {
                let ct = Model::from_parts(ct, store_from(&read_entries(&dir.join(CT_CKPT))?)?)?;
                let pet = Model::from_parts(pet, store_from(&read_entries(&dir.join(PET_CKPT))?)?)?;
                Bundle::Late(LateFusion::new(ct, pet, FusionWeights::new(w_c)?)?)
            }
        })
    }
}
