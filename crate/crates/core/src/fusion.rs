//! Early- and late-fusion baselines.

use serde::{Deserialize, Serialize};

pub use crate::backbone::MaskProbabilities;

use crate::adaptation::PetInit;
use crate::backbone::{predict_case, Architecture, Model, Stem};
use crate::data::{Case, Modality, Mode};
use crate::tensor::{ParamGroup, Real, Rng, Tensor};
use crate::{Error, Result};

/// Weight of the CT mask in a late-fusion average.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    w_c: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights { w_c: 0.5 }
    }
}

impl FusionWeights {
    pub fn new(w_c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w_c) {
            return Err(Error::invalid(format!("w_C = {w_c} is outside [0, 1]")));
        }
        Ok(FusionWeights { w_c })
    }

    pub fn w_c(self) -> f64 {
        self.w_c
    }
}

/// `w_C·M_C + (1 − w_C)·M_P`, voxel by voxel.
pub fn late_fusion_combine(m_c: &MaskProbabilities, m_p: &MaskProbabilities, w: FusionWeights) -> Result<MaskProbabilities> {
    if m_c.dims != m_p.dims || m_c.classes != m_p.classes {
        return Err(Error::shape(
            "late_fusion_combine",
            format!("{:?}x{} vs {:?}x{}", m_c.dims, m_c.classes, m_p.dims, m_p.classes),
        ));
    }
    let w_c = w.w_c();
    // The endpoints are copies so that they hold bit for bit.
    let data = if w_c == 1.0 {
        m_c.data.clone()
    } else if w_c == 0.0 {
        m_p.data.clone()
    } else {
        m_c.data.iter().zip(&m_p.data).map(|(&c, &p)| w_c * c + (1.0 - w_c) * p).collect()
    };
    MaskProbabilities::new(m_c.dims, m_c.classes, data)
}

/// Two independently trained uni-modal models.
#[derive(Clone, Debug)]
pub struct LateFusion<E: Real> {
    pub ct: Model<E>,
    pub pet: Model<E>,
    pub weights: FusionWeights,
}

impl<E: Real> LateFusion<E> {
    pub fn new(ct: Model<E>, pet: Model<E>, weights: FusionWeights) -> Result<Self> {
        if ct.arch.stem != (Stem::Uni { modality: Modality::Ct }) || pet.arch.stem != (Stem::Uni { modality: Modality::Pet }) {
            return Err(Error::invalid("late fusion pairs a CT model with a PET model"));
        }
        Ok(LateFusion { ct, pet, weights })
    }

    /// `ct` and `pet` modes use one member; `ctpet` combines both.
    pub fn predict(&self, case: &Case, mode: Mode) -> Result<MaskProbabilities> {
        match mode {
            Mode::Ct => predict_case(&self.ct, case, Mode::Ct),
            Mode::Pet => predict_case(&self.pet, case, Mode::Pet),
            Mode::CtPet => {
                let m_c = predict_case(&self.ct, case, Mode::Ct)?;
                let m_p = predict_case(&self.pet, case, Mode::Pet)?;
                late_fusion_combine(&m_c, &m_p, self.weights)
            }
        }
    }
}

/// Two-channel model seeded from a trained CT model: the trunk and the CT
/// slices of the embedding and skip path are copied, the PET slices follow
/// `strategy`. Every parameter is trainable.
pub fn early_fusion_from<E: Real>(base: &Model<E>, strategy: PetInit, zero_fill: bool, rng: &mut Rng) -> Result<Model<E>> {
    if base.arch.stem != (Stem::Uni { modality: Modality::Ct }) {
        return Err(Error::invalid("early fusion starts from a CT model"));
    }
    let cfg = *base.config();
    let arch = Architecture {
        stem: Stem::EarlyFusion { zero_fill },
        ..Architecture::uni(cfg, Modality::Ct)
    };
    let mut model = Model::new(cfg, arch.stem, rng)?;
    for p in base.params.iter().filter(|p| p.group == ParamGroup::Base) {
        let name = p.name.replace("embed.ct.", "embed.ctpet.").replace("skip.ct.", "skip.ctpet.");
        let value = if name == "embed.ctpet.weight" || name == "skip.ctpet.weight" {
            widen(&p.value, strategy, rng)?
        } else {
            p.value.clone()
        };
        let slot = model.params.get_mut(&name)?;
        if slot.value.shape() != value.shape() {
            return Err(Error::shape("early_fusion_from", format!("{name}: {:?}", value.shape())));
        }
        slot.value = value;
    }
    model.params.set_frozen_where(false, |_| true);
    Ok(model)
}

/// `[out, k]` → `[out, 2k]`: the CT block followed by a PET block.
fn widen<E: Real>(w: &Tensor<E>, strategy: PetInit, rng: &mut Rng) -> Result<Tensor<E>> {
    let (out, k) = (w.shape()[0], w.shape()[1]);
    let mut data = Vec::with_capacity(out * 2 * k);
    for r in 0..out {
        let row = &w.data()[r * k..(r + 1) * k];
        data.extend_from_slice(row);
        match strategy {
            PetInit::CrossModal => data.extend_from_slice(row),
            PetInit::Zero => data.extend(std::iter::repeat(E::ZERO).take(k)),
            PetInit::Random => data.extend((0..k).map(|_| E::from_f64(rng.normal() * 0.02))),
        }
    }
    Tensor::new([out, 2 * k], data)
}

/// Early-fusion prediction; both modalities are required unless the model
/// was built with zero filling.
pub fn early_fusion_forward<E: Real>(model: &Model<E>, case: &Case, mode: Mode) -> Result<MaskProbabilities> {
    if !matches!(model.arch.stem, Stem::EarlyFusion { .. }) {
        return Err(Error::invalid("not an early-fusion model"));
    }
    predict_case(model, case, mode)
}
