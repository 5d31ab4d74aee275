use serde::{Deserialize, Serialize};

use super::volume::Mode;
use crate::tensor::Rng;
use crate::{Error, Result};

/// Modality-dropout probabilities, drawn once per training batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeProbs {
    pub ct: f64,
    pub pet: f64,
    pub ctpet: f64,
}

impl Default for ModeProbs {
    fn default() -> Self {
        ModeProbs {
            ct: 0.2,
            pet: 0.2,
            ctpet: 0.6,
        }
    }
}

impl ModeProbs {
    pub fn only(mode: Mode) -> Self {
        let mut p = ModeProbs {
            ct: 0.0,
            pet: 0.0,
            ctpet: 0.0,
        };
        match mode {
            Mode::Ct => p.ct = 1.0,
            Mode::Pet => p.pet = 1.0,
            Mode::CtPet => p.ctpet = 1.0,
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.ct, self.pet, self.ctpet];
        if ps.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(format!("negative or non-finite mode probability in {self:?}")));
        }
        let total: f64 = ps.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mode probabilities sum to {total}, not 1")));
        }
        Ok(())
    }
}

pub fn sample_modality_mode(rng: &mut Rng, probs: &ModeProbs) -> Result<Mode> {
    probs.validate()?;
    let u = rng.uniform();
    Ok(if u < probs.ct {
        Mode::Ct
    } else if u < probs.ct + probs.pet {
        Mode::Pet
    } else if probs.ctpet > 0.0 {
        Mode::CtPet
    } else if probs.pet > 0.0 {
        Mode::Pet
    } else {
        Mode::Ct
    })
}
