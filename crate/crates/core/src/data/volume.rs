use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ehr::EhrRecord;
use crate::objectives::SurvivalRecord;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ct,
    Pet,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Ct => "ct",
            Modality::Pet => "pet",
        }
    }
}

/// Which modalities a forward pass sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ct,
    Pet,
    CtPet,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Ct, Mode::Pet, Mode::CtPet];

    pub fn uses_ct(self) -> bool {
        matches!(self, Mode::Ct | Mode::CtPet)
    }

    pub fn uses_pet(self) -> bool {
        matches!(self, Mode::Pet | Mode::CtPet)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Mode::Ct => "ct",
            Mode::Pet => "pet",
            Mode::CtPet => "ctpet",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ct" => Ok(Mode::Ct),
            "pet" => Ok(Mode::Pet),
            "ctpet" | "cp" => Ok(Mode::CtPet),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

/// Scalar 3D image. Storage is x-fastest: `index = x + nx * (y + ny * z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub modality: Modality,
    pub data: Vec<f32>,
    /// Set once intensity preprocessing has been applied.
    pub normalized: bool,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], modality: Modality, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 || n != data.len() {
            return Err(Error::Data(format!("volume dims {dims:?} do not match {} values", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("volume contains non-finite values".into()));
        }
        Ok(Volume {
            dims,
            spacing,
            modality,
            data,
            normalized: false,
        })
    }

    pub fn zeros(side: usize, modality: Modality) -> Self {
        Volume {
            dims: [side; 3],
            spacing: [1.0; 3],
            modality,
            data: vec![0.0; side * side * side],
            normalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Side length when the volume is a cube.
    pub fn cube_side(&self) -> Option<usize> {
        (self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]).then_some(self.dims[0])
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Copies the cube `[origin, origin + size)` on every axis.
    pub fn crop(&self, origin: [usize; 3], size: usize) -> Result<Volume> {
        let data = crop_values(&self.data, self.dims, origin, size)?;
        Ok(Volume {
            dims: [size; 3],
            spacing: self.spacing,
            modality: self.modality,
            data,
            normalized: self.normalized,
        })
    }
}

pub(crate) fn crop_values<T: Copy>(src: &[T], dims: [usize; 3], origin: [usize; 3], size: usize) -> Result<Vec<T>> {
    if (0..3).any(|a| origin[a] + size > dims[a]) {
        return Err(Error::Data(format!("crop {origin:?}+{size} exceeds {dims:?}")));
    }
    let mut out = Vec::with_capacity(size * size * size);
    for z in origin[2]..origin[2] + size {
        for y in origin[1]..origin[1] + size {
            let row = origin[0] + dims[0] * (y + dims[1] * z);
            out.extend_from_slice(&src[row..row + size]);
        }
    }
    Ok(out)
}

/// Voxel labels: 0 background, 1 primary tumour, 2 lymph node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

pub const BACKGROUND: u8 = 0;
pub const TUMOR: u8 = 1;
pub const LYMPH: u8 = 2;
pub const NUM_CLASSES: usize = 3;

impl LabelGrid {
    pub fn zeros(dims: [usize; 3]) -> Self {
        LabelGrid {
            dims,
            data: vec![0; dims.iter().product()],
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&l| l == class).count()
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&l| l != BACKGROUND).count()
    }

    pub fn crop(&self, origin: [usize; 3], size: usize) -> Result<LabelGrid> {
        Ok(LabelGrid {
            dims: [size; 3],
            data: crop_values(&self.data, self.dims, origin, size)?,
        })
    }
}

/// One patient: registered CT/PET, labels and optional outcome data.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub center: String,
    pub ct: Volume,
    pub pet: Option<Volume>,
    pub mask: LabelGrid,
    pub survival: Option<SurvivalRecord>,
    pub ehr: Option<EhrRecord>,
}

impl Case {
    /// Checks that CT, PET and labels share one grid.
    pub fn validate(&self) -> Result<()> {
        if self.mask.dims != self.ct.dims {
            return Err(Error::Data(format!(
                "{}: mask {:?} vs ct {:?}",
                self.id, self.mask.dims, self.ct.dims
            )));
        }
        if let Some(pet) = &self.pet {
            if pet.dims != self.ct.dims || pet.spacing != self.ct.spacing {
                return Err(Error::Data(format!("{}: PET is not registered to CT", self.id)));
            }
        }
        Ok(())
    }

    pub fn has(&self, mode: Mode) -> bool {
        match mode {
            Mode::Ct => true,
            Mode::Pet | Mode::CtPet => self.pet.is_some(),
        }
    }

    pub fn crop(&self, origin: [usize; 3], size: usize) -> Result<Case> {
        Ok(Case {
            id: self.id.clone(),
            center: self.center.clone(),
            ct: self.ct.crop(origin, size)?,
            pet: self.pet.as_ref().map(|p| p.crop(origin, size)).transpose()?,
            mask: self.mask.crop(origin, size)?,
            survival: self.survival.clone(),
            ehr: self.ehr.clone(),
        })
    }
}
