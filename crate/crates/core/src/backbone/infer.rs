//! Whole-volume inference by averaging overlapping windows.

use super::{Graph, Model};
use crate::data::volume::crop_values;
use crate::data::{Case, LabelGrid, Mode};
use crate::tensor::{Real, Tape};
use crate::{Error, Result};

/// Per-voxel class probabilities, `data[voxel * classes + class]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskProbabilities {
    pub dims: [usize; 3],
    pub classes: usize,
    pub data: Vec<f64>,
}

impl MaskProbabilities {
    pub fn new(dims: [usize; 3], classes: usize, data: Vec<f64>) -> Result<Self> {
        let n = dims.iter().product::<usize>() * classes;
        if classes == 0 || data.len() != n {
            return Err(Error::shape("mask probabilities", format!("{} values for {dims:?} x {classes}", data.len())));
        }
        Ok(MaskProbabilities { dims, classes, data })
    }

    pub fn voxels(&self) -> usize {
        self.data.len() / self.classes
    }

    pub fn row(&self, voxel: usize) -> &[f64] {
        &self.data[voxel * self.classes..(voxel + 1) * self.classes]
    }

    /// Largest deviation of a row sum from 1, or infinity for a negative entry.
    pub fn max_row_error(&self) -> f64 {
        if self.data.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return f64::INFINITY;
        }
        self.data
            .chunks(self.classes)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Hard labels; ties go to the lower class.
    pub fn argmax(&self) -> LabelGrid {
        let data = self
            .data
            .chunks(self.classes)
            .map(|r| {
                let mut best = 0;
                for k in 1..r.len() {
                    if r[k] > r[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelGrid { dims: self.dims, data }
    }
}

/// Window origins along one axis: multiples of `stride`, plus a final
/// window flush with the far edge.
pub fn sliding_origins(extent: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 || window > extent {
        return Err(Error::Data(format!("cannot tile {extent} voxels with window {window}, stride {stride}")));
    }
    let mut o: Vec<usize> = (0..=extent - window).step_by(stride).collect();
    if *o.last().unwrap() != extent - window {
        o.push(extent - window);
    }
    Ok(o)
}

/// Calls `f` with every window crop of a case; `stride` defaults to half
/// the model side.
pub(crate) fn for_each_window(
    case: &Case,
    side: usize,
    mode: Mode,
    mut f: impl FnMut([usize; 3], Option<&[f32]>, Option<&[f32]>) -> Result<()>,
) -> Result<()> {
    case.validate()?;
    let dims = case.ct.dims;
    if mode.uses_pet() && case.pet.is_none() {
        return Err(Error::ModalityUnavailable {
            mode: mode.to_string(),
            reason: format!("case {} has no PET", case.id),
        });
    }
    let axes = [0, 1, 2].map(|a| sliding_origins(dims[a], side, side / 2));
    let [ox, oy, oz] = axes;
    let (ox, oy, oz) = (ox?, oy?, oz?);
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                let origin = [x, y, z];
                let ct = if mode.uses_ct() { Some(crop_values(&case.ct.data, dims, origin, side)?) } else { None };
                let pet = match (&case.pet, mode.uses_pet()) {
                    (Some(p), true) => Some(crop_values(&p.data, dims, origin, side)?),
                    _ => None,
                };
                f(origin, ct.as_deref(), pet.as_deref())?;
            }
        }
    }
    Ok(())
}

/// Softmax probabilities for a whole case. Overlapping windows are averaged.
pub fn predict_case<E: Real>(model: &Model<E>, case: &Case, mode: Mode) -> Result<MaskProbabilities> {
    model.arch.check_mode(mode)?;
    let side = model.config().side;
    let classes = model.config().classes;
    let dims = case.ct.dims;
    let nvox: usize = dims.iter().product();
    let mut acc = vec![0.0f64; nvox * classes];
    let mut hits = vec![0u32; nvox];
    for_each_window(case, side, mode, |origin, ct, pet| {
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &model.params);
        let out = model.forward(&mut g, ct, pet, mode)?;
        let probs = tape.softmax(out.logits, 1)?;
        let p = tape.value(probs);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predicted probabilities".into()));
        }
        for lz in 0..side {
            for ly in 0..side {
                for lx in 0..side {
                    let local = lx + side * (ly + side * lz);
                    let global = (origin[0] + lx) + dims[0] * ((origin[1] + ly) + dims[1] * (origin[2] + lz));
                    hits[global] += 1;
                    for k in 0..classes {
                        acc[global * classes + k] += p[local * classes + k].to_f64();
                    }
                }
            }
        }
        Ok(())
    })?;
    for (v, &h) in hits.iter().enumerate() {
        let inv = 1.0 / h as f64;
        for k in 0..classes {
            acc[v * classes + k] *= inv;
        }
    }
    MaskProbabilities::new(dims, classes, acc)
}
