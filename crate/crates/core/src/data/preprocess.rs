use super::volume::{Case, Volume};
use crate::Result;

pub const CT_MIN_HU: f32 = -200.0;
pub const CT_MAX_HU: f32 = 250.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PreprocessReport {
    /// PET had no nonzero voxel, so standardisation was skipped.
    pub pet_all_zero: bool,
}

/// Clips CT to `[CT_MIN_HU, CT_MAX_HU]` and maps it onto `[0, 1]`; PET is
/// standardised over its nonzero voxels (zeros stay zero). Each volume is
/// processed at most once, tracked by `Volume::normalized`.
pub fn preprocess_intensities(case: &mut Case) -> Result<PreprocessReport> {
    let mut report = PreprocessReport::default();
    if !case.ct.normalized {
        normalize_ct(&mut case.ct);
    }
    if let Some(pet) = case.pet.as_mut() {
        if !pet.normalized {
            report.pet_all_zero = !standardize_nonzero(pet);
        }
    }
    Ok(report)
}

pub fn normalize_ct(v: &mut Volume) {
    let span = CT_MAX_HU - CT_MIN_HU;
    for x in v.data.iter_mut() {
        *x = (x.clamp(CT_MIN_HU, CT_MAX_HU) - CT_MIN_HU) / span;
    }
    v.normalized = true;
}

/// Returns false (and leaves the volume untouched) when every voxel is zero.
pub fn standardize_nonzero(v: &mut Volume) -> bool {
    let (mut n, mut sum) = (0usize, 0f64);
    for &x in v.data.iter().filter(|x| **x != 0.0) {
        n += 1;
        sum += x as f64;
    }
    if n == 0 {
        return false;
    }
    let mean = sum / n as f64;
    let var = v
        .data
        .iter()
        .filter(|x| **x != 0.0)
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    for x in v.data.iter_mut().filter(|x| **x != 0.0) {
        *x = ((*x as f64 - mean) / sd) as f32;
    }
    v.normalized = true;
    true
}
