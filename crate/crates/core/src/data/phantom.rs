//! Synthetic head-and-neck phantoms.
//!
//! Lesions are faint on CT and bright on PET, so a CT-only model has
//! limited headroom while PET carries most of the signal. Survival times
//! shorten with total lesion volume and with HPV-negative status.

use serde::{Deserialize, Serialize};

use super::ehr::{EhrRecord, Gender};
use super::volume::{Case, LabelGrid, Modality, Volume, LYMPH, TUMOR};
use crate::objectives::SurvivalRecord;
use crate::tensor::Rng;
use crate::{Error, Result};

/// Per-centre distribution shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CenterShift {
    /// Added to every CT value inside the body (HU).
    pub intensity_offset: f64,
    /// Multiplies both noise levels.
    pub noise_scale: f64,
    /// Multiplies lesion radii.
    pub lesion_size_bias: f64,
}

impl Default for CenterShift {
    fn default() -> Self {
        CenterShift {
            intensity_offset: 0.0,
            noise_scale: 1.0,
            lesion_size_bias: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub side: usize,
    pub spacing_mm: f32,
    pub tumor_count: [usize; 2],
    pub lymph_count: [usize; 2],
    pub tumor_radius: [f64; 2],
    pub lymph_radius: [f64; 2],
    /// Lesion contrast over soft tissue (HU).
    pub ct_tumor_contrast: f64,
    pub ct_lymph_contrast: f64,
    pub ct_noise: f64,
    /// PET uptake of soft tissue and the lesion gains on top of it.
    pub pet_background: f64,
    pub pet_tumor_gain: f64,
    pub pet_lymph_gain: f64,
    pub pet_noise: f64,
    pub censoring: f64,
    /// Median event time (months) for a reference patient.
    pub base_time: f64,
    pub shift: CenterShift,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            side: 48,
            spacing_mm: 1.0,
            tumor_count: [1, 1],
            lymph_count: [1, 2],
            tumor_radius: [4.0, 7.0],
            lymph_radius: [3.0, 4.5],
            ct_tumor_contrast: 12.0,
            ct_lymph_contrast: 10.0,
            ct_noise: 45.0,
            pet_background: 0.3,
            pet_tumor_gain: 6.0,
            pet_lymph_gain: 3.0,
            pet_noise: 0.15,
            censoring: 0.7,
            base_time: 40.0,
            shift: CenterShift::default(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("phantom spec: {m}")));
        if self.side < 8 {
            return bad(format!("side {} too small", self.side));
        }
        for (name, [lo, hi]) in [("tumor_count", self.tumor_count), ("lymph_count", self.lymph_count)] {
            if lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        let limit = self.side as f64 * 0.25;
        for (name, [lo, hi]) in [("tumor_radius", self.tumor_radius), ("lymph_radius", self.lymph_radius)] {
            let hi_eff = hi * self.shift.lesion_size_bias;
            if !(lo > 0.0 && lo <= hi && hi_eff <= limit) {
                return bad(format!("{name} [{lo}, {hi}] does not fit a side of {}", self.side));
            }
        }
        if !(self.pet_tumor_gain > 0.0 && self.pet_lymph_gain > 0.0 && self.pet_background > 0.0) {
            return bad("PET gains must be positive".into());
        }
        if !(self.ct_noise >= 0.0 && self.pet_noise >= 0.0 && self.shift.noise_scale >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.censoring) {
            return bad(format!("censoring fraction {} outside [0, 1]", self.censoring));
        }
        if !(self.base_time > 0.0 && self.shift.lesion_size_bias > 0.0) {
            return bad("base_time and lesion_size_bias must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Lesion {
    center: [f64; 3],
    radius: f64,
    class: u8,
}

const SOFT_TISSUE_HU: f64 = 40.0;
const AIR_HU: f64 = -1000.0;
const BONE_HU: f64 = 700.0;
const MAX_RETRIES: usize = 200;

/// Draws one registered CT/PET/label case. Deterministic in `seed`.
pub fn generate_phantom(seed: u64, spec: &PhantomSpec, center: &str) -> Result<Case> {
    spec.validate()?;
    let rng = Rng::new(seed);
    let d = spec.side;
    let df = d as f64;
    let c = (df - 1.0) / 2.0;
    // body ellipsoid semi-axes (x, y, z)
    let semi = [0.44 * df, 0.38 * df, 0.47 * df];
    let inside_body = |p: [f64; 3]| -> f64 {
        ((p[0] - c) / semi[0]).powi(2) + ((p[1] - c) / semi[1]).powi(2) + ((p[2] - c) / semi[2]).powi(2)
    };

    let mut geo = rng.fork(1);
    let lesions = place_lesions(&mut geo, spec, &inside_body, c)?;

    // smooth anatomical texture: a few random low-frequency cosines
    let mut tex = rng.fork(2);
    let waves: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let k = [tex.range(0.5, 2.0), tex.range(0.5, 2.0), tex.range(0.5, 2.0)]
                .map(|f| f * std::f64::consts::TAU / df);
            (k, tex.range(0.0, std::f64::consts::TAU), tex.range(5.0, 12.0))
        })
        .collect();
    let spine = [c, c + 0.22 * df];
    let spine_r = 0.07 * df;

    let n = d * d * d;
    let mut ct = vec![0f32; n];
    let mut pet = vec![0f32; n];
    let mut mask = vec![0u8; n];
    let mut noise = rng.fork(3);
    let ct_sd = spec.ct_noise * spec.shift.noise_scale;
    let pet_sd = spec.pet_noise * spec.shift.noise_scale;
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                let i = x + d * (y + d * z);
                let p = [x as f64, y as f64, z as f64];
                let body = inside_body(p) <= 1.0;
                let e_ct = noise.normal();
                let e_pet = noise.normal();
                if !body {
                    ct[i] = (AIR_HU + 10.0 * e_ct) as f32;
                    continue;
                }
                let mut hu = SOFT_TISSUE_HU + spec.shift.intensity_offset;
                for (k, phase, amp) in &waves {
                    hu += amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos();
                }
                let in_spine = (p[0] - spine[0]).powi(2) + (p[1] - spine[1]).powi(2) <= spine_r * spine_r;
                if in_spine {
                    hu = BONE_HU;
                }
                let mut uptake = spec.pet_background * (1.0 + 0.1 * (waves[0].0[0] * p[0] + waves[0].1).sin());
                for l in &lesions {
                    let r2 = (0..3).map(|a| (p[a] - l.center[a]).powi(2)).sum::<f64>();
                    if r2 <= l.radius * l.radius {
                        mask[i] = l.class;
                        let (contrast, gain) = if l.class == TUMOR {
                            (spec.ct_tumor_contrast, spec.pet_tumor_gain)
                        } else {
                            (spec.ct_lymph_contrast, spec.pet_lymph_gain)
                        };
                        hu += contrast;
                        uptake += gain * (1.0 - 0.4 * r2 / (l.radius * l.radius));
                    }
                }
                ct[i] = (hu + ct_sd * e_ct) as f32;
                pet[i] = (uptake * (1.0 + pet_sd * e_pet)).max(1e-3) as f32;
            }
        }
    }

    let mut clinic = rng.fork(4);
    let ehr = draw_ehr(&mut clinic);
    let burden: usize = mask.iter().filter(|&&l| l != 0).count();
    let survival = draw_survival(&mut rng.fork(5), spec, burden, &ehr);

    let spacing = [spec.spacing_mm; 3];
    let case = Case {
        id: format!("{center}-{seed}"),
        center: center.to_string(),
        ct: Volume::new([d; 3], spacing, Modality::Ct, ct)?,
        pet: Some(Volume::new([d; 3], spacing, Modality::Pet, pet)?),
        mask: LabelGrid { dims: [d; 3], data: mask },
        survival: Some(survival),
        ehr: Some(ehr),
    };
    case.validate()?;
    Ok(case)
}

fn place_lesions(rng: &mut Rng, spec: &PhantomSpec, inside_body: &dyn Fn([f64; 3]) -> f64, c: f64) -> Result<Vec<Lesion>> {
    let count = |r: &mut Rng, [lo, hi]: [usize; 2]| lo + r.below(hi - lo + 1);
    let n_tumor = count(rng, spec.tumor_count);
    let n_lymph = count(rng, spec.lymph_count);
    let df = spec.side as f64;
    let bias = spec.shift.lesion_size_bias;
    let mut out: Vec<Lesion> = Vec::with_capacity(n_tumor + n_lymph);
    let plan = std::iter::repeat(TUMOR).take(n_tumor).chain(std::iter::repeat(LYMPH).take(n_lymph));
    for class in plan {
        let [lo, hi] = if class == TUMOR { spec.tumor_radius } else { spec.lymph_radius };
        let mut placed = false;
        for _ in 0..MAX_RETRIES {
            let radius = rng.range(lo, hi) * bias;
            // tumours sit near the midline, nodes laterally
            let center = if class == TUMOR {
                [c + rng.range(-0.12, 0.12) * df, c + rng.range(-0.15, 0.05) * df, c + rng.range(-0.2, 0.2) * df]
            } else {
                let side = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                [c + side * rng.range(0.15, 0.28) * df, c + rng.range(-0.15, 0.1) * df, c + rng.range(-0.25, 0.25) * df]
            };
            // the whole ball must stay inside the body, away from other lesions
            let margin = (0..3)
                .map(|a| {
                    let mut p = center;
                    p[a] += radius.copysign(center[a] - c);
                    inside_body(p)
                })
                .fold(0.0f64, f64::max);
            if margin > 0.85 {
                continue;
            }
            let clear = out.iter().all(|o| {
                let dist = (0..3).map(|a| (o.center[a] - center[a]).powi(2)).sum::<f64>().sqrt();
                dist > o.radius + radius + 1.5
            });
            if clear {
                out.push(Lesion { center, radius, class });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not place lesion of class {class} without overlap after {MAX_RETRIES} tries"
            )));
        }
    }
    Ok(out)
}

fn draw_ehr(r: &mut Rng) -> EhrRecord {
    // each field is missing with a small probability
    let keep = |r: &mut Rng, p_missing: f64| !r.bernoulli(p_missing);
    let mut e = EhrRecord::default();
    if keep(r, 0.02) {
        e.gender = Some(if r.bernoulli(0.8) { Gender::Male } else { Gender::Female });
    }
    if keep(r, 0.05) {
        e.age = Some((61.0 + 9.0 * r.normal()).clamp(25.0, 90.0).round());
    }
    if keep(r, 0.15) {
        e.weight = Some((80.0 + 15.0 * r.normal()).clamp(40.0, 150.0).round());
    }
    if keep(r, 0.3) {
        e.tobacco = Some(r.bernoulli(0.55));
    }
    if keep(r, 0.35) {
        e.alcohol = Some(r.bernoulli(0.6));
    }
    if keep(r, 0.1) {
        e.hpv_positive = Some(r.bernoulli(0.6));
    }
    if keep(r, 0.25) {
        e.performance_status = Some(r.below(3) as u8);
    }
    if keep(r, 0.02) {
        e.surgery = Some(r.bernoulli(0.2));
    }
    if keep(r, 0.02) {
        e.chemotherapy = Some(r.bernoulli(0.85));
    }
    e
}

/// Reference burden of one mid-sized lesion pair, used to centre the risk.
fn reference_burden(spec: &PhantomSpec) -> f64 {
    let ball = |r: f64| 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
    let rt = 0.5 * (spec.tumor_radius[0] + spec.tumor_radius[1]);
    let rl = 0.5 * (spec.lymph_radius[0] + spec.lymph_radius[1]);
    ball(rt) + ball(rl)
}

fn draw_survival(r: &mut Rng, spec: &PhantomSpec, burden: usize, ehr: &EhrRecord) -> SurvivalRecord {
    let rel = (burden.max(1) as f64 / reference_burden(spec)).ln();
    let mut risk = 1.6 * rel;
    risk += match ehr.hpv_positive {
        Some(false) => 1.0,
        Some(true) => -0.4,
        None => 0.0,
    };
    if ehr.tobacco == Some(true) {
        risk += 0.2;
    }
    // exponential event time with hazard exp(risk) / base_time
    let scale = spec.base_time * (-risk).exp();
    let t_event = -scale * (1.0 - r.uniform()).ln();
    let censored = r.bernoulli(spec.censoring);
    let time = if censored { t_event * r.range(0.05, 1.0) } else { t_event };
    SurvivalRecord {
        time: time.max(0.01),
        event: !censored,
        bin: None,
    }
}
