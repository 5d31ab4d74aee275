//! Patch-based segmentation training and whole-case evaluation.

use std::collections::BTreeMap;

use pemma_core::backbone::{Graph, Model};
use pemma_core::data::{random_flips, sample_modality_mode, sample_patches, Case, Mode, PatchRatio, LYMPH, TUMOR};
use pemma_core::objectives::{dice_ce_loss, dice_score, AdamW, AdamWConfig, CosineSchedule, EarlyStopping, ParamGrads};
use pemma_core::tensor::{Param, Real, Rng, Tape};
use serde::Serialize;

use crate::bundle::Bundle;
use crate::config::TrainPlan;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub mode: Mode,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// `(step, validation loss)` at every check.
    pub validation: Vec<(usize, f64)>,
    pub best_step: Option<usize>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,mode,loss,lr\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.mode, r.loss, r.lr));
        }
        s
    }
}

/// The richest mode a model accepts, used for validation.
pub fn validation_mode(model: &Model<f32>) -> Mode {
    let modes = model.arch.modes();
    if modes.contains(&Mode::CtPet) {
        Mode::CtPet
    } else {
        modes[0]
    }
}

fn patch_loss(model: &Model<f32>, case: &Case, mode: Mode, track: bool) -> CliResult<(f64, Option<ParamGrads<f32>>)> {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &model.params, track);
    let pet = case.pet.as_ref().map(|v| v.data.as_slice());
    let out = model.forward(&mut g, Some(&case.ct.data), pet, mode)?;
    let classes = model.config().classes;
    let loss = dice_ce_loss(g.tape, out.logits, &case.mask.data, &vec![1.0; classes])?;
    let value = g.tape.scalar(loss.total).to_f64();
    if !value.is_finite() {
        return Err(CliError::Numeric(format!("training loss is {value} on {}", case.id)));
    }
    if !track {
        return Ok((value, None));
    }
    let grads = g.tape.backward(loss.total)?;
    Ok((value, Some(g.param_grads(&grads))))
}

fn snapshot(model: &Model<f32>) -> Vec<Param<f32>> {
    model.params.iter().filter(|p| !p.frozen).cloned().collect()
}

fn restore(model: &mut Model<f32>, saved: &[Param<f32>]) -> CliResult<()> {
    for p in saved {
        model.params.get_mut(&p.name)?.value = p.value.clone();
    }
    Ok(())
}

/// Trains the unfrozen parameters of `model` with AdamW on a cosine
/// schedule. The modality mode is drawn once per batch. Validation runs
/// every `val_every` steps; the best validated weights are kept.
pub fn train_segmentation(
    model: &mut Model<f32>,
    train: &[Case],
    val: &[Case],
    plan: &TrainPlan,
    rng: &mut Rng,
) -> CliResult<TrainLog> {
    if train.is_empty() {
        return Err(CliError::Data("no training cases".into()));
    }
    let side = model.config().side;
    let mut val_rng = rng.fork(0x7a1);
    let mut val_patches = Vec::new();
    for c in val {
        for p in sample_patches(c, side, plan.ratio, plan.val_patches, &mut val_rng)? {
            val_patches.push(p.case);
        }
    }
    let val_mode = validation_mode(model);

    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: plan.weight_decay,
        ..AdamWConfig::default()
    });
    let schedule = CosineSchedule::new(plan.lr, plan.steps as u64);
    let mut stopper = EarlyStopping::new(plan.patience);
    let mut best = None;
    let mut log = TrainLog::default();
    let period = plan.ratio.pos + plan.ratio.neg;
    let mut drawn = 0usize;

    for step in 0..plan.steps {
        let mode = sample_modality_mode(rng, &plan.mode_probs)?;
        let mut acc: ParamGrads<f32> = ParamGrads::new();
        let mut loss = 0.0;
        for _ in 0..plan.batch {
            let case = &train[rng.below(train.len())];
            if !case.has(mode) {
                return Err(CliError::Data(format!("{} has no PET volume for mode {mode}", case.id)));
            }
            let positive = drawn % period < plan.ratio.pos;
            drawn += 1;
            let ratio = if positive { PatchRatio { pos: 1, neg: 0 } } else { PatchRatio { pos: 0, neg: 1 } };
            let mut patch = sample_patches(case, side, ratio, 1, rng)?.remove(0).case;
            if plan.flips {
                random_flips(&mut patch, rng);
            }
            let (l, grads) = patch_loss(model, &patch, mode, true)?;
            loss += l / plan.batch as f64;
            for (name, g) in grads.expect("tracked") {
                match acc.get_mut(&name) {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        let scale = 1.0 / plan.batch as f32;
        acc.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
        let lr = schedule.lr(step as u64);
        opt.step(&mut model.params, &acc, lr)?;
        log.steps.push(StepRecord { step, mode, loss, lr });

        if !val_patches.is_empty() && (step + 1) % plan.val_every == 0 {
            let mut v = 0.0;
            for p in &val_patches {
                v += patch_loss(model, p, val_mode, false)?.0;
            }
            v /= val_patches.len() as f64;
            log.validation.push((step + 1, v));
            if stopper.observe(v) {
                best = Some(snapshot(model));
                log.best_step = Some(step + 1);
            } else if stopper.should_stop() {
                log.stopped_early = true;
                break;
            }
        }
    }
    if let Some(saved) = best {
        restore(model, &saved)?;
    }
    Ok(log)
}

/// Mean per-case Dice for one centre and mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DiceSummary {
    pub tumor: f64,
    pub lymph: f64,
    pub average: f64,
    pub cases: usize,
}

/// `center -> mode -> Dice`.
pub type DiceTable = BTreeMap<String, BTreeMap<Mode, DiceSummary>>;

pub fn evaluate(bundle: &Bundle, cases: &[Case], modes: &[Mode]) -> CliResult<DiceTable> {
    for &m in modes {
        bundle.check_mode(m)?;
    }
    let mut by_center: BTreeMap<String, Vec<&Case>> = BTreeMap::new();
    for c in cases {
        by_center.entry(c.center.clone()).or_default().push(c);
    }
    let mut table = DiceTable::new();
    for (center, list) in by_center {
        let row = table.entry(center).or_default();
        for &mode in modes {
            let (mut t, mut l) = (0.0, 0.0);
            for case in &list {
                let probs = bundle.predict(case, mode)?;
                if probs.max_row_error() > 1e-6 {
                    return Err(CliError::Numeric(format!("{}: invalid probabilities in mode {mode}", case.id)));
                }
                let pred = probs.argmax();
                t += dice_score(&pred.data, &case.mask.data, TUMOR);
                l += dice_score(&pred.data, &case.mask.data, LYMPH);
            }
            let n = list.len() as f64;
            let (tumor, lymph) = (t / n, l / n);
            row.insert(
                mode,
                DiceSummary {
                    tumor,
                    lymph,
                    average: 0.5 * (tumor + lymph),
                    cases: list.len(),
                },
            );
        }
    }
    Ok(table)
}
