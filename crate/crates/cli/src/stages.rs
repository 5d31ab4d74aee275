//! The six stages of the protocol.

use std::path::{Path, PathBuf};
use std::time::Instant;

use pemma_core::adaptation::{
    add_pet_paths, early_fusion_ledger, inject_adapters, late_fusion_ledger, param_report, set_trainable, ParamLedger,
};
use pemma_core::backbone::{Model, Stem};
use pemma_core::data::{Case, Manifest, Modality, Mode, Part, Split};
use pemma_core::fusion::{early_fusion_from, FusionWeights, LateFusion};
use pemma_core::tensor::{ParamGroup, Rng};

use crate::bundle::Bundle;
use crate::config::{Method, RunConfig, Stage};
use crate::error::{CliError, CliResult};
use crate::outputs::*;
use crate::train::{evaluate, train_segmentation, DiceTable};

/// State shared by every stage of one invocation.
pub struct RunContext {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub run: String,
    pub manifest: Manifest,
    started: Instant,
}

/// What a stage hands back for the run record.
pub(crate) struct Outcome {
    pub label: String,
    pub train_modality: String,
    pub checkpoints: Vec<String>,
    pub metric_files: Vec<String>,
    pub base_digest: Option<String>,
}

impl Outcome {
    pub(crate) fn new(label: impl Into<String>, train_modality: impl Into<String>) -> Self {
        Outcome {
            label: label.into(),
            train_modality: train_modality.into(),
            checkpoints: Vec::new(),
            metric_files: Vec::new(),
            base_digest: None,
        }
    }
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    Ok(std::path::absolute(p)?)
}

/// Runs a resolved configuration and writes its run directory.
pub fn run(cfg: RunConfig) -> CliResult<RunRecord> {
    let started = Instant::now();
    let out = absolute(cfg.out_dir())?;
    std::fs::create_dir_all(&out)?;
    let manifest = cfg.load_manifest()?;

    // the snapshot points at copies inside the run directory
    let mut snap = cfg.clone();
    snap.out = Some(out.clone());
    snap.from = snap.from.as_deref().map(absolute).transpose()?;
    snap.report.runs = snap.report.runs.iter().map(|p| absolute(p)).collect::<CliResult<_>>()?;
    snap.manifest = Some(out.join(MANIFEST_COPY));
    let manifest_text = manifest.to_toml_string()?;
    std::fs::write(out.join(MANIFEST_COPY), manifest_text)?;
    std::fs::write(out.join(CONFIG_SNAPSHOT), snap.to_toml_string()?)?;

    let run = out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let ctx = RunContext {
        cfg: snap,
        out,
        run,
        manifest,
        started,
    };
    let outcome = match ctx.cfg.stage() {
        Stage::Pretrain => pretrain(&ctx)?,
        Stage::Adapt => adapt(&ctx)?,
        Stage::Continual => continual(&ctx)?,
        Stage::Eval => eval(&ctx)?,
        Stage::Prognosis => crate::prognosis::prognosis(&ctx)?,
        Stage::Report => crate::report::report(&ctx)?,
    };
    let record = RunRecord {
        run: ctx.run.clone(),
        stage: ctx.cfg.stage(),
        label: outcome.label,
        train_modality: outcome.train_modality,
        seed: ctx.cfg.seed,
        from: ctx.cfg.from.as_ref().map(|p| p.display().to_string()),
        config: CONFIG_SNAPSHOT.into(),
        checkpoints: outcome.checkpoints,
        metric_files: outcome.metric_files,
        wall_clock_s: ctx.started.elapsed().as_secs_f64(),
        base_digest: outcome.base_digest,
    };
    write_json(&ctx.out.join(RUN_RECORD), &record)?;
    Ok(record)
}

fn cases(m: &Manifest, centers: &[String], part: Part) -> CliResult<Vec<Case>> {
    let mut out = Vec::new();
    for c in centers {
        out.extend(m.cases(c, part, true)?);
    }
    Ok(out)
}

fn split_centers(m: &Manifest, split: Split) -> CliResult<Vec<String>> {
    let names: Vec<String> = m.centers_in(split).iter().map(|c| c.name.clone()).collect();
    if names.is_empty() {
        return Err(CliError::config(format!("manifest has no `{split}` centres")));
    }
    Ok(names)
}

/// Holds out the last `n` training cases for validation.
fn hold_out(mut train: Vec<Case>, n: usize) -> CliResult<(Vec<Case>, Vec<Case>)> {
    if train.len() <= n {
        return Err(CliError::config(format!("{} training cases cannot spare {n} for validation", train.len())));
    }
    let val = train.split_off(train.len() - n);
    Ok((train, val))
}

fn base_digest(m: &Model<f32>) -> String {
    m.params.digest(|p| p.group == ParamGroup::Base)
}

impl RunContext {
    fn rng(&self, stream: u64) -> Rng {
        Rng::new(self.cfg.seed).fork(stream)
    }

    /// Evaluates the configured modes the model supports and writes the
    /// metric files.
    fn evaluate_into(&self, bundle: &Bundle, cases: &[Case], strict: bool, outcome: &mut Outcome) -> CliResult<DiceTable> {
        let modes: Vec<Mode> = if strict {
            self.cfg.modes.clone()
        } else {
            let ok = bundle.modes();
            self.cfg.modes.iter().copied().filter(|m| ok.contains(m)).collect()
        };
        let table = evaluate(bundle, cases, &modes)?;
        write_metrics(&self.out.join(METRICS_CSV), &dice_rows(&self.run, &table))?;
        write_json(
            &self.out.join(SUMMARY_JSON),
            &Summary::new(&self.run, self.cfg.stage(), &outcome.label, &table),
        )?;
        outcome.metric_files.extend([METRICS_CSV.to_string(), SUMMARY_JSON.to_string()]);
        Ok(table)
    }

    fn previous(&self, allowed: &[Stage]) -> CliResult<(PathBuf, RunRecord)> {
        let dir = self.cfg.from.clone().expect("validated");
        let rec = RunRecord::load(&dir)?;
        if !allowed.contains(&rec.stage) {
            let want: Vec<&str> = allowed.iter().map(|s| s.tag()).collect();
            return Err(CliError::config(format!(
                "stage `{}` needs a run from {}, but {} is a `{}` run",
                self.cfg.stage(),
                want.join(" or "),
                dir.display(),
                rec.stage
            )));
        }
        Ok((dir, rec))
    }
}

fn pretrain(ctx: &RunContext) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    let plan = cfg.train_plan();
    let centers = split_centers(&ctx.manifest, Split::Pretrain)?;
    let (train, val) = hold_out(cases(&ctx.manifest, &centers, Part::Train)?, plan.val_cases)?;
    let mut model = Model::<f32>::new(cfg.model, Stem::Uni { modality: Modality::Ct }, &mut ctx.rng(1))?;
    let log = train_segmentation(&mut model, &train, &val, &plan, &mut ctx.rng(2))?;
    std::fs::write(ctx.out.join(TRAIN_LOG), log.to_csv())?;

    let mut outcome = Outcome::new("base", "ct");
    outcome.base_digest = Some(base_digest(&model));
    let bundle = Bundle::Single(model);
    outcome.checkpoints = bundle.save(&ctx.out)?;
    outcome.metric_files.push(TRAIN_LOG.into());
    let test = cases(&ctx.manifest, &centers, Part::Test)?;
    ctx.evaluate_into(&bundle, &test, false, &mut outcome)?;
    Ok(outcome)
}

fn adapt(ctx: &RunContext) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    let (dir, _) = ctx.previous(&[Stage::Pretrain])?;
    let base = Bundle::load(&dir)?.single()?.clone();
    let plan = cfg.train_plan();
    let centers = split_centers(&ctx.manifest, Split::Adapt)?;
    let all = cases(&ctx.manifest, &centers, Part::Train)?;
    if let Some(c) = all.iter().find(|c| c.pet.is_none()) {
        return Err(CliError::Data(format!("adaptation case {} has no PET volume", c.id)));
    }
    let (train, val) = hold_out(all, plan.val_cases)?;
    let before = base_digest(&base);

    let (bundle, report, modality, log) = match cfg.method {
        Method::PemmaLora | Method::PemmaDora => {
            let mut model = base;
            add_pet_paths(&mut model, cfg.adaptation.pet_init, &mut ctx.rng(3))?;
            model.arch.routing = cfg.adaptation.routing;
            inject_adapters(&mut model, &cfg.adaptation.adaptation(cfg.method), &mut ctx.rng(4))?;
            set_trainable(&mut model, crate::config::Scope::Wide.groups());
            let log = train_segmentation(&mut model, &train, &val, &plan, &mut ctx.rng(5))?;
            if base_digest(&model) != before {
                return Err(CliError::Internal("frozen weights changed during adaptation".into()));
            }
            let report = param_report(cfg.method.tag(), &ParamLedger::from_store(&model.params));
            (Bundle::Single(model), report, "ct+pet", log)
        }
        Method::Early => {
            let zero_fill = cfg.early.zero_fill;
            let mut model = early_fusion_from(&base, cfg.adaptation.pet_init, zero_fill, &mut ctx.rng(3))?;
            let log = train_segmentation(&mut model, &train, &val, &plan, &mut ctx.rng(5))?;
            let report = param_report("early", &early_fusion_ledger(model.config()));
            (Bundle::Single(model), report, "ctpet", log)
        }
        Method::Late => {
            let mut pet = Model::<f32>::new(*base.config(), Stem::Uni { modality: Modality::Pet }, &mut ctx.rng(3))?;
            let log = train_segmentation(&mut pet, &train, &val, &plan, &mut ctx.rng(5))?;
            let report = param_report("late", &late_fusion_ledger(pet.config()));
            let pair = LateFusion::new(base, pet, FusionWeights::new(cfg.late.w_c)?)?;
            (Bundle::Late(pair), report, "ct|pet", log)
        }
    };
    std::fs::write(ctx.out.join(TRAIN_LOG), log.to_csv())?;
    write_json(&ctx.out.join(PARAM_REPORT), &report)?;

    let mut outcome = Outcome::new(cfg.method.tag(), modality);
    if let Bundle::Single(m) = &bundle {
        outcome.base_digest = Some(base_digest(m));
    }
    outcome.checkpoints = bundle.save(&ctx.out)?;
    outcome.metric_files.extend([TRAIN_LOG.to_string(), PARAM_REPORT.to_string()]);
    let test = cases(&ctx.manifest, &centers, Part::Test)?;
    ctx.evaluate_into(&bundle, &test, false, &mut outcome)?;
    Ok(outcome)
}

fn continual(ctx: &RunContext) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    let (dir, prev) = ctx.previous(&[Stage::Adapt, Stage::Continual])?;
    let mut model = Bundle::load(&dir)?.single()?.clone();
    if model.arch.peft.is_none() {
        return Err(CliError::config(format!("{} holds no low-rank adapters to fine-tune", dir.display())));
    }
    let center = cfg.continual.center.clone().expect("validated");
    ctx.manifest.center(&center)?;
    let plan = cfg.train_plan();
    let (train, val) = hold_out(ctx.manifest.cases(&center, Part::Train, true)?, plan.val_cases)?;

    let before = base_digest(&model);
    set_trainable(&mut model, cfg.scope.groups());
    let log = train_segmentation(&mut model, &train, &val, &plan, &mut ctx.rng(6))?;
    if base_digest(&model) != before {
        return Err(CliError::Internal("frozen weights changed during continual fine-tuning".into()));
    }
    std::fs::write(ctx.out.join(TRAIN_LOG), log.to_csv())?;
    let report = param_report(&prev.label, &ParamLedger::from_store(&model.params));
    write_json(&ctx.out.join(PARAM_REPORT), &report)?;

    let modality = match cfg.continual.train_modes {
        Some(Mode::CtPet) => "ct+pet",
        Some(Mode::Pet) => "pet",
        _ => "ct",
    };
    let mut outcome = Outcome::new(format!("{}+{center}", prev.label), modality);
    outcome.base_digest = Some(before);
    let bundle = Bundle::Single(model);
    outcome.checkpoints = bundle.save(&ctx.out)?;
    outcome.metric_files.extend([TRAIN_LOG.to_string(), PARAM_REPORT.to_string()]);

    let mut eval_centers = cfg.continual.eval_centers.clone();
    if eval_centers.is_empty() {
        eval_centers.push(center);
        eval_centers.extend(split_centers(&ctx.manifest, Split::Adapt)?);
    }
    let test = cases(&ctx.manifest, &eval_centers, Part::Test)?;
    ctx.evaluate_into(&bundle, &test, true, &mut outcome)?;
    Ok(outcome)
}

fn eval(ctx: &RunContext) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    let (dir, prev) = ctx.previous(&[Stage::Pretrain, Stage::Adapt, Stage::Continual])?;
    let bundle = Bundle::load(&dir)?;
    for &m in &cfg.modes {
        bundle.check_mode(m)?;
    }
    let centers = if cfg.eval.centers.is_empty() {
        split_centers(&ctx.manifest, Split::Adapt)?
    } else {
        cfg.eval.centers.clone()
    };
    let test = cases(&ctx.manifest, &centers, Part::Test)?;
    let mut outcome = Outcome::new(prev.label, prev.train_modality);
    outcome.base_digest = prev.base_digest;
    ctx.evaluate_into(&bundle, &test, true, &mut outcome)?;
    if dir.join(PARAM_REPORT).exists() {
        std::fs::copy(dir.join(PARAM_REPORT), ctx.out.join(PARAM_REPORT))?;
        outcome.metric_files.push(PARAM_REPORT.into());
    }
    Ok(outcome)
}

pub(crate) fn previous_model(ctx: &RunContext) -> CliResult<(Model<f32>, RunRecord)> {
    let (dir, prev) = ctx.previous(&[Stage::Adapt, Stage::Continual])?;
    let model = Bundle::load(&dir)?.single()?.clone();
    Ok((model, prev))
}

pub(crate) fn prognosis_cases(ctx: &RunContext, part: Part) -> CliResult<Vec<Case>> {
    let centers = split_centers(&ctx.manifest, Split::Prognosis)?;
    cases(&ctx.manifest, &centers, part)
}
