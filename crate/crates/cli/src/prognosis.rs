//! Survival prediction from frozen encoder features: CT, CT+PET, and
//! CT+PET with the clinical record.

use std::collections::BTreeMap;

use pemma_core::backbone::{pooled_features, Graph, PrognosisConfig, PrognosisHead};
use pemma_core::data::{Case, Mode, Part, EHR_FEATURE_DIM};
use pemma_core::objectives::{
    antolini_cindex, deephit_loss, discretize_times, survival_curves, AdamW, AdamWConfig, CIndex, EarlyStopping,
    SurvivalRecord, TimeBins,
};
use pemma_core::tensor::{Param, Rng, Tape};
use serde::{Deserialize, Serialize};

use crate::config::{PrognosisSection, Setting};
use crate::error::{CliError, CliResult};
use crate::outputs::{write_json, write_metrics, MetricRow, METRICS_CSV, PROGNOSIS_JSON};
use crate::stages::{previous_model, prognosis_cases, Outcome, RunContext};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub setting: Setting,
    pub cindex: f64,
    pub comparable_pairs: usize,
    /// C-index of the same head before training.
    pub untrained_cindex: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrognosisReport {
    pub train_cases: usize,
    pub test_cases: usize,
    pub bin_edges: Vec<f64>,
    pub results: Vec<SettingResult>,
}

/// Per-case inputs of the head for one setting.
struct Inputs {
    rows: Vec<f32>,
    width: usize,
    ehr: Option<Vec<f32>>,
}

fn records(cases: &[Case], bins: &TimeBins) -> CliResult<Vec<SurvivalRecord>> {
    cases
        .iter()
        .map(|c| {
            let mut r = c
                .survival
                .clone()
                .ok_or_else(|| CliError::Data(format!("case {} has no survival label", c.id)))?;
            r.bin = Some(bins.bin_of(r.time));
            Ok(r)
        })
        .collect()
}

/// Column means and standard deviations of row-major features.
fn moments(rows: &[f32], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (rows.len() / width) as f64;
    let mut mean = vec![0.0; width];
    for r in rows.chunks(width) {
        r.iter().zip(&mut mean).for_each(|(v, m)| *m += *v as f64 / n);
    }
    let mut var = vec![0.0; width];
    for r in rows.chunks(width) {
        r.iter().zip(&mean).zip(&mut var).for_each(|((v, m), s)| *s += (*v as f64 - m).powi(2) / n);
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(1e-6)).collect())
}

fn standardize(rows: &[f32], width: usize, mean: &[f64], sd: &[f64]) -> Vec<f32> {
    rows.chunks(width)
        .flat_map(|r| r.iter().enumerate().map(|(k, v)| ((*v as f64 - mean[k]) / sd[k]) as f32))
        .collect()
}

fn ehr_rows(cases: &[Case]) -> CliResult<Vec<f32>> {
    let mut out = Vec::with_capacity(cases.len() * EHR_FEATURE_DIM);
    for c in cases {
        let e = c.ehr.as_ref().ok_or_else(|| CliError::Data(format!("case {} has no clinical record", c.id)))?;
        out.extend(e.features());
    }
    Ok(out)
}

fn head_pmf(head: &PrognosisHead<f64>, x: &Inputs) -> CliResult<Vec<f64>> {
    let mut tape = Tape::new();
    let mut g = Graph::frozen(&mut tape, &head.params);
    let p = g.input(&x.rows, x.width)?;
    let e = x.ehr.as_ref().map(|e| g.input(e, EHR_FEATURE_DIM)).transpose()?;
    let pmf = head.forward(&mut g, p, e)?;
    Ok(tape.value(pmf).to_vec())
}

fn cindex(head: &PrognosisHead<f64>, x: &Inputs, recs: &[SurvivalRecord]) -> CliResult<CIndex> {
    let pmf = head_pmf(head, x)?;
    Ok(antolini_cindex(&survival_curves(&pmf, head.config.bins), recs)?)
}

fn subset(x: &Inputs, range: std::ops::Range<usize>) -> Inputs {
    Inputs {
        rows: x.rows[range.start * x.width..range.end * x.width].to_vec(),
        width: x.width,
        ehr: x.ehr.as_ref().map(|e| e[range.start * EHR_FEATURE_DIM..range.end * EHR_FEATURE_DIM].to_vec()),
    }
}

/// Full-batch DeepHit training with early stopping on a held-out tail of
/// the training cohort. Returns the number of epochs run.
fn fit(
    head: &mut PrognosisHead<f64>,
    x: &Inputs,
    recs: &[SurvivalRecord],
    sec: &PrognosisSection,
) -> CliResult<usize> {
    let n = recs.len();
    let n_val = ((n as f64) * sec.val_fraction).round() as usize;
    let n_fit = n - n_val;
    let (fit_x, val_x) = (subset(x, 0..n_fit), subset(x, n_fit..n));
    let (fit_r, val_r) = (&recs[..n_fit], &recs[n_fit..]);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut stopper = EarlyStopping::new(sec.patience);
    let mut best: Option<Vec<Param<f64>>> = None;
    let mut epochs = 0;
    for _ in 0..sec.epochs {
        epochs += 1;
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &head.params, true);
        let p = g.input(&fit_x.rows, fit_x.width)?;
        let e = fit_x.ehr.as_ref().map(|e| g.input(e, EHR_FEATURE_DIM)).transpose()?;
        let pmf = head.forward(&mut g, p, e)?;
        let loss = deephit_loss(g.tape, pmf, fit_r, &sec.deephit)?;
        let value = g.tape.scalar(loss.total);
        if !value.is_finite() {
            return Err(CliError::Numeric(format!("DeepHit loss is {value}")));
        }
        let grads = g.tape.backward(loss.total)?;
        let grads = g.param_grads(&grads);
        opt.step(&mut head.params, &grads, sec.lr)?;

        if n_val >= 2 {
            let mut tape = Tape::new();
            let mut g = Graph::frozen(&mut tape, &head.params);
            let p = g.input(&val_x.rows, val_x.width)?;
            let e = val_x.ehr.as_ref().map(|e| g.input(e, EHR_FEATURE_DIM)).transpose()?;
            let pmf = head.forward(&mut g, p, e)?;
            let v = deephit_loss(g.tape, pmf, val_r, &sec.deephit)?;
            if stopper.observe(g.tape.scalar(v.total)) {
                best = Some(head.params.iter().cloned().collect());
            } else if stopper.should_stop() {
                break;
            }
        }
    }
    if let Some(saved) = best {
        for p in saved {
            head.params.get_mut(&p.name)?.value = p.value;
        }
    }
    Ok(epochs)
}

pub(crate) fn prognosis(ctx: &RunContext) -> CliResult<Outcome> {
    let cfg = &ctx.cfg;
    let sec = &cfg.prognosis;
    let (model, prev) = previous_model(ctx)?;
    let train = prognosis_cases(ctx, Part::Train)?;
    let test = prognosis_cases(ctx, Part::Test)?;
    if train.len() < 4 || test.len() < 2 {
        return Err(CliError::config("the prognosis cohort is too small"));
    }
    let times = train
        .iter()
        .map(|c| c.survival.as_ref().map(|s| s.time))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| CliError::Data("missing survival labels in the prognosis cohort".into()))?;
    let (bins, _) = discretize_times(&times, sec.bins)?;
    let train_r = records(&train, &bins)?;
    let test_r = records(&test, &bins)?;

    let mut features: BTreeMap<Mode, (Vec<f32>, Vec<f32>)> = BTreeMap::new();
    for s in &sec.settings {
        let mode = s.mode();
        if features.contains_key(&mode) {
            continue;
        }
        let pool = |cases: &[Case]| -> CliResult<Vec<f32>> {
            let mut out = Vec::new();
            for c in cases {
                out.extend(pooled_features(&model, c, mode)?);
            }
            Ok(out)
        };
        features.insert(mode, (pool(&train)?, pool(&test)?));
    }
    let d = model.config().dim;
    let (ehr_train, ehr_test) = (ehr_rows(&train)?, ehr_rows(&test)?);

    let mut results = Vec::new();
    let mut rows = Vec::new();
    for (i, &setting) in sec.settings.iter().enumerate() {
        let (ftr, fte) = &features[&setting.mode()];
        let (mean, sd) = moments(ftr, d);
        let ehr = setting.uses_ehr();
        let x_train = Inputs {
            rows: standardize(ftr, d, &mean, &sd),
            width: d,
            ehr: ehr.then(|| ehr_train.clone()),
        };
        let x_test = Inputs {
            rows: standardize(fte, d, &mean, &sd),
            width: d,
            ehr: ehr.then(|| ehr_test.clone()),
        };
        let head_cfg = PrognosisConfig {
            hidden: sec.hidden,
            bins: sec.bins,
            use_ehr: ehr,
        };
        let mut head = PrognosisHead::<f64>::new(d, head_cfg, &mut Rng::new(cfg.seed).fork(100 + i as u64))?;
        let untrained = cindex(&head, &x_test, &test_r)?;
        let epochs = fit(&mut head, &x_train, &train_r, sec)?;
        let trained = cindex(&head, &x_test, &test_r)?;
        for (metric, value) in [
            ("cindex", trained.value),
            ("cindex_untrained", untrained.value),
            ("comparable_pairs", trained.comparable as f64),
        ] {
            rows.push(MetricRow {
                run: ctx.run.clone(),
                center: test[0].center.clone(),
                mode: setting.tag().into(),
                class: "survival".into(),
                metric: metric.into(),
                value,
            });
        }
        results.push(SettingResult {
            setting,
            cindex: trained.value,
            comparable_pairs: trained.comparable,
            untrained_cindex: untrained.value,
            epochs,
        });
    }
    let report = PrognosisReport {
        train_cases: train.len(),
        test_cases: test.len(),
        bin_edges: bins.edges.clone(),
        results,
    };
    write_json(&ctx.out.join(PROGNOSIS_JSON), &report)?;
    write_metrics(&ctx.out.join(METRICS_CSV), &rows)?;

    let mut outcome = Outcome::new(prev.label, prev.train_modality);
    outcome.base_digest = prev.base_digest;
    outcome.metric_files = vec![METRICS_CSV.into(), PROGNOSIS_JSON.into()];
    Ok(outcome)
}
