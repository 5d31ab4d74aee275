//! Merges run directories into one method × modality × class table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use pemma_core::adaptation::ParamReport;
use pemma_core::data::Mode;

use crate::error::{CliError, CliResult};
use crate::outputs::{read_json, read_metrics, RunRecord, METRICS_CSV, PARAM_REPORT};
use crate::stages::{Outcome, RunContext};

pub const TABLE_CSV: &str = "table.csv";
pub const TABLE_MD: &str = "table.md";
/// Rendered in place of a value no run produced.
pub const MISSING: &str = "n/a";

const CLASSES: [&str; 3] = ["tumor", "lymph", "average"];

/// `(label, train modality, centre)`
type RowKey = (String, String, String);

#[derive(Debug, Default)]
struct Row {
    /// `(infer mode, class) -> (value, run)`
    cells: BTreeMap<(String, String), (f64, String)>,
    param_ratio: Option<f64>,
}

/// Dice rows of every run; a second run reporting a different value for
/// the same cell is an error.
fn collect(ctx: &RunContext) -> CliResult<(BTreeMap<RowKey, Row>, Vec<(String, String, f64)>)> {
    let mut rows: BTreeMap<RowKey, Row> = BTreeMap::new();
    let mut survival = Vec::new();
    for dir in &ctx.cfg.report.runs {
        let rec = RunRecord::load(dir)?;
        let metrics_path = dir.join(METRICS_CSV);
        if !metrics_path.exists() {
            return Err(CliError::Data(format!("{} has no {METRICS_CSV}", dir.display())));
        }
        let ratio = if dir.join(PARAM_REPORT).exists() {
            Some(read_json::<ParamReport>(&dir.join(PARAM_REPORT))?.trainable_ratio)
        } else {
            None
        };
        for m in read_metrics(&metrics_path)? {
            if m.metric == "cindex" {
                survival.push((rec.label.clone(), m.mode.clone(), m.value));
                continue;
            }
            if m.metric != "dice" {
                continue;
            }
            let key = (rec.label.clone(), rec.train_modality.clone(), m.center.clone());
            let row = rows.entry(key).or_default();
            if let (Some(a), Some(b)) = (row.param_ratio, ratio) {
                if a != b {
                    return Err(CliError::config(format!("runs disagree on the parameter ratio of `{}`", rec.label)));
                }
            }
            row.param_ratio = row.param_ratio.or(ratio);
            let cell = (m.mode.clone(), m.class.clone());
            match row.cells.get(&cell) {
                Some((v, other)) if *v != m.value => {
                    return Err(CliError::config(format!(
                        "conflicting duplicate runs `{other}` and `{}` for {} / {} / {} / {}",
                        rec.run, rec.label, m.center, m.mode, m.class
                    )));
                }
                Some(_) => {}
                None => {
                    row.cells.insert(cell, (m.value, rec.run.clone()));
                }
            }
        }
    }
    Ok((rows, survival))
}

fn fmt_value(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| MISSING.to_string())
}

pub(crate) fn report(ctx: &RunContext) -> CliResult<Outcome> {
    let (rows, survival) = collect(ctx)?;
    let cols: Vec<(String, String)> = Mode::ALL
        .iter()
        .flat_map(|m| CLASSES.iter().map(move |c| (m.tag().to_string(), c.to_string())))
        .collect();

    let mut w = csv::Writer::from_path(ctx.out.join(TABLE_CSV))?;
    let mut header = vec!["method".to_string(), "train".into(), "center".into()];
    header.extend(cols.iter().map(|(m, c)| format!("{m}/{c}")));
    header.push("param_ratio".into());
    w.write_record(&header)?;

    let mut md = String::new();
    writeln!(md, "| {} |", header.join(" | ")).unwrap();
    writeln!(md, "|{}", "---|".repeat(header.len())).unwrap();
    for ((label, train, center), row) in &rows {
        let mut rec = vec![label.clone(), train.clone(), center.clone()];
        rec.extend(cols.iter().map(|k| fmt_value(row.cells.get(k).map(|c| c.0))));
        rec.push(fmt_value(row.param_ratio));
        w.write_record(&rec)?;
        writeln!(md, "| {} |", rec.join(" | ")).unwrap();
    }
    w.flush()?;
    if !survival.is_empty() {
        writeln!(md, "\n| method | setting | C-index |\n|---|---|---|").unwrap();
        for (label, setting, v) in &survival {
            writeln!(md, "| {label} | {setting} | {v:.4} |").unwrap();
        }
    }
    std::fs::write(ctx.out.join(TABLE_MD), md)?;

    let mut outcome = Outcome::new("report", "-");
    outcome.metric_files = vec![TABLE_CSV.into(), TABLE_MD.into()];
    Ok(outcome)
}
