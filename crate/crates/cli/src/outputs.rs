//! Files written into a run directory.

use std::collections::BTreeMap;
use std::path::Path;

use pemma_core::data::Mode;
use serde::{Deserialize, Serialize};

use crate::config::Stage;
use crate::error::{CliError, CliResult};
use crate::train::{DiceSummary, DiceTable};

pub const RUN_RECORD: &str = "run_record.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const MANIFEST_COPY: &str = "manifest.toml";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const PARAM_REPORT: &str = "param_report.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const PROGNOSIS_JSON: &str = "prognosis.json";

/// One line of `metrics.csv`. The column order is fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run: String,
    pub center: String,
    pub mode: String,
    pub class: String,
    pub metric: String,
    pub value: f64,
}

pub fn dice_rows(run: &str, table: &DiceTable) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (center, modes) in table {
        for (mode, d) in modes {
            for (class, value) in [("tumor", d.tumor), ("lymph", d.lymph), ("average", d.average)] {
                rows.push(MetricRow {
                    run: run.to_string(),
                    center: center.clone(),
                    mode: mode.tag().to_string(),
                    class: class.to_string(),
                    metric: "dice".into(),
                    value,
                });
            }
        }
    }
    rows
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Machine-readable companion of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub run: String,
    pub stage: Stage,
    pub label: String,
    /// `center -> mode -> Dice`
    pub dice: BTreeMap<String, BTreeMap<Mode, DiceEntry>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceEntry {
    pub tumor: f64,
    pub lymph: f64,
    pub average: f64,
    pub cases: usize,
}

impl From<DiceSummary> for DiceEntry {
    fn from(d: DiceSummary) -> Self {
        DiceEntry {
            tumor: d.tumor,
            lymph: d.lymph,
            average: d.average,
            cases: d.cases,
        }
    }
}

impl Summary {
    pub fn new(run: &str, stage: Stage, label: &str, table: &DiceTable) -> Self {
        let dice = table
            .iter()
            .map(|(c, m)| (c.clone(), m.iter().map(|(&k, &v)| (k, v.into())).collect()))
            .collect();
        Summary {
            run: run.to_string(),
            stage,
            label: label.to_string(),
            dice,
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        read_json(path)
    }
}

/// Everything needed to understand and repeat a run. File names are
/// relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: String,
    pub stage: Stage,
    /// Method label used by reports, e.g. `base`, `pemma_dora`,
    /// `pemma_lora+F`.
    pub label: String,
    /// Modalities seen in training, e.g. `ct`, `ct+pet`.
    pub train_modality: String,
    pub seed: u64,
    pub from: Option<String>,
    pub config: String,
    pub checkpoints: Vec<String>,
    pub metric_files: Vec<String>,
    pub wall_clock_s: f64,
    /// Digest of the frozen weights, when the run holds a single model.
    pub base_digest: Option<String>,
}

impl RunRecord {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(RUN_RECORD);
        if !path.exists() {
            return Err(CliError::config(format!("{} is not a run directory (no {RUN_RECORD})", dir.display())));
        }
        read_json(&path)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}
