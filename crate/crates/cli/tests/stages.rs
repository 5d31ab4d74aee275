//! End-to-end runs of every stage on a tiny model and a tiny manifest.

use std::path::{Path, PathBuf};
use std::process::Command;

use pemma_cli::outputs::{read_metrics, MetricRow, METRICS_CSV, PARAM_REPORT};
use pemma_cli::report::{MISSING, TABLE_CSV, TABLE_MD};
use pemma_cli::{execute, CliError, Overrides, RunRecord, Stage};
use pemma_core::adaptation::ParamReport;
use pemma_core::data::{Manifest, Split};
use tempfile::TempDir;

const MODEL: &str = r#"
[model]
side = 16
patch = 8
dim = 16
heads = 2
depth = 4
mlp_ratio = 2
dec_channels = 4
skip_channels = 4
head_hidden = 8
"#;

fn tiny_manifest() -> Manifest {
    let mut m = Manifest::desk_default();
    m.phantom.side = 32;
    m.phantom.tumor_radius = [3.0, 4.5];
    m.phantom.lymph_radius = [2.0, 3.0];
    for c in &mut m.centers {
        (c.train, c.test) = match c.split {
            Split::Prognosis => (16, 10),
            _ => (4, 2),
        };
    }
    m
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("manifest.toml"), tiny_manifest().to_toml_string().unwrap()).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Writes `<name>.toml` with the shared header plus `extra`.
    fn config(&self, name: &str, extra: &str) -> PathBuf {
        self.config_with(name, extra, "steps = 4\nval_every = 2\nval_patches = 1")
    }

    fn config_with(&self, name: &str, extra: &str, train: &str) -> PathBuf {
        let text = format!(
            "schema_version = 1\nmanifest = \"manifest.toml\"\nout = \"{name}\"\n{extra}\n[train]\n{train}\n{MODEL}"
        );
        let path = self.path(&format!("{name}.toml"));
        std::fs::write(&path, text).unwrap();
        path
    }

    fn run(&self, stage: Stage, name: &str, extra: &str) -> Result<RunRecord, CliError> {
        execute(stage, &self.config(name, extra), &Overrides::default())
    }

    fn pretrain(&self, name: &str) -> RunRecord {
        self.run(Stage::Pretrain, name, "").unwrap()
    }

    fn bin(&self, args: &[&str]) -> i32 {
        Command::new(env!("CARGO_BIN_EXE_pemma"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
            .status
            .code()
            .unwrap()
    }
}

fn metrics(dir: &Path) -> Vec<MetricRow> {
    read_metrics(&dir.join(METRICS_CSV)).unwrap()
}

#[test]
fn pretraining_is_deterministic_in_the_seed() {
    let f = Fixture::new();
    f.pretrain("a");
    f.pretrain("b");
    let read = |run: &str, file: &str| std::fs::read(f.path(run).join(file)).unwrap();
    assert_eq!(read("a", "base.ckpt"), read("b", "base.ckpt"));
    assert_eq!(read("a", "train_log.csv"), read("b", "train_log.csv"));
    let strip = |rows: Vec<MetricRow>| rows.into_iter().map(|r| (r.center, r.mode, r.class, r.value)).collect::<Vec<_>>();
    assert_eq!(strip(metrics(&f.path("a"))), strip(metrics(&f.path("b"))));

    let c = execute(
        Stage::Pretrain,
        &f.config("c", ""),
        &Overrides {
            seed: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(c.seed, 2);
    assert_ne!(read("a", "base.ckpt"), read("c", "base.ckpt"));
}

#[test]
fn training_lowers_the_loss() {
    let f = Fixture::new();
    let cfg = f.config_with("long", "", "steps = 60\nlr = 3e-3\nval_every = 100");
    execute(Stage::Pretrain, &cfg, &Overrides::default()).unwrap();
    let log = std::fs::read_to_string(f.path("long").join("train_log.csv")).unwrap();
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert_eq!(losses.len(), 60);
    assert!(mean(&losses[50..]) < mean(&losses[..10]), "{losses:?}");
}

#[test]
fn full_pipeline_and_report() {
    let f = Fixture::new();
    let base = f.pretrain("base");
    assert_eq!(base.label, "base");
    assert!(metrics(&f.path("base")).iter().all(|r| r.mode == "ct"));

    let lora = f.run(Stage::Adapt, "lora", "from = \"base\"").unwrap();
    assert_eq!(lora.base_digest, base.base_digest, "adaptation touched the frozen weights");
    let modes: Vec<String> = metrics(&f.path("lora")).into_iter().map(|r| r.mode).collect();
    for m in ["ct", "pet", "ctpet"] {
        assert!(modes.iter().any(|x| x == m));
    }
    assert!(f.path("lora").join("delta.ckpt").exists());

    let dora = f.run(Stage::Adapt, "dora", "from = \"base\"\nmethod = \"pemma_dora\"").unwrap();
    assert_eq!(dora.label, "pemma_dora");
    let late = f.run(Stage::Adapt, "late", "from = \"base\"\nmethod = \"late\"").unwrap();
    let early = f.run(Stage::Adapt, "early", "from = \"base\"\nmethod = \"early\"").unwrap();
    assert_eq!(late.train_modality, "ct|pet");
    assert_eq!(early.train_modality, "ctpet");

    let ratio = |run: &str| -> ParamReport {
        serde_json::from_str(&std::fs::read_to_string(f.path(run).join(PARAM_REPORT)).unwrap()).unwrap()
    };
    assert_eq!(ratio("late").relative_size, 2.0);
    assert!(ratio("lora").trainable_ratio < ratio("early").trainable_ratio);

    let cont = f
        .run(Stage::Continual, "cont", "from = \"lora\"\n[continual]\ncenter = \"F\"")
        .unwrap();
    assert_eq!(cont.label, "pemma_lora+F");
    assert_eq!(cont.base_digest, base.base_digest);
    let centers: Vec<String> = metrics(&f.path("cont")).into_iter().map(|r| r.center).collect();
    assert!(centers.contains(&"F".to_string()) && centers.contains(&"E".to_string()));

    let ev = f.run(Stage::Eval, "ev", "from = \"cont\"\nmodes = [\"ctpet\"]").unwrap();
    assert_eq!(ev.label, "pemma_lora+F");
    assert!(metrics(&f.path("ev")).iter().all(|r| r.mode == "ctpet" && r.center == "E"));

    let prog = f.run(Stage::Prognosis, "prog", "from = \"lora\"\n[prognosis]\nepochs = 20").unwrap();
    let rows = metrics(&f.path("prog"));
    for s in ["ct", "cp", "cpt"] {
        let c = rows.iter().find(|r| r.mode == s && r.metric == "cindex").unwrap();
        assert!((0.0..=1.0).contains(&c.value));
    }
    assert_eq!(prog.label, "pemma_lora");

    let runs = "[report]\nruns = [\"base\", \"lora\", \"dora\", \"late\", \"early\", \"cont\", \"prog\"]";
    f.run(Stage::Report, "rep", runs).unwrap();
    let table = std::fs::read_to_string(f.path("rep").join(TABLE_CSV)).unwrap();
    let header = table.lines().next().unwrap();
    assert!(header.starts_with("method,train,center,ct/tumor"));
    assert!(header.ends_with("param_ratio"));
    let base_row = table.lines().find(|l| l.starts_with("base,ct,A")).unwrap();
    assert!(base_row.contains(MISSING), "base has no PET cells: {base_row}");
    assert!(table.lines().any(|l| l.starts_with("late,ct|pet,E")));
    let md = std::fs::read_to_string(f.path("rep").join(TABLE_MD)).unwrap();
    assert!(md.contains("C-index"));

    // re-listing a run is harmless; two runs disagreeing on one cell is not
    let twice = "[report]\nruns = [\"lora\", \"lora\"]";
    f.run(Stage::Report, "rep2", twice).unwrap();
    let copy = f.path("lora_copy");
    std::fs::create_dir(&copy).unwrap();
    for file in ["run_record.json", METRICS_CSV, PARAM_REPORT] {
        std::fs::copy(f.path("lora").join(file), copy.join(file)).unwrap();
    }
    let mut rows = metrics(&copy);
    rows[0].value += 0.5;
    pemma_cli::outputs::write_metrics(&copy.join(METRICS_CSV), &rows).unwrap();
    let clash = "[report]\nruns = [\"lora\", \"lora_copy\"]";
    assert!(matches!(f.run(Stage::Report, "rep3", clash), Err(CliError::Config(_))));
}

#[test]
fn unavailable_modes_and_stage_order_are_config_errors() {
    let f = Fixture::new();
    f.pretrain("base");
    let err = f.run(Stage::Eval, "ev", "from = \"base\"\nmodes = [\"pet\"]").unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    let err = f.run(Stage::Continual, "c", "from = \"base\"\n[continual]\ncenter = \"F\"").unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    let err = f.run(Stage::Adapt, "a", "from = \"nowhere\"").unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn binary_exit_codes() {
    let f = Fixture::new();
    f.config("base", "");
    assert_eq!(f.bin(&["pretrain", "--config", "base.toml"]), 0);
    assert!(f.path("base").join("run_record.json").exists());

    f.config("ev", "from = \"base\"");
    assert_eq!(f.bin(&["eval", "--config", "ev.toml", "--modes", "pet"]), 2);
    assert_eq!(f.bin(&["eval", "--config", "ev.toml", "--modes", "ct"]), 0);
    assert_eq!(f.bin(&["eval", "--config", "ev.toml", "--modes", "xray"]), 2);
    assert_eq!(f.bin(&["eval", "--config", "missing.toml"]), 2);

    std::fs::write(f.path("bad.toml"), "schema_version = 1\nout = \"x\"\nunknown_key = 3\n").unwrap();
    assert_eq!(f.bin(&["pretrain", "--config", "bad.toml"]), 2);

    // a truncated checkpoint is a data error
    let ckpt = f.path("base").join("base.ckpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(f.bin(&["eval", "--config", "ev.toml", "--modes", "ct"]), 3);

    // an absurd learning rate drives the loss to a non-finite value
    f.config_with("nan", "", "steps = 40\nlr = 1e30");
    assert_eq!(f.bin(&["pretrain", "--config", "nan.toml"]), 4);
}
