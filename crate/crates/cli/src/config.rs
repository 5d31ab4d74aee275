//! Run configuration file. See `docs/formats.md` for the full schema.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pemma_core::adaptation::{AdaptationConfig, DoraForm, PeftMethod, PetInit, Target};
use pemma_core::backbone::{ModelConfig, Routing};
use pemma_core::data::{Manifest, Mode, ModeProbs, PatchRatio};
use pemma_core::objectives::DeepHitConfig;
use pemma_core::tensor::ParamGroup;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Adapt,
    Continual,
    Eval,
    Prognosis,
    Report,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Adapt => "adapt",
            Stage::Continual => "continual",
            Stage::Eval => "eval",
            Stage::Prognosis => "prognosis",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// How the CT model is extended to PET.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    #[default]
    PemmaLora,
    PemmaDora,
    Early,
    Late,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::PemmaLora => "pemma_lora",
            Method::PemmaDora => "pemma_dora",
            Method::Early => "early",
            Method::Late => "late",
        }
    }

    pub fn is_pemma(self) -> bool {
        matches!(self, Method::PemmaLora | Method::PemmaDora)
    }
}

/// Parameter groups trained during continual fine-tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    PeftOnly,
    /// Low-rank pairs plus the PET embedding, PET skip path and adapter.
    #[serde(alias = "peft_plus_modality_paths")]
    #[value(alias = "peft_plus_modality_paths")]
    Wide,
}

impl Scope {
    pub fn groups(self) -> &'static [ParamGroup] {
        match self {
            Scope::PeftOnly => &[ParamGroup::Peft],
            Scope::Wide => &[ParamGroup::Peft, ParamGroup::PetEmbed, ParamGroup::PetSkip, ParamGroup::Adapter],
        }
    }
}

/// Optimisation knobs; unset fields take stage-specific defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    /// Patches per optimiser step.
    pub batch: Option<usize>,
    /// Steps between validation checks.
    pub val_every: Option<usize>,
    /// Validation checks without improvement before stopping.
    pub patience: Option<usize>,
    /// Training cases held out for validation.
    pub val_cases: Option<usize>,
    pub val_patches: Option<usize>,
    pub weight_decay: Option<f64>,
    pub patch_ratio: Option<[usize; 2]>,
    pub mode_probs: Option<ModeProbs>,
    pub flips: Option<bool>,
}

/// Fully resolved training plan.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainPlan {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub val_every: usize,
    pub patience: usize,
    pub val_cases: usize,
    pub val_patches: usize,
    pub weight_decay: f64,
    pub ratio: PatchRatio,
    pub mode_probs: ModeProbs,
    pub flips: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Target>,
    pub dora_form: DoraForm,
    pub pet_init: PetInit,
    pub routing: Routing,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let a = AdaptationConfig::default();
        AdaptSection {
            rank: a.rank,
            alpha: a.alpha,
            targets: a.targets,
            dora_form: a.dora_form,
            pet_init: PetInit::default(),
            routing: Routing::default(),
        }
    }
}

impl AdaptSection {
    pub fn adaptation(&self, method: Method) -> AdaptationConfig {
        AdaptationConfig {
            method: if method == Method::PemmaDora { PeftMethod::Dora } else { PeftMethod::Lora },
            rank: self.rank,
            alpha: self.alpha,
            targets: self.targets.clone(),
            dora_form: self.dora_form,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LateSection {
    pub w_c: f64,
}

impl Default for LateSection {
    fn default() -> Self {
        LateSection { w_c: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlySection {
    /// Replace a missing modality by zeros, enabling modality dropout.
    pub zero_fill: bool,
}

impl Default for EarlySection {
    fn default() -> Self {
        EarlySection { zero_fill: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualSection {
    /// New centre to fine-tune on.
    pub center: Option<String>,
    /// `ct` trains on CT only; `ctpet` uses modality dropout over both.
    pub train_modes: Option<Mode>,
    /// Centres evaluated afterwards; default: the new centre and the
    /// adaptation centres.
    pub eval_centers: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Default: the adaptation centres.
    pub centers: Vec<String>,
}

/// Prognosis setting: image modalities fed to the encoder, optionally
/// with the clinical record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Ct,
    Cp,
    Cpt,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::Ct, Setting::Cp, Setting::Cpt];

    pub fn tag(self) -> &'static str {
        match self {
            Setting::Ct => "ct",
            Setting::Cp => "cp",
            Setting::Cpt => "cpt",
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Setting::Ct => Mode::Ct,
            Setting::Cp | Setting::Cpt => Mode::CtPet,
        }
    }

    pub fn uses_ehr(self) -> bool {
        self == Setting::Cpt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrognosisSection {
    pub settings: Vec<Setting>,
    pub hidden: usize,
    pub bins: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of the training cohort held out for early stopping.
    pub val_fraction: f64,
    pub patience: usize,
    pub deephit: DeepHitConfig,
}

impl Default for PrognosisSection {
    fn default() -> Self {
        PrognosisSection {
            settings: Setting::ALL.to_vec(),
            hidden: 32,
            bins: pemma_core::objectives::DEFAULT_BINS,
            epochs: 400,
            lr: 1e-3,
            val_fraction: 0.2,
            patience: 20,
            deephit: DeepHitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub runs: Vec<PathBuf>,
}

fn default_seed() -> u64 {
    1
}

fn default_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub stage: Option<Stage>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Data manifest; the built-in desk manifest when absent.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Run directory of the previous stage.
    #[serde(default)]
    pub from: Option<PathBuf>,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub adaptation: AdaptSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub early: EarlySection,
    #[serde(default)]
    pub late: LateSection,
    #[serde(default)]
    pub continual: ContinualSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub prognosis: PrognosisSection,
    #[serde(default)]
    pub report: ReportSection,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
    pub modes: Option<Vec<Mode>>,
    pub scope: Option<Scope>,
}

/// Parses a comma-separated mode list such as `ct,pet,ctpet`.
pub fn parse_modes(s: &str) -> CliResult<Vec<Mode>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| Mode::from_str(p).map_err(|e| CliError::config(e.to_string())))
        .collect()
}

impl RunConfig {
    /// A minimal configuration with every default filled in.
    pub fn new(stage: Stage) -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            stage: Some(stage),
            seed: default_seed(),
            out: None,
            manifest: None,
            from: None,
            method: Method::default(),
            modes: default_modes(),
            scope: Scope::default(),
            model: ModelConfig::default(),
            adaptation: AdaptSection::default(),
            train: TrainSection::default(),
            early: EarlySection::default(),
            late: LateSection::default(),
            continual: ContinualSection::default(),
            eval: EvalSection::default(),
            prognosis: PrognosisSection::default(),
            report: ReportSection::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| CliError::config(format!("config: {e}")))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "config schema_version {} (supported: {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.manifest.as_mut().map(fix);
        cfg.from.as_mut().map(fix);
        cfg.out.as_mut().map(fix);
        cfg.report.runs.iter_mut().for_each(fix);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Internal(format!("config serialisation: {e}")))
    }

    /// Applies the subcommand and flags, then checks stage requirements.
    pub fn resolve(mut self, stage: Stage, o: &Overrides) -> CliResult<Self> {
        if let Some(s) = self.stage {
            if s != stage {
                return Err(CliError::config(format!("config is for stage `{s}`, invoked as `{stage}`")));
            }
        }
        self.stage = Some(stage);
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = Some(v.clone());
        }
        if let Some(v) = o.method {
            self.method = v;
        }
        if let Some(v) = &o.modes {
            self.modes = v.clone();
        }
        if let Some(v) = o.scope {
            self.scope = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn stage(&self) -> Stage {
        self.stage.expect("resolved config has a stage")
    }

    fn validate(&self) -> CliResult<()> {
        let stage = self.stage();
        self.model.validate().map_err(|e| CliError::config(e.to_string()))?;
        if self.out.is_none() {
            return Err(CliError::config("no output directory (`out` or --out)"));
        }
        let needs_from = matches!(stage, Stage::Adapt | Stage::Continual | Stage::Eval | Stage::Prognosis);
        if needs_from && self.from.is_none() {
            return Err(CliError::config(format!("stage `{stage}` needs `from`, the previous run directory")));
        }
        if self.modes.is_empty() {
            return Err(CliError::config("`modes` is empty"));
        }
        let mut seen = self.modes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modes.len() {
            return Err(CliError::config("`modes` lists a mode twice"));
        }
        if stage == Stage::Adapt && self.method.is_pemma() {
            self.adaptation
                .adaptation(self.method)
                .validate(&self.model)
                .map_err(|e| CliError::config(e.to_string()))?;
        }
        pemma_core::fusion::FusionWeights::new(self.late.w_c).map_err(|e| CliError::config(e.to_string()))?;
        if stage == Stage::Continual && self.continual.center.is_none() {
            return Err(CliError::config("stage `continual` needs `continual.center`"));
        }
        if stage == Stage::Report && self.report.runs.is_empty() {
            return Err(CliError::config("stage `report` needs at least one entry in `report.runs`"));
        }
        if stage == Stage::Prognosis {
            let p = &self.prognosis;
            if p.settings.is_empty() || p.bins < 2 || p.hidden == 0 || !(0.0..1.0).contains(&p.val_fraction) {
                return Err(CliError::config("invalid `prognosis` section"));
            }
        }
        if let Some(p) = &self.train.mode_probs {
            p.validate().map_err(|e| CliError::config(e.to_string()))?;
        }
        if let Some([pos, neg]) = self.train.patch_ratio {
            if pos + neg == 0 {
                return Err(CliError::config("patch_ratio 0:0"));
            }
        }
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        self.out.as_deref().expect("validated")
    }

    pub fn load_manifest(&self) -> CliResult<Manifest> {
        match &self.manifest {
            Some(p) => Manifest::load(p).map_err(|e| match e {
                pemma_core::Error::Io(io) => CliError::config(format!("cannot read manifest {}: {io}", p.display())),
                other => CliError::config(other.to_string()),
            }),
            None => Ok(Manifest::desk_default()),
        }
    }

    /// Training plan for the current stage and method. Learning-rate
    /// defaults: 1e-3 when training from scratch, 1e-4 when adapting.
    pub fn train_plan(&self) -> TrainPlan {
        let t = &self.train;
        let scratch = self.stage() == Stage::Pretrain || (self.stage() == Stage::Adapt && self.method == Method::Late);
        let (lr, steps) = match (self.stage(), scratch) {
            (_, true) => (1e-3, 300),
            (Stage::Adapt, false) => (1e-4, 200),
            _ => (1e-4, 100),
        };
        let probs = match (self.stage(), self.method) {
            (Stage::Pretrain, _) => ModeProbs::only(Mode::Ct),
            (Stage::Adapt, Method::Late) => ModeProbs::only(Mode::Pet),
            (Stage::Adapt, Method::Early) if !self.early.zero_fill => ModeProbs::only(Mode::CtPet),
            (Stage::Continual, _) => match self.continual.train_modes {
                Some(Mode::CtPet) => ModeProbs::default(),
                Some(m) => ModeProbs::only(m),
                None => ModeProbs::only(Mode::Ct),
            },
            _ => ModeProbs::default(),
        };
        let [pos, neg] = t.patch_ratio.unwrap_or([2, 1]);
        TrainPlan {
            lr: t.lr.unwrap_or(lr),
            steps: t.steps.unwrap_or(steps),
            batch: t.batch.unwrap_or(2),
            val_every: t.val_every.unwrap_or(10).max(1),
            patience: t.patience.unwrap_or(20),
            val_cases: t.val_cases.unwrap_or(2),
            val_patches: t.val_patches.unwrap_or(2),
            weight_decay: t.weight_decay.unwrap_or(1e-5),
            ratio: PatchRatio { pos, neg },
            mode_probs: t.mode_probs.unwrap_or(probs),
            flips: t.flips.unwrap_or(false),
        }
    }
}
