//! Upgrading a pre-trained CT model to CT+PET: low-rank attention updates,
//! PET embedding and skip path, the missing-modality adapter, and the
//! ledger of frozen versus trainable parameters.

mod ledger;
mod lowrank;

use serde::{Deserialize, Serialize};

pub use ledger::{
    early_fusion_ledger, late_fusion_ledger, param_report, pemma_ledger, LedgerEntry, ParamLedger, ParamReport,
};
pub use lowrank::{adapted_projection, dora_linear, dora_weight, lora_linear, row_norms, DoraForm, PeftMethod};

use crate::backbone::{skip_specs, embedding_specs, Graph, Init, Model, ModelConfig, ParamSpec, Stem};
use crate::data::Modality;
use crate::tensor::{ParamGroup, Real, Rng, Tape, Tensor, Var};
use crate::{Error, Result};

/// Attention projection that may carry a low-rank update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Q,
    K,
    V,
    O,
}

impl Target {
    pub fn tag(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
            Target::O => "o",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    #[serde(default)]
    pub method: PeftMethod,
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "default_targets")]
    pub targets: Vec<Target>,
    #[serde(default)]
    pub dora_form: DoraForm,
}

fn default_targets() -> Vec<Target> {
    vec![Target::Q, Target::V]
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            method: PeftMethod::Lora,
            rank: 4,
            alpha: 8.0,
            targets: default_targets(),
            dora_form: DoraForm::Canonical,
        }
    }
}

impl AdaptationConfig {
    pub fn dora() -> Self {
        AdaptationConfig {
            method: PeftMethod::Dora,
            ..Self::default()
        }
    }

    /// Effective scale `s = α / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.rank == 0 || self.rank >= model.dim {
            return Err(Error::invalid(format!("rank {} must lie in 1..{}", self.rank, model.dim)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha {} must be positive", self.alpha)));
        }
        let mut t = self.targets.clone();
        t.sort();
        t.dedup();
        if t.is_empty() || t.len() != self.targets.len() {
            return Err(Error::invalid("targets must be a non-empty list without repeats"));
        }
        Ok(())
    }
}

/// Layout of the low-rank parameters. DoRA magnitudes are listed with
/// `Init::Ones` but are set from the frozen weights at injection.
pub fn peft_specs(model: &ModelConfig, cfg: &AdaptationConfig) -> Vec<ParamSpec> {
    let (d, r) = (model.dim, cfg.rank);
    let mut v = Vec::new();
    for l in 0..model.depth {
        for t in &cfg.targets {
            let p = format!("blocks.{l}.attn.{}", t.tag());
            v.push(ParamSpec::new(format!("{p}.lora_a"), [r, d], ParamGroup::Peft, Init::Normal(0.02)));
            v.push(ParamSpec::new(format!("{p}.lora_b"), [d, r], ParamGroup::Peft, Init::Zeros));
            if cfg.method == PeftMethod::Dora {
                v.push(ParamSpec::new(format!("{p}.dora_m"), [d], ParamGroup::Peft, Init::Ones));
            }
        }
    }
    v
}

/// PET embedding, PET skip projection with its weight `β`, and the adapter.
pub fn pet_path_specs(model: &ModelConfig) -> Vec<ParamSpec> {
    let mut v = embedding_specs(model, "pet", 1, ParamGroup::PetEmbed);
    v.extend(skip_specs(model, "pet", 1, ParamGroup::PetSkip));
    v.push(ParamSpec::new("skip.beta", [1], ParamGroup::PetSkip, Init::Zeros));
    v.push(ParamSpec::new("adapter.weight", [2, 1], ParamGroup::Adapter, Init::Zeros));
    v.push(ParamSpec::new("adapter.bias", [2], ParamGroup::Adapter, Init::Zeros));
    v
}

/// Adds one low-rank pair per target per block and freezes the base weights.
pub fn inject_adapters<E: Real>(model: &mut Model<E>, cfg: &AdaptationConfig, rng: &mut Rng) -> Result<ParamLedger> {
    if model.arch.peft.is_some() {
        return Err(Error::AlreadyInjected);
    }
    cfg.validate(model.config())?;
    for spec in peft_specs(model.config(), cfg) {
        let t = if spec.name.ends_with(".dora_m") {
            let prefix = spec.name.trim_end_matches(".dora_m");
            magnitude_of(model.params.tensor(&format!("{prefix}.weight"))?)?
        } else {
            crate::backbone::init_tensor(&spec, rng)
        };
        model.params.insert(spec.name, t, spec.group)?;
    }
    model.arch.peft = Some(cfg.clone());
    freeze_base(model);
    Ok(ParamLedger::from_store(&model.params))
}

/// Row norms of `w`, computed by the same kernels the forward pass uses so
/// that the adapted weight reproduces `w` bit for bit at zero delta.
fn magnitude_of<E: Real>(w: &Tensor<E>) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let v = tape.constant(w.clone());
    let n = row_norms(&mut tape, v)?;
    Ok(tape.tensor(n))
}

pub fn freeze_base<E: Real>(model: &mut Model<E>) {
    model.params.set_frozen_where(true, |p| p.group == ParamGroup::Base);
}

/// Marks exactly the listed groups trainable.
pub fn set_trainable<E: Real>(model: &mut Model<E>, groups: &[ParamGroup]) {
    model.params.set_frozen_where(true, |_| true);
    model.params.set_frozen_where(false, |p| groups.contains(&p.group));
}

/// How the new PET patch embedding starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PetInit {
    Random,
    Zero,
    #[default]
    CrossModal,
}

impl std::str::FromStr for PetInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PetInit::Random),
            "zero" => Ok(PetInit::Zero),
            "cross_modal" => Ok(PetInit::CrossModal),
            other => Err(Error::invalid(format!("unknown PET initialisation `{other}`"))),
        }
    }
}

/// Creates the PET embedding, PET skip path and adapter on a CT model.
///
/// `β` starts at 0 and the adapter routes a lone PET input to the PET
/// channel. The PET skip projection starts as a copy of the CT one (random
/// for `PetInit::Random`) so that it receives a gradient while `β = 0`.
pub fn add_pet_paths<E: Real>(model: &mut Model<E>, strategy: PetInit, rng: &mut Rng) -> Result<()> {
    if model.arch.stem != (Stem::Uni { modality: Modality::Ct }) {
        return Err(Error::invalid("PET paths attach to a CT-only model"));
    }
    if model.arch.pet_paths {
        return Err(Error::invalid("PET paths already exist"));
    }
    for spec in pet_path_specs(model.config()) {
        let t = crate::backbone::init_tensor(&spec, rng);
        model.params.insert(spec.name, t, spec.group)?;
    }
    model.arch.pet_paths = true;
    let adapter = model.params.get_mut("adapter.weight")?;
    adapter.value.data_mut()[1] = E::ONE;
    if strategy != PetInit::Random {
        for part in ["weight", "bias"] {
            let src = model.params.tensor(&format!("skip.ct.{part}"))?.clone();
            model.params.get_mut(&format!("skip.pet.{part}"))?.value = src;
        }
    }
    init_pet_embedding(model, strategy, rng)
}

/// Re-initialises the PET patch embedding.
pub fn init_pet_embedding<E: Real>(model: &mut Model<E>, strategy: PetInit, rng: &mut Rng) -> Result<()> {
    let shapes: Vec<(String, Vec<usize>)> = ["weight", "bias", "pos"]
        .iter()
        .map(|p| {
            let name = format!("embed.pet.{p}");
            model.params.tensor(&name).map(|t| (name, t.shape().to_vec()))
        })
        .collect::<Result<_>>()
        .map_err(|_| Error::invalid("the model has no PET embedding"))?;
    for (name, shape) in shapes {
        let t = match (strategy, name.rsplit('.').next().unwrap()) {
            (PetInit::Random, "bias") | (PetInit::Zero, _) | (PetInit::CrossModal, "pos") => Tensor::zeros(shape),
            (PetInit::Random, _) => Tensor::randn(shape, 0.02, rng),
            (PetInit::CrossModal, part) => model
                .params
                .tensor(&format!("embed.ct.{part}"))
                .map_err(|_| Error::invalid("cross-modal initialisation needs the CT embedding"))?
                .clone(),
        };
        model.params.get_mut(&name)?.value = t;
    }
    Ok(())
}

/// `z_c + β·z_p`.
pub fn skip_combine<E: Real>(tape: &mut Tape<E>, z_c: Var, z_p: Var, beta: Var) -> Result<Var> {
    if tape.shape(z_c) != tape.shape(z_p) {
        return Err(Error::shape(
            "skip_combine",
            format!("{:?} vs {:?}", tape.shape(z_c), tape.shape(z_p)),
        ));
    }
    let scaled = tape.scale_by(z_p, beta)?;
    tape.add(z_c, scaled)
}

/// Expands a lone modality `[V, 1]` to the two-channel `[V, 2]` layout.
pub fn adapter_forward<E: Real>(g: &mut Graph<E>, x: Var) -> Result<Var> {
    match g.tape.shape(x) {
        [_, 1] => {}
        [_, 2] => return Err(Error::invalid("adapter is bypassed when both modalities are present")),
        s => return Err(Error::shape("adapter", format!("input {s:?}"))),
    }
    g.linear("adapter", x)
}

/// Two-channel input: concatenation when both modalities are present,
/// the adapter otherwise.
pub fn two_channel_input<E: Real>(g: &mut Graph<E>, ct: Option<Var>, pet: Option<Var>) -> Result<Var> {
    match (ct, pet) {
        (Some(c), Some(p)) => g.tape.concat_cols(&[c, p]),
        (Some(x), None) | (None, Some(x)) => adapter_forward(g, x),
        (None, None) => Err(Error::invalid("no modality present")),
    }
}
