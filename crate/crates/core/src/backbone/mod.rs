//! Volumetric transformer segmenter: patch embeddings, global-attention
//! blocks, token routing and a de-patching decoder, plus a survival head.

mod config;
mod geometry;
mod graph;
mod infer;
mod prognosis;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use config::{embedding_specs, skip_specs, trunk_specs, Init, ModelConfig, ParamSpec};
pub use geometry::{depatch_index, patchify_index, upsample_index, Geometry};
pub use graph::Graph;
pub use infer::{predict_case, sliding_origins, MaskProbabilities};
pub use prognosis::{pooled_features, prognosis_forward, prognosis_specs, PrognosisConfig, PrognosisHead};

use crate::adaptation::{adapter_forward, adapted_projection, skip_combine, AdaptationConfig};
use crate::data::{Modality, Mode};
use crate::tensor::{ParamGroup, ParamStore, Real, Rng, Tensor, Var};
use crate::{Error, Result};

/// Input stem of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Stem {
    /// One modality, one input channel.
    Uni { modality: Modality },
    /// CT and PET concatenated as two input channels. With `zero_fill`, a
    /// missing modality is replaced by zeros instead of being an error.
    EarlyFusion { zero_fill: bool },
}

impl Stem {
    pub fn tag(self) -> &'static str {
        match self {
            Stem::Uni { modality } => modality.tag(),
            Stem::EarlyFusion { .. } => "ctpet",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Stem::Uni { .. } => 1,
            Stem::EarlyFusion { .. } => 2,
        }
    }
}

/// Which encoder tokens reach the decoder when both modalities are present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    #[default]
    CtOnly,
    /// `[c0, p0, c1, p1, ...]` truncated to N tokens.
    Alternate,
    PetOnly,
}

impl std::str::FromStr for Routing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ct_only" => Ok(Routing::CtOnly),
            "alternate" => Ok(Routing::Alternate),
            "pet_only" => Ok(Routing::PetOnly),
            other => Err(Error::invalid(format!("unknown routing `{other}`"))),
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub config: ModelConfig,
    pub stem: Stem,
    /// PET embedding, PET skip path and missing-modality adapter present.
    #[serde(default)]
    pub pet_paths: bool,
    #[serde(default)]
    pub peft: Option<AdaptationConfig>,
    #[serde(default)]
    pub routing: Routing,
}

impl Architecture {
    pub fn uni(config: ModelConfig, modality: Modality) -> Self {
        Architecture {
            config,
            stem: Stem::Uni { modality },
            pet_paths: false,
            peft: None,
            routing: Routing::CtOnly,
        }
    }

    /// Parameter layout in insertion order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let cfg = &self.config;
        let tag = self.stem.tag();
        let c = self.stem.channels();
        let mut v = embedding_specs(cfg, tag, c, ParamGroup::Base);
        v.extend(skip_specs(cfg, tag, c, ParamGroup::Base));
        v.extend(trunk_specs(cfg));
        if self.pet_paths {
            v.extend(crate::adaptation::pet_path_specs(cfg));
        }
        if let Some(peft) = &self.peft {
            v.extend(crate::adaptation::peft_specs(cfg, peft));
        }
        v
    }

    /// Modes this model can run, in [`Mode::ALL`] order.
    pub fn modes(&self) -> Vec<Mode> {
        Mode::ALL.into_iter().filter(|&m| self.check_mode(m).is_ok()).collect()
    }

    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        let unavailable = |reason: &str| {
            Err(Error::ModalityUnavailable {
                mode: mode.to_string(),
                reason: reason.to_string(),
            })
        };
        match self.stem {
            Stem::Uni { modality: Modality::Ct } => {
                if mode != Mode::Ct && !self.pet_paths {
                    return unavailable("the model has no PET path");
                }
                if mode == Mode::Ct && self.routing != Routing::CtOnly {
                    return unavailable("routing needs PET tokens");
                }
            }
            Stem::Uni { modality: Modality::Pet } => {
                if mode != Mode::Pet {
                    return unavailable("the model was trained on PET only");
                }
            }
            Stem::EarlyFusion { zero_fill } => {
                if mode != Mode::CtPet && !zero_fill {
                    return unavailable("early fusion needs both modalities unless zero filling is enabled");
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn init_tensor<E: Real>(spec: &ParamSpec, rng: &mut Rng) -> Tensor<E> {
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.shape.clone()),
        Init::Ones => Tensor::full(spec.shape.clone(), E::ONE),
        Init::Normal(std) => Tensor::randn(spec.shape.clone(), std, rng),
        Init::FanIn => {
            let fan_in = *spec.shape.last().unwrap_or(&1);
            Tensor::randn(spec.shape.clone(), 1.0 / (fan_in as f64).sqrt(), rng)
        }
    }
}

/// Segmentation model: architecture, parameters and cached index maps.
#[derive(Clone, Debug)]
pub struct Model<E: Real> {
    pub arch: Architecture,
    pub params: ParamStore<E>,
    geometry: Arc<Geometry>,
}

/// Values recorded by one forward pass.
pub struct Forward {
    /// `[V, classes]`
    pub logits: Var,
    /// Full token sequence after every block.
    pub hiddens: Vec<Var>,
    /// Tokens per modality.
    pub tokens: usize,
}

impl<E: Real> Model<E> {
    /// Fresh model with seeded random weights. Adapters and PET paths are
    /// added afterwards through [`crate::adaptation`].
    pub fn new(config: ModelConfig, stem: Stem, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let arch = Architecture {
            config,
            stem,
            pet_paths: false,
            peft: None,
            routing: Routing::CtOnly,
        };
        let mut params = ParamStore::new();
        for spec in arch.param_specs() {
            let t = init_tensor(&spec, rng);
            params.insert(spec.name, t, spec.group)?;
        }
        Ok(Model {
            geometry: Arc::new(Geometry::new(&config)),
            arch,
            params,
        })
    }

    /// Rebuilds a model around an existing parameter store, checking that
    /// every expected entry is present with the right shape.
    pub fn from_parts(arch: Architecture, params: ParamStore<E>) -> Result<Self> {
        arch.config.validate()?;
        if let Some(p) = &arch.peft {
            p.validate(&arch.config)?;
        }
        for spec in arch.param_specs() {
            let got = params.tensor(&spec.name)?.shape();
            if got != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {got:?}, expected {:?}",
                    spec.name, spec.shape
                )));
            }
        }
        Ok(Model {
            geometry: Arc::new(Geometry::new(&arch.config)),
            arch,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn cast<F: Real>(&self) -> Model<F> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
            geometry: self.geometry.clone(),
        }
    }

    /// Records the forward pass for one window. `ct` and `pet` hold `side³`
    /// voxels each (x fastest) when present.
    pub fn forward(&self, g: &mut Graph<E>, ct: Option<&[f32]>, pet: Option<&[f32]>, mode: Mode) -> Result<Forward> {
        let (tokens, skip) = self.stem_inputs(g, ct, pet, mode)?;
        self.encode_decode(g, tokens, skip)
    }

    /// Encoder hidden states only; the decoder is not recorded.
    pub fn encode(&self, g: &mut Graph<E>, ct: Option<&[f32]>, pet: Option<&[f32]>, mode: Mode) -> Result<Vec<Var>> {
        let (tokens, _) = self.stem_inputs(g, ct, pet, mode)?;
        self.encoder(g, tokens)
    }

    fn stem_inputs(&self, g: &mut Graph<E>, ct: Option<&[f32]>, pet: Option<&[f32]>, mode: Mode) -> Result<(Var, Var)> {
        self.arch.check_mode(mode)?;
        let v = self.arch.config.voxels();
        let mut load = |data: Option<&[f32]>, m: Modality| -> Result<Var> {
            let data = data.ok_or_else(|| Error::ModalityUnavailable {
                mode: mode.to_string(),
                reason: format!("the case has no {} volume", m.tag()),
            })?;
            if data.len() != v {
                return Err(Error::shape("forward", format!("{} voxels, model expects {v}", data.len())));
            }
            g.input(data, 1)
        };
        let x_ct = if mode.uses_ct() { Some(load(ct, Modality::Ct)?) } else { None };
        let x_pet = if mode.uses_pet() { Some(load(pet, Modality::Pet)?) } else { None };
        self.stem_forward(g, x_ct, x_pet, mode)
    }

    /// Embeds the inputs; returns the token sequence and the skip activation.
    fn stem_forward(&self, g: &mut Graph<E>, x_ct: Option<Var>, x_pet: Option<Var>, mode: Mode) -> Result<(Var, Var)> {
        match self.arch.stem {
            Stem::Uni { modality } => {
                let tag = modality.tag();
                match (mode, modality) {
                    (Mode::Ct, Modality::Ct) | (Mode::Pet, Modality::Pet) => {
                        let x = x_ct.or(x_pet).expect("input loaded for mode");
                        let t = self.embed(g, tag, x, 1)?;
                        let s = g.linear(&format!("skip.{tag}"), x)?;
                        Ok((t, s))
                    }
                    (Mode::CtPet, Modality::Ct) => self.pemma_stem(g, x_ct.unwrap(), x_pet.unwrap()),
                    (Mode::Pet, Modality::Ct) => {
                        let two = adapter_forward(g, x_pet.unwrap())?;
                        let c = g.tape.slice_cols(two, 0, 1)?;
                        let p = g.tape.slice_cols(two, 1, 1)?;
                        self.pemma_stem(g, c, p)
                    }
                    _ => unreachable!("rejected by check_mode"),
                }
            }
            Stem::EarlyFusion { .. } => {
                let v = self.arch.config.voxels();
                let mut fill = |x: Option<Var>| -> Result<Var> {
                    match x {
                        Some(x) => Ok(x),
                        None => g.input(&vec![0.0; v], 1),
                    }
                };
                let c = fill(x_ct)?;
                let p = fill(x_pet)?;
                let x = g.tape.concat_cols(&[c, p])?;
                let t = self.embed(g, "ctpet", x, 2)?;
                let s = g.linear("skip.ctpet", x)?;
                Ok((t, s))
            }
        }
    }

    fn pemma_stem(&self, g: &mut Graph<E>, x_c: Var, x_p: Var) -> Result<(Var, Var)> {
        let tc = self.embed(g, "ct", x_c, 1)?;
        let tp = self.embed(g, "pet", x_p, 1)?;
        let tokens = g.tape.concat_rows(&[tc, tp])?;
        let zc = g.linear("skip.ct", x_c)?;
        let zp = g.linear("skip.pet", x_p)?;
        let beta = g.param("skip.beta")?;
        let skip = skip_combine(g.tape, zc, zp, beta)?;
        Ok((tokens, skip))
    }

    /// Patch embedding of a `[V, channels]` input: `[N, d]` tokens.
    pub fn embed(&self, g: &mut Graph<E>, tag: &str, x: Var, channels: usize) -> Result<Var> {
        let cfg = &self.arch.config;
        let want = cfg.voxels() * channels;
        let have = g.tape.value(x).len();
        if have != want {
            return Err(Error::shape("embed_patches", format!("{have} values, expected {want}")));
        }
        let rows = g.tape.gather(x, self.geometry.patchify(channels), [cfg.tokens(), channels * cfg.patch_voxels()])?;
        let t = g.linear(&format!("embed.{tag}"), rows)?;
        let pos = g.param(&format!("embed.{tag}.pos"))?;
        g.tape.add(t, pos)
    }

    /// Runs every block, returning the hidden state after each.
    pub fn encoder(&self, g: &mut Graph<E>, tokens: Var) -> Result<Vec<Var>> {
        let d = self.arch.config.dim;
        if g.tape.shape(tokens).get(1) != Some(&d) {
            return Err(Error::shape("encoder", format!("tokens {:?}, width {d}", g.tape.shape(tokens))));
        }
        let mut x = tokens;
        let mut out = Vec::with_capacity(self.arch.config.depth);
        for l in 0..self.arch.config.depth {
            x = self.block(g, l, x)?;
            out.push(x);
        }
        Ok(out)
    }

    fn projection(&self, g: &mut Graph<E>, prefix: &str, target: crate::adaptation::Target, x: Var) -> Result<Var> {
        match &self.arch.peft {
            Some(p) if p.targets.contains(&target) => adapted_projection(g, prefix, x, p),
            _ => g.linear(prefix, x),
        }
    }

    fn block(&self, g: &mut Graph<E>, l: usize, x: Var) -> Result<Var> {
        use crate::adaptation::Target;
        let cfg = &self.arch.config;
        let b = format!("blocks.{l}");
        let h = self.layer_norm(g, &format!("{b}.ln1"), x)?;
        let q = self.projection(g, &format!("{b}.attn.q"), Target::Q, h)?;
        let k = self.projection(g, &format!("{b}.attn.k"), Target::K, h)?;
        let v = self.projection(g, &format!("{b}.attn.v"), Target::V, h)?;
        let dh = cfg.dim / cfg.heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(cfg.heads);
        for i in 0..cfg.heads {
            let (qi, ki, vi) = if cfg.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.tape.slice_cols(q, i * dh, dh)?,
                    g.tape.slice_cols(k, i * dh, dh)?,
                    g.tape.slice_cols(v, i * dh, dh)?,
                )
            };
            let s = g.tape.matmul_t(qi, ki)?;
            let s = g.tape.scale(s, scale)?;
            let a = g.tape.softmax(s, 1)?;
            heads.push(g.tape.matmul(a, vi)?);
        }
        let att = if heads.len() == 1 { heads[0] } else { g.tape.concat_cols(&heads)? };
        let o = self.projection(g, &format!("{b}.attn.o"), Target::O, att)?;
        let x = g.tape.add(x, o)?;
        let h = self.layer_norm(g, &format!("{b}.ln2"), x)?;
        let m = g.linear(&format!("{b}.mlp.fc1"), h)?;
        let m = g.tape.gelu(m)?;
        let m = g.linear(&format!("{b}.mlp.fc2"), m)?;
        g.tape.add(x, m)
    }

    fn layer_norm(&self, g: &mut Graph<E>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = g.param(&format!("{prefix}.gamma"))?;
        let beta = g.param(&format!("{prefix}.beta"))?;
        g.tape.layer_norm(x, gamma, beta)
    }

    /// Selects N of the tokens in `hidden` according to the routing policy.
    pub fn route(&self, g: &mut Graph<E>, hidden: Var) -> Result<Var> {
        route_tokens(g, hidden, self.arch.config.tokens(), self.arch.routing)
    }

    /// Decoder over the four tapped hidden states plus the input skip.
    pub fn decode(&self, g: &mut Graph<E>, taps: [Var; 4], skip: Var) -> Result<Var> {
        let cfg = &self.arch.config;
        let c = cfg.dec_channels;
        let stage = |g: &mut Graph<E>, j: usize, t: Var| -> Result<Var> {
            let y = g.linear(&format!("dec.tap{j}"), t)?;
            let s = self.geometry.stage_side(j);
            g.tape.gather(y, self.geometry.depatch(j), [s * s * s, c])
        };
        // taps are shallowest first; stage 0 uses the deepest
        let mut f = stage(g, 0, taps[3])?;
        for j in 1..4 {
            let s = self.geometry.stage_side(j);
            let up = g.tape.gather(f, self.geometry.upsample(j), [s * s * s, c])?;
            let t = stage(g, j, taps[3 - j])?;
            let cat = g.tape.concat_cols(&[up, t])?;
            let mixed = g.linear(&format!("dec.mix{j}"), cat)?;
            f = g.tape.gelu(mixed)?;
        }
        let skip_shape = g.tape.shape(skip).to_vec();
        if skip_shape != [cfg.voxels(), cfg.skip_channels] {
            return Err(Error::shape("decode", format!("skip activation {skip_shape:?}")));
        }
        let cat = g.tape.concat_cols(&[f, skip])?;
        let h = g.linear("head.fuse", cat)?;
        let h = g.tape.gelu(h)?;
        g.linear("head.out", h)
    }

    fn encode_decode(&self, g: &mut Graph<E>, tokens: Var, skip: Var) -> Result<Forward> {
        let hiddens = self.encoder(g, tokens)?;
        let taps = self.arch.config.taps();
        let mut routed = [hiddens[0]; 4];
        for (slot, &t) in routed.iter_mut().zip(&taps) {
            *slot = self.route(g, hiddens[t])?;
        }
        let logits = self.decode(g, routed, skip)?;
        Ok(Forward {
            logits,
            hiddens,
            tokens: self.arch.config.tokens(),
        })
    }
}

/// Token routing on a `[N or 2N, d]` sequence whose first N rows are CT.
pub fn route_tokens<E: Real>(g: &mut Graph<E>, hidden: Var, n: usize, policy: Routing) -> Result<Var> {
    let shape = g.tape.shape(hidden).to_vec();
    let (rows, d) = (shape[0], shape[1]);
    let both = match rows {
        r if r == n => false,
        r if r == 2 * n => true,
        r => return Err(Error::shape("route_to_decoder", format!("{r} tokens, expected {n} or {}", 2 * n))),
    };
    let missing = |what: &str| {
        Err(Error::ModalityUnavailable {
            mode: "ct".into(),
            reason: format!("{what} routing needs PET tokens"),
        })
    };
    match (policy, both) {
        (Routing::CtOnly, false) => Ok(hidden),
        (Routing::CtOnly, true) => g.tape.slice_rows(hidden, 0, n),
        (Routing::PetOnly, true) => g.tape.slice_rows(hidden, n, n),
        (Routing::Alternate, true) => {
            let order: Vec<usize> = (0..n).map(|i| if i % 2 == 0 { i / 2 } else { n + i / 2 }).collect();
            let index: Arc<[usize]> = order.iter().flat_map(|&t| t * d..(t + 1) * d).collect();
            g.tape.gather(hidden, index, [n, d])
        }
        (Routing::PetOnly, false) => missing("pet_only"),
        (Routing::Alternate, false) => missing("alternate"),
    }
}
