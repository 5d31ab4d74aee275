//! Survival head over pooled encoder tokens and optional clinical features.

use serde::{Deserialize, Serialize};

use super::config::linear_specs;
use super::infer::for_each_window;
use super::{init_tensor, Graph, Model, ParamSpec};
use crate::data::{Case, Mode, EHR_FEATURE_DIM};
use crate::objectives::DEFAULT_BINS;
use crate::tensor::{ParamGroup, ParamStore, Real, Rng, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrognosisConfig {
    pub hidden: usize,
    pub bins: usize,
    /// Concatenate the clinical feature vector to the pooled tokens.
    pub use_ehr: bool,
}

impl Default for PrognosisConfig {
    fn default() -> Self {
        PrognosisConfig {
            hidden: 32,
            bins: DEFAULT_BINS,
            use_ehr: false,
        }
    }
}

pub fn prognosis_specs(dim: usize, cfg: &PrognosisConfig) -> Vec<ParamSpec> {
    let input = dim + if cfg.use_ehr { EHR_FEATURE_DIM } else { 0 };
    let mut v = Vec::new();
    linear_specs(&mut v, "prog.fc1", cfg.hidden, input, ParamGroup::Prognosis);
    linear_specs(&mut v, "prog.fc2", cfg.bins, cfg.hidden, ParamGroup::Prognosis);
    v
}

/// Two-layer MLP producing a distribution over discrete time bins.
#[derive(Clone, Debug)]
pub struct PrognosisHead<E: Real> {
    pub config: PrognosisConfig,
    pub dim: usize,
    pub params: ParamStore<E>,
}

impl<E: Real> PrognosisHead<E> {
    pub fn new(dim: usize, config: PrognosisConfig, rng: &mut Rng) -> Result<Self> {
        if config.bins < 2 || config.hidden == 0 || dim == 0 {
            return Err(Error::invalid("prognosis head needs >= 2 bins and positive widths"));
        }
        let mut params = ParamStore::new();
        for spec in prognosis_specs(dim, &config) {
            params.insert(spec.name.clone(), init_tensor(&spec, rng), spec.group)?;
        }
        Ok(PrognosisHead { config, dim, params })
    }

    /// Records `softmax(fc2(gelu(fc1([pooled ‖ ehr]))))` for a batch of rows.
    pub fn forward(&self, g: &mut Graph<E>, pooled: Var, ehr: Option<Var>) -> Result<Var> {
        let x = match (self.config.use_ehr, ehr) {
            (true, Some(e)) => g.tape.concat_cols(&[pooled, e])?,
            (false, None) => pooled,
            (true, None) => return Err(Error::Data("prognosis head expects clinical features".into())),
            (false, Some(_)) => return Err(Error::invalid("prognosis head was built without clinical features")),
        };
        let h = g.linear("prog.fc1", x)?;
        let h = g.tape.gelu(h)?;
        let logits = g.linear("prog.fc2", h)?;
        g.tape.softmax(logits, 1)
    }
}

/// Mean of the final-block tokens, averaged over the sliding windows of a case.
pub fn pooled_features<E: Real>(model: &Model<E>, case: &Case, mode: Mode) -> Result<Vec<f32>> {
    model.arch.check_mode(mode)?;
    let d = model.config().dim;
    let mut acc = vec![0.0f64; d];
    let mut windows = 0usize;
    for_each_window(case, model.config().side, mode, |_, ct, pet| {
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &model.params);
        let hiddens = model.encode(&mut g, ct, pet, mode)?;
        let last = *hiddens.last().expect("depth >= 1");
        let mean = tape.sum_rows(last)?;
        let rows = tape.shape(last)[0] as f64;
        for (a, v) in acc.iter_mut().zip(tape.value(mean)) {
            *a += v.to_f64() / rows;
        }
        windows += 1;
        Ok(())
    })?;
    Ok(acc.iter().map(|&v| (v / windows as f64) as f32).collect())
}

/// Event-time distribution for one case.
pub fn prognosis_forward<E: Real>(
    model: &Model<E>,
    head: &PrognosisHead<E>,
    case: &Case,
    mode: Mode,
) -> Result<Vec<f64>> {
    let pooled = pooled_features(model, case, mode)?;
    let ehr = if head.config.use_ehr {
        let rec = case
            .ehr
            .as_ref()
            .ok_or_else(|| Error::Data(format!("case {} has no clinical record", case.id)))?;
        Some(rec.features())
    } else {
        None
    };
    let mut tape = Tape::new();
    let mut g = Graph::frozen(&mut tape, &head.params);
    let p = g.input(&pooled, pooled.len())?;
    let e = match &ehr {
        Some(f) => Some(g.input(f, f.len())?),
        None => None,
    };
    let pmf = head.forward(&mut g, p, e)?;
    Ok(tape.value(pmf).iter().map(|v| v.to_f64()).collect())
}
