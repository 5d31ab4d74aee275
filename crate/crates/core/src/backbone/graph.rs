use std::collections::HashMap;

use crate::objectives::ParamGrads;
use crate::tensor::{Gradients, ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// A tape paired with the parameters it reads.
///
/// Each parameter is copied onto the tape the first time it is used and
/// reused afterwards. With `track` set, unfrozen parameters are recorded as
/// gradient-carrying leaves.
pub struct Graph<'a, E: Real> {
    pub tape: &'a mut Tape<E>,
    store: &'a ParamStore<E>,
    bound: HashMap<String, Var>,
    track: bool,
}

impl<'a, E: Real> Graph<'a, E> {
    pub fn new(tape: &'a mut Tape<E>, store: &'a ParamStore<E>, track: bool) -> Self {
        Graph {
            tape,
            store,
            bound: HashMap::new(),
            track,
        }
    }

    /// Inference graph: nothing requires a gradient.
    pub fn frozen(tape: &'a mut Tape<E>, store: &'a ParamStore<E>) -> Self {
        Self::new(tape, store, false)
    }

    pub fn store(&self) -> &ParamStore<E> {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.bound.contains_key(name) || self.store.contains(name)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.store.get(name)?;
        let mut t = p.value.clone();
        t.requires_grad = self.track && !p.frozen;
        t.grad = None;
        let v = self.tape.leaf_owned(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Substitutes `var` for the stored parameter `name`; used to
    /// differentiate with respect to a single weight.
    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    /// Records an input matrix `[rows, cols]` converted from `f32`.
    pub fn input(&mut self, data: &[f32], cols: usize) -> Result<Var> {
        if cols == 0 || data.len() % cols != 0 {
            return Err(Error::shape("input", format!("{} values in {cols} columns", data.len())));
        }
        let t = Tensor::new([data.len() / cols, cols], data.iter().map(|&v| E::from_f32(v)).collect())?;
        Ok(self.tape.constant(t))
    }

    /// `x·Wᵀ + b` with `W = {prefix}.weight` stored `[out, in]`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul_t(x, w)?;
        self.tape.add_row(y, b)
    }

    /// Gradients of every bound, tracked parameter.
    pub fn param_grads(&self, grads: &Gradients<E>) -> ParamGrads<E> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.wrt(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}
