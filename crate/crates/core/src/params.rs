//! Named parameter storage and its binding onto a tape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ndcore::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of a model a parameter belongs to; drives phase freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Final-layer GP variational parameters and kernel.
    Output,
    /// Final-layer inducing inputs.
    OutputInducing,
    /// Observation noise of the regression likelihood.
    Likelihood,
    /// Drift field variational mean.
    Flow,
    /// Flow kernel hyperparameters, shared with the Wishart GPs.
    FlowKernel,
    /// Flow inducing inputs, shared with the Wishart GPs.
    FlowInducing,
    /// Wishart scale and J-process variational parameters.
    Diffusion,
    /// Additive diagonal of the flow diffusion (Wishart Λ or the diagonal ablation).
    WhiteNoise,
    /// Observation map and noise of the dynamical model.
    Observation,
    /// Free initial latent states.
    InitialState,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    group: ParamGroup,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, group, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &mut self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "ParamStore::set",
                lhs: cur.value.shape(),
                rhs: value.shape(),
            });
        }
        cur.value = value;
        Ok(())
    }

    /// Lifts every parameter onto `tape`; only those accepted by `trainable`
    /// become differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(ParamGroup) -> bool) -> Binding<'t> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable(e.group) {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Lifts every parameter as a constant (inference only).
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Binding<'t> {
        self.bind(tape, |_| false)
    }
}

/// Parameters lifted onto one tape.
pub struct Binding<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Binding<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradient per parameter, in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}
