//! Named parameter storage and the per-forward binding context.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::{Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Owns every learnable tensor. Registration order is the construction order
/// of the model, which is deterministic, so optimizer state and checkpoints
/// line up across runs.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// One forward pass: a fresh tape plus lazy bindings of store parameters to
/// tape leaves. Binding a parameter twice returns the same node, so gradient
/// accumulation over shared weights is automatic.
pub struct Ctx<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: HashMap<ParamId, Var>,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.tape.leaf(self.params.value(id).clone());
        self.bound.insert(id, v);
        v
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params
    }

    /// Gradients of every bound parameter, in store order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Option<ArrayD<f64>>)> {
        let mut out: Vec<(ParamId, Option<ArrayD<f64>>)> = self
            .bound
            .iter()
            .map(|(&id, &var)| (id, grads.wrt(var).cloned()))
            .collect();
        out.sort_by_key(|(id, _)| id.0);
        out
    }
}
