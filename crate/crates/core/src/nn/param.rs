use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A named tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S = f32> {
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn accumulate(&mut self, grad: &Tensor<S>) -> Result<()> {
        self.grad.add_assign(grad)
    }
}

/// Whether a tensor is optimised or only carried along (batch-norm running
/// statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Buffer,
}

/// Anything that owns parameters and can expose them by hierarchical name.
pub trait Params<S: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, _, p| p.zero_grad());
    }

    /// Snapshot of every tensor (weights and buffers) as 32-bit values.
    fn export(&self) -> ParameterSet<f32> {
        let mut set = ParameterSet::new();
        self.visit("", &mut |name, _, p| {
            set.insert(name.to_string(), p.value.cast());
        });
        set
    }

    /// Overwrites every tensor from `set`. Names and shapes must match
    /// exactly; extra entries in `set` are rejected too.
    fn import(&mut self, set: &ParameterSet<f32>) -> Result<()> {
        let mut seen = 0usize;
        let mut failure: Option<Error> = None;
        self.visit_mut("", &mut |name, _, p| {
            if failure.is_some() {
                return;
            }
            match set.get(name) {
                None => failure = Some(Error::Checkpoint(format!("tensor '{name}' missing from checkpoint"))),
                Some(t) if t.shape() != p.value.shape() => {
                    failure = Some(Error::Checkpoint(format!(
                        "tensor '{name}' has shape {:?} in checkpoint but {:?} in model",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                Some(t) => {
                    p.value = t.cast();
                    seen += 1;
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if seen != set.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                set.len(),
                seen
            )));
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Ordered name -> parameter map. Iteration is sorted by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<S = f32> {
    entries: BTreeMap<String, Parameter<S>>,
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, value: Tensor<S>) -> Option<Parameter<S>> {
        self.entries.insert(name, Parameter::new(value))
    }

    pub fn insert_param(&mut self, name: String, param: Parameter<S>) -> Option<Parameter<S>> {
        self.entries.insert(name, param)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<S>> {
        self.entries.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<S>> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<S>)> {
        self.entries.iter_mut().map(|(k, p)| (k.as_str(), p))
    }

    /// Entries whose names start with `prefix.`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParameterSet<S> {
        let lead = format!("{prefix}.");
        let mut out = ParameterSet::new();
        for (k, p) in &self.entries {
            if let Some(rest) = k.strip_prefix(&lead) {
                out.insert_param(rest.to_string(), p.clone());
            }
        }
        out
    }

    /// Adds every entry of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParameterSet<S>) {
        for (k, p) in &other.entries {
            self.entries.insert(join(prefix, k), p.clone());
        }
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.value.shape().to_vec()))
            .collect()
    }
}

impl<S: Scalar> Params<S> for ParameterSet<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Parameter<S>)) {
        for (k, p) in &self.entries {
            f(&join(prefix, k), ParamRole::Weight, p);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Parameter<S>)) {
        for (k, p) in self.entries.iter_mut() {
            f(&join(prefix, k), ParamRole::Weight, p);
        }
    }
}
