use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use num_traits::Float;

use super::param::{ParamRole, Parameter, ParameterSet, Params};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<S> {
    m: Tensor<S>,
    v: Tensor<S>,
}

/// Adam with bias correction. Moment state is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam<S = f32> {
    pub config: AdamConfig,
    step: u64,
    state: BTreeMap<String, Moments<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Checks every gradient for finiteness before anything is modified.
    fn check(name: &str, p: &Parameter<S>) -> Result<()> {
        if !p.grad.is_finite() {
            return Err(Error::Training(alloc::format!("non-finite gradient in parameter '{name}'")));
        }
        Ok(())
    }

    fn update(&mut self, name: &str, p: &mut Parameter<S>) -> Result<()> {
        let c = self.config;
        let moments = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(p.value.shape()),
            v: Tensor::zeros(p.value.shape()),
        });
        if moments.m.shape() != p.value.shape() {
            return Err(Error::Training(alloc::format!(
                "optimizer state for '{name}' has shape {:?}, parameter has {:?}",
                moments.m.shape(),
                p.value.shape()
            )));
        }
        let t = self.step as i32;
        let bc1 = 1.0 - Float::powi(c.beta1, t);
        let bc2 = 1.0 - Float::powi(c.beta2, t);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one_b1, one_b2) = (S::of(1.0 - c.beta1), S::of(1.0 - c.beta2));
        let step_size = S::of(c.lr / bc1);
        let bc2_sqrt = S::of(Float::sqrt(bc2));
        let eps = S::of(c.eps);
        let grads = p.grad.data();
        let values = p.value.data_mut();
        let ms = moments.m.data_mut();
        let vs = moments.v.data_mut();
        for i in 0..values.len() {
            let g = grads[i];
            ms[i] = b1 * ms[i] + one_b1 * g;
            vs[i] = b2 * vs[i] + one_b2 * g * g;
            values[i] = values[i] - step_size * ms[i] / (vs[i].sqrt() / bc2_sqrt + eps);
        }
        Ok(())
    }

    /// One update over every trainable weight reachable from `model`.
    /// Buffers are skipped.
    pub fn step(&mut self, model: &mut dyn Params<S>) -> Result<()> {
        let mut failure = None;
        model.visit("", &mut |name, role, p| {
            if role == ParamRole::Weight && failure.is_none() {
                if let Err(e) = Self::check(name, p) {
                    failure = Some(e);
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        self.step += 1;
        let mut failure = None;
        model.visit_mut("", &mut |name, role, p| {
            if role == ParamRole::Weight && failure.is_none() {
                if let Err(e) = self.update(name, p) {
                    failure = Some(e);
                }
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn step_set(&mut self, params: &mut ParameterSet<S>) -> Result<()> {
        self.step(params)
    }
}
