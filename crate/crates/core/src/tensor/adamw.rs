use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(len: usize, config: AdamWConfig) -> Self {
        AdamWState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            config,
        }
    }

    /// One AdamW update from `param.grad()`. Weight decay is decoupled: it
    /// shrinks the parameter directly and never enters the moment estimates.
    pub fn step(&mut self, param: &mut Tensor<T>, name: &str) -> Result<()> {
        let grad = param
            .grad()
            .ok_or_else(|| Error::MissingGradient(name.to_string()))?
            .to_vec();
        if grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer state for {} has {} slots, parameter has {}",
                name,
                self.m.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = T::lit(c.lr);
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let eps = T::lit(c.eps);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let bc1 = T::one() - T::lit(c.beta1.powi(t));
        let bc2 = T::one() - T::lit(c.beta2.powi(t));
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * *g;
            *v = b2 * *v + (T::one() - b2) * *g * *g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// AdamW over an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamW<T = f32> {
    states: Vec<AdamWState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, config: AdamWConfig) -> Self {
        AdamW {
            states: params
                .into_iter()
                .map(|p| AdamWState::new(p.numel(), config))
                .collect(),
        }
    }

    /// One configuration per parameter, chosen by name.
    pub fn with_groups<'a>(
        params: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
        config_for: impl Fn(&str) -> AdamWConfig,
    ) -> Self {
        AdamW {
            states: params
                .into_iter()
                .map(|(name, p)| AdamWState::new(p.numel(), config_for(name)))
                .collect(),
        }
    }

    pub fn states(&self) -> &[AdamWState<T>] {
        &self.states
    }

    /// Update every parameter, in order. `params` must match construction order.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    ) -> Result<()> {
        self.step_except(params, |_| false)
    }

    /// Like [`AdamW::step`], but parameters for which `frozen(name)` holds
    /// are left untouched, moments and step count included.
    pub fn step_except<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
        frozen: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let mut count = 0;
        for ((name, p), state) in params.into_iter().zip(self.states.iter_mut()) {
            if !frozen(name) {
                state.step(p, name)?;
            }
            count += 1;
        }
        if count != self.states.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters but {} were supplied",
                self.states.len(),
                count
            )));
        }
        Ok(())
    }
}
