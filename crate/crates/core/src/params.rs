//! Named trainable tensors with momentum state.

use std::collections::BTreeMap;

use crate::error::{rejected, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: Tensor,
    velocity: Tensor,
    group: String,
}

/// Named parameters. Every entry carries a velocity of the same shape and a
/// learning-rate group label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter with zero velocity. Names must be unique.
    pub fn insert(&mut self, name: &str, group: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(rejected(format!("duplicate parameter name {name}")));
        }
        let velocity = Tensor::zeros(value.shape());
        self.entries.insert(name.to_owned(), Entry { value, velocity, group: group.to_owned() });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| rejected(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.velocity)
    }

    pub fn group(&self, name: &str) -> Option<&str> {
        self.entries.get(name).map(|e| e.group.as_str())
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn reset_velocity(&mut self) {
        for e in self.entries.values_mut() {
            e.velocity = Tensor::zeros(e.value.shape());
        }
    }
}

/// Learning rate per parameter group, with a fallback.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRates {
    pub default: f64,
    pub per_group: BTreeMap<String, f64>,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        Self { default: lr, per_group: BTreeMap::new() }
    }

    pub fn with(mut self, group: &str, lr: f64) -> Self {
        self.per_group.insert(group.to_owned(), lr);
        self
    }

    pub fn rate(&self, group: &str) -> f64 {
        self.per_group.get(group).copied().unwrap_or(self.default)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            default: self.default * factor,
            per_group: self.per_group.iter().map(|(k, v)| (k.clone(), v * factor)).collect(),
        }
    }
}

/// One momentum step: `v <- momentum * v - lr * g; p <- p + v`.
///
/// Parameters without a gradient entry are treated as having zero gradient.
pub fn sgd_momentum_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    rates: &GroupRates,
    momentum: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(rejected(format!("momentum {momentum} outside [0, 1)")));
    }
    if rates.default < 0.0 || rates.per_group.values().any(|&r| r < 0.0) {
        return Err(rejected("learning rates must be non-negative"));
    }
    for (name, g) in grads {
        match params.entries.get(name) {
            Some(e) => e.value.same_shape(g)?,
            None => return Err(rejected(format!("gradient for unknown parameter {name}"))),
        }
    }
    for (name, e) in params.entries.iter_mut() {
        let lr = rates.rate(&e.group);
        let grad = grads.get(name);
        let v = e.velocity.data_mut();
        for (i, vi) in v.iter_mut().enumerate() {
            let gi = grad.map_or(0.0, |g| g.data()[i]);
            *vi = momentum * *vi - lr * gi;
        }
        for (p, vi) in e.value.data_mut().iter_mut().zip(e.velocity.data()) {
            *p += vi;
        }
    }
    Ok(())
}
