use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
}

/// Named trainable tensors with gradient accumulators and Adam state.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
    step: u64,
}

/// Gradients produced by one backward pass, indexed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// True when the parameter received a gradient with at least one nonzero entry.
    pub fn is_nonzero(&self, id: ParamId) -> bool {
        self.get(id)
            .map(|g| g.data().iter().any(|&v| v != 0.0))
            .unwrap_or(false)
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.entries.len());
        let zeros = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name: name.clone(),
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Adds a backward pass's gradients into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (entry, g) in self.entries.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                entry.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Rounds every value to the nearest `f32`, the precision of the checkpoint container.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// True when every parameter value is bit-identical to `other`'s.
    pub fn values_equal(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Hyperparameters of the adaptive-moment optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps of linear warmup; 0 disables warmup.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            warmup_steps: 0,
        }
    }
}

impl AdamConfig {
    /// Warmup over the first 5% of `total_steps`.
    pub fn with_warmup_fraction(mut self, total_steps: u64) -> Self {
        self.warmup_steps = total_steps / 20;
        self
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Applies one bias-corrected Adam update from the accumulated gradients,
/// increments the step counter, and clears the gradients.
///
/// Fails without touching any value if a gradient is not finite.
pub fn optimizer_step(params: &mut ParameterSet, hyper: &AdamConfig) -> Result<()> {
    for e in &params.entries {
        if let Some(index) = e.grad.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: e.name.clone(),
                index,
            });
        }
    }
    let t = params.step + 1;
    let lr = hyper.lr_at(params.step);
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for e in &mut params.entries {
        let g = e.grad.data();
        let m = e.first_moment.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
        }
        let v = e.second_moment.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
        }
        let m = e.first_moment.data();
        let v = e.second_moment.data();
        for ((x, mi), vi) in e.value.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
        e.grad.data_mut().fill(0.0);
    }
    params.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_grad(params: &mut ParameterSet, id: ParamId, g: &[f64]) {
        params.entries[id.0].grad.data_mut().copy_from_slice(g);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            p.insert("w", Tensor::scalar(2.0)),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut p = ParameterSet::new();
        let id = p.insert("w", Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        optimizer_step(&mut p, &AdamConfig::default()).unwrap();
        assert_eq!(p.value(id).data(), &[1.0, -2.0, 3.0]);
        assert_eq!(p.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
        let mut p = ParameterSet::new();
        let id = p.insert("w", Tensor::vector(vec![0.0, 0.0])).unwrap();
        set_grad(&mut p, id, &[0.5, -3.0]);
        let hyper = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        optimizer_step(&mut p, &hyper).unwrap();
        let expected = [-0.01 * 0.5 / (0.5 + 1e-6), 0.01 * 3.0 / (3.0 + 1e-6)];
        for (x, e) in p.value(id).data().iter().zip(expected) {
            assert!((x - e).abs() < 1e-15, "{x} vs {e}");
            assert!((x.abs() - 0.01).abs() < 1e-7);
        }
        assert!(p.grad(id).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = ParameterSet::new();
        let id = p.insert("w", Tensor::vector(vec![1.0, 1.0])).unwrap();
        set_grad(&mut p, id, &[0.1, f64::NAN]);
        let err = optimizer_step(&mut p, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1, .. }));
        assert_eq!(p.value(id).data(), &[1.0, 1.0]);
        assert_eq!(p.step(), 0);
    }

    #[test]
    fn warmup_is_linear() {
        let hyper = AdamConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..AdamConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|s| hyper.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
        assert_eq!(AdamConfig::default().with_warmup_fraction(200).warmup_steps, 10);
    }
}
