use std::collections::BTreeMap;

use crate::error::{DiffError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Entry<T> {
    pub(crate) name: String,
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Tensor<T>,
    pub(crate) first_moment: Tensor<T>,
    pub(crate) second_moment: Tensor<T>,
}

/// Named parameters with gradient accumulators and Adam moments.
///
/// Iteration is always in name order, independent of registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    pub(crate) entries: Vec<Entry<T>>,
    pub(crate) by_name: BTreeMap<String, ParamId>,
    pub(crate) step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.entries.len());
        let zeros = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name: name.to_string(),
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parameter ids in name order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_name.values().copied()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    pub fn scale_grads(&mut self, factor: T) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.ids()
            .flat_map(|id| self.entries[id.0].grad.data().iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn grads_finite(&self) -> bool {
        self.entries.iter().all(|e| e.grad.is_finite())
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(T::of(max_norm / norm));
        }
        norm
    }

    /// Copies parameter values (not optimizer state) from another store with the same names.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, &id) in &self.by_name {
            let src = other.id(name).ok_or_else(|| DiffError::UnknownParam(name.clone()))?;
            let v = other.value(src);
            if v.shape() != self.entries[id.0].value.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "load_values_from",
                    expected: self.entries[id.0].value.shape().to_vec(),
                    got: v.shape().to_vec(),
                });
            }
            self.entries[id.0].value = v.clone();
        }
        Ok(())
    }

    /// Raw parameter bytes in name order; used for content hashing.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for id in self.ids() {
            let e = &self.entries[id.0];
            out.extend_from_slice(e.name.as_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }
}

/// Adam optimizer hyper-parameters.
#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update using the accumulated gradients.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, lr: f64) {
        store.step += 1;
        let t = store.step as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let eps = T::of(self.eps);
        let lr = T::of(lr);
        for e in &mut store.entries {
            let g = e.grad.data();
            let m = e.first_moment.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let v = e.second_moment.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let m = e.first_moment.data();
            let v = e.second_moment.data();
            for ((p, &mi), &vi) in e.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Step-wise learning-rate schedule: `base * decay^(epoch / step_size)`.
#[derive(Clone, Copy, Debug)]
pub struct StepLr {
    pub base: f64,
    pub decay: f64,
    pub step_size: usize,
}

impl StepLr {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = if self.step_size == 0 { 0 } else { epoch / self.step_size };
        self.base * self.decay.powi(k as i32)
    }
}
