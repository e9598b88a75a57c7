//! Named parameter storage and the SGD-with-momentum update.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named learnable tensors plus their momentum buffers.
///
/// Iteration is always in sorted name order. A parameter is trainable iff
/// its tensor has `requires_grad` set; frozen tensors are never touched by
/// [`ParamStore::sgd_momentum_step`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    momentum: BTreeMap<String, Vec<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        self.momentum.remove(&name);
        self.params.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Marks every parameter whose name starts with `prefix` as trainable or
    /// frozen.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.set_requires_grad(trainable);
                if !trainable {
                    t.clear_grad();
                }
            }
        }
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn momentum_buffer(&self, name: &str) -> Option<&[f32]> {
        self.momentum.get(name).map(Vec::as_slice)
    }

    /// Copies every tensor from `other` whose name starts with `prefix`.
    pub fn merge_prefix(&mut self, other: &ParamStore, prefix: &str) {
        for (name, t) in other.iter() {
            if name.starts_with(prefix) {
                self.insert(name, t.clone());
            }
        }
    }

    /// Same tensors without optimizer state.
    pub fn without_momentum(mut self) -> Self {
        self.momentum.clear();
        self
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::clear_grad);
    }

    /// `v ← momentum·v + grad; w ← w − lr·v`, then clears gradients.
    ///
    /// Every trainable parameter must carry a gradient; the check runs before
    /// any tensor is modified.
    pub fn sgd_momentum_step(&mut self, lr: f32, momentum: f32) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if let Some((name, _)) = self
            .params
            .iter()
            .find(|(_, t)| t.requires_grad() && t.grad().is_none())
        {
            return Err(Error::MissingGrad(name.clone()));
        }
        for (name, t) in self.params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let grad = t.take_grad().expect("checked above");
            let v = self
                .momentum
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for ((w, vi), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = momentum * *vi + g;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(w: &[f32], g: &[f32]) -> ParamStore {
        let mut s = ParamStore::new();
        let mut t = Tensor::new(vec![w.len()], w.to_vec())
            .unwrap()
            .with_requires_grad(true);
        t.accumulate_grad(g);
        s.insert("w", t);
        s
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut s = store_with(&[1.0, 2.0], &[0.5, -1.0]);
        s.sgd_momentum_step(0.1, 0.0).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0 - 0.05, 2.0 + 0.1]);
        assert!(s.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let mut s = store_with(&[1.0, 2.0], &[0.5, -1.0]);
        s.sgd_momentum_step(0.0, 0.9).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn two_momentum_steps_unroll() {
        // v1 = g, v2 = 0.9 g + g: total update -lr (g + 1.9 g)
        let (lr, g) = (0.1f32, 2.0f32);
        let mut s = store_with(&[0.0], &[g]);
        s.sgd_momentum_step(lr, 0.9).unwrap();
        s.get_mut("w").unwrap().accumulate_grad(&[g]);
        s.sgd_momentum_step(lr, 0.9).unwrap();
        let expected = -lr * (g + 1.9 * g);
        assert!((s.get("w").unwrap().data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]).with_requires_grad(true));
        let err = s.sgd_momentum_step(0.1, 0.9).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(n) if n == "a"));
    }

    #[test]
    fn frozen_params_untouched() {
        let mut s = store_with(&[1.0], &[1.0]);
        s.insert("frozen", Tensor::full(&[1], 3.0));
        s.sgd_momentum_step(0.5, 0.9).unwrap();
        assert_eq!(s.get("frozen").unwrap().data(), &[3.0]);
        assert_eq!(s.trainable_names(), vec!["w"]);
    }

    #[test]
    fn bad_hyperparameters_rejected() {
        let mut s = store_with(&[1.0], &[1.0]);
        assert!(s.sgd_momentum_step(-1.0, 0.5).is_err());
        assert!(s.sgd_momentum_step(0.1, 1.0).is_err());
    }
}
