//! Named trainable parameters with Adam state.

use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ParamEntry<F> {
    pub value: Tensor<F>,
    pub m: Tensor<F>,
    pub v: Tensor<F>,
}

/// Parameter store. BTreeMap keeps iteration in name order, which fixes the
/// update order and keeps runs reproducible.
#[derive(Clone, Debug)]
pub struct ParamStore<F: Scalar> {
    entries: BTreeMap<String, ParamEntry<F>>,
    step: u64,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.entries.insert(name, ParamEntry { value, m, v });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry<F>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<F>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update over every parameter, in name order.
/// Every parameter must have a gradient.
pub fn adam_step<F: Scalar>(
    store: &mut ParamStore<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    store.step += 1;
    let t = store.step;
    let b1 = F::from_f64(hyper.beta1);
    let b2 = F::from_f64(hyper.beta2);
    let eps = F::from_f64(hyper.eps);
    let one = F::one();
    let corr1 = F::from_f64(1.0 - hyper.beta1.powi(t as i32));
    let corr2 = F::from_f64(1.0 - hyper.beta2.powi(t as i32));
    let lrf = F::from_f64(lr);
    for (name, entry) in store.entries.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing gradient for parameter {name}")))?;
        if g.shape() != entry.value.shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} for parameter {name} of shape {:?}",
                g.shape(),
                entry.value.shape()
            )));
        }
        let m = entry.m.data_mut();
        let v = entry.v.data_mut();
        let p = entry.value.data_mut();
        for (((pi, mi), vi), &gi) in
            p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / corr1;
            let vhat = *vi / corr2;
            *pi = *pi - lrf * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap()).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        adam_step(&mut store, &grads, 0.01, &AdamHyper::default()).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // closed form: mhat = 1, vhat = 1 -> delta = lr / (1 + eps)
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        let h = AdamHyper::default();
        adam_step(&mut store, &grads, 0.01, &h).unwrap();
        let expected = -0.01 / (1.0 + h.eps);
        let got = store.get("w").unwrap().item();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        let grads = BTreeMap::new();
        assert!(adam_step(&mut store, &grads, 0.01, &AdamHyper::default()).is_err());
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        assert!(store.insert("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut store = ParamStore::<f32>::new();
            store.insert("a", Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap()).unwrap();
            store.insert("b", Tensor::new(vec![2], vec![2.0, -1.0]).unwrap()).unwrap();
            for step in 0..5 {
                let mut grads = BTreeMap::new();
                grads.insert(
                    "a".to_string(),
                    Tensor::new(vec![3], vec![0.1 * step as f32, -0.2, 0.3]).unwrap(),
                );
                grads.insert("b".to_string(), Tensor::new(vec![2], vec![1.0, 0.5]).unwrap());
                adam_step(&mut store, &grads, 0.005, &AdamHyper::default()).unwrap();
            }
            (store.get("a").unwrap().data().to_vec(), store.get("b").unwrap().data().to_vec())
        };
        assert_eq!(run(), run());
    }
}
