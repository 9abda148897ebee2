//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Scalar> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for AdamW<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamW<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    ///
    /// `lr` maps a parameter name to its learning rate. Parameters without a
    /// gradient entry are left untouched, including by weight decay.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Vec<T>>,
        lr: impl Fn(&str) -> f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            if g.len() != p.numel() {
                return Err(Error::contract(format!("gradient for {name} has {} entries, parameter has {}", g.len(), p.numel())));
            }
            let shape = p.shape().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::contract(format!("optimizer state for {name} does not match its shape")));
            }
            let lr = T::lit(lr(name));
            let decay = T::one() - lr * T::lit(weight_decay);
            let eps = T::lit(ADAM_EPS);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64([v.len()], v).unwrap());
        s
    }

    fn grads(v: &[f64]) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("w".to_string(), v.to_vec())])
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut s = store(&[1.5, -2.0]);
        let mut opt = AdamW::new();
        for _ in 0..5 {
            opt.update(&mut s, &grads(&[0.0, 0.0]), |_| 0.1, 0.0).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn decay_only_step() {
        let mut s = store(&[2.0]);
        AdamW::new().update(&mut s, &grads(&[0.0]), |_| 0.1, 0.01).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[2.0 * (1.0 - 0.1 * 0.01)]);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut s = store(&[0.0, 0.0]);
        let mut opt = AdamW::new();
        let mut prev = vec![0.0, 0.0];
        for _ in 0..2000 {
            opt.update(&mut s, &grads(&[3.0, -0.02]), |_| 1e-3, 0.0).unwrap();
            let now = s.get("w").unwrap().data().to_vec();
            let step: Vec<f64> = now.iter().zip(&prev).map(|(a, b)| a - b).collect();
            prev = now;
            assert!((step[0] + 1e-3).abs() < 1e-5);
            assert!((step[1] - 1e-3).abs() < 1e-5);
        }
    }
}
