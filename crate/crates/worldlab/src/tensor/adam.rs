//! Adam with bias correction. Learning rate and epsilon default to 1e-3,
//! which is what every model in the crate trains with.

use std::collections::BTreeMap;

use super::{Gradients, ParamSet, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, eps: f64) -> Self {
        Self {
            lr,
            eps,
            beta1: 0.9,
            beta2: 0.999,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter that has a gradient entry. Moments are
    /// created lazily the first time a parameter shows up.
    pub fn adam_step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<(), TensorError> {
        for (name, grad) in grads {
            let Some(p) = params.get(name) else { continue };
            if p.shape != grad.shape {
                return Err(TensorError::ShapeMismatch(format!(
                    "adam `{name}`: param {:?} vs grad {:?}",
                    p.shape, grad.shape
                )));
            }
            if !grad.is_finite() {
                return Err(TensorError::NonFinite(format!("gradient of `{name}`")));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape.clone()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape.clone()));
            for i in 0..grad.data.len() {
                let g = grad.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g * g;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::scalar(v));
        ps
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = one_param(1.5);
        let mut adam = AdamState::new(1e-3, 1e-3);
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::scalar(0.0));
        adam.adam_step(&mut ps, &grads).unwrap();
        assert_eq!(ps.get("p").unwrap().data, vec![1.5]);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut ps = one_param(1.5);
        let mut adam = AdamState::new(0.0, 1e-3);
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::scalar(0.7));
        adam.adam_step(&mut ps, &grads).unwrap();
        assert_eq!(ps.get("p").unwrap().data, vec![1.5]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // p=1, g=1: mhat=1, vhat=1, so p -= lr / (1 + eps)
        let mut ps = one_param(1.0);
        let mut adam = AdamState::new(1e-3, 1e-3);
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::scalar(1.0));
        adam.adam_step(&mut ps, &grads).unwrap();
        let expected = 1.0 - 1e-3 / (1.0 + 1e-3);
        assert!((ps.get("p").unwrap().data[0] - expected).abs() < 1e-15);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ps = one_param(1.0);
        let mut adam = AdamState::new(1e-3, 1e-3);
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::zeros(vec![2]));
        assert!(matches!(
            adam.adam_step(&mut ps, &grads),
            Err(TensorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn step_counter_increases_monotonically() {
        let mut ps = one_param(0.0);
        let mut adam = AdamState::new(1e-3, 1e-3);
        let mut grads = Gradients::new();
        grads.insert("p".into(), Tensor::scalar(0.1));
        for expect in 1..=5 {
            adam.adam_step(&mut ps, &grads).unwrap();
            assert_eq!(adam.step, expect);
        }
    }
}
