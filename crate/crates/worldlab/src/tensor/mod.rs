//! Dense f64 tensors, a reverse-mode tape, and the small layer set the
//! world models are built from.

mod adam;
mod checkpoint;
mod conv;
mod gaussian;
mod layers;
mod tape;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use gaussian::{gaussian_kl, gaussian_nll, reparam_sample, DiagGaussian};
pub use layers::{
    add_conv, add_conv_gated_cell, add_dense, add_gated_cell, conv_gated_cell, conv_layer, dense,
    dense_no_bias, gated_cell, init_uniform,
};
pub use tape::{Graph, Var};

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),
    #[error("stddev must be strictly positive, found {0}")]
    NonPositiveStddev(f64),
    #[error("loss node must be a scalar, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Row-major dense tensor. Everything in the crate is f64; at this scale the
/// finite-difference tests are worth more than the speed of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named trainable tensors with deterministic iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), value).is_none(),
            "parameter `{name}` registered twice"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }
}

/// Gradient of a scalar loss with respect to every parameter that was loaded
/// into the graph, keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite differences against the tape, step 1e-5, guarded
    /// relative error. `build` must construct the loss from scratch on the
    /// supplied graph, so perturbed parameter sets are re-evaluated honestly.
    pub fn fd_check<F>(params: &ParamSet, build: F, tol: f64)
    where
        F: Fn(&mut Graph, &ParamSet) -> Var,
    {
        let mut g = Graph::new();
        let loss = build(&mut g, params);
        let grads = g.backward(loss).expect("backward failed in fd_check");

        let h = 1e-5;
        let mut worst = 0.0f64;
        for (name, tensor) in params.iter() {
            let analytic = grads
                .get(name)
                .unwrap_or_else(|| panic!("no gradient for `{name}`"));
            assert_eq!(analytic.shape, tensor.shape, "gradient shape for `{name}`");
            for i in 0..tensor.len() {
                let mut plus = params.clone();
                plus.get_mut(name).unwrap().data[i] += h;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap().data[i] -= h;

                let mut gp = Graph::new();
                let lp = build(&mut gp, &plus);
                let mut gm = Graph::new();
                let lm = build(&mut gm, &minus);
                let fd = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);

                let a = analytic.data[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                worst = worst.max(err);
                assert!(
                    err < tol,
                    "fd mismatch for `{name}`[{i}]: analytic {a}, fd {fd}, rel err {err}"
                );
            }
        }
        let _ = worst;
    }
}
