//! Named parameter storage shared across forward passes.

use crate::error::TensorError;
use crate::rng::Rng;
use crate::scalar::Scalar;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
}

pub struct Param<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<S>,
    /// Populated by backward sweeps; `None` until the first deposit.
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Param<S> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All trainable parameters of a model, in registration order. Registration
/// order is part of the checkpoint format, so keep construction deterministic.
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut Rng) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![S::ZERO; n],
            Init::Ones => vec![S::ONE; n],
            Init::Normal(std) => (0..n)
                .map(|_| S::from_f64(rng.normal_scaled(0.0, std)))
                .collect(),
        };
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
            grad: None,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[S]) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(g.len(), p.values.len());
        let grad = p.grad.get_or_insert_with(|| vec![S::ZERO; g.len()]);
        for (d, &s) in grad.iter_mut().zip(g) {
            *d += s;
        }
    }

    /// Explicitly mark a parameter as having an all-zero gradient.
    pub fn set_zero_grad(&mut self, id: ParamId) {
        let n = self.params[id.0].values.len();
        self.params[id.0].grad = Some(vec![S::ZERO; n]);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn any_grad(&self) -> bool {
        self.params.iter().any(|p| p.grad.is_some())
    }

    /// Total number of scalar parameters.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Abort-with-context check used by the trainer after each step.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        for p in &self.params {
            if p.values.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::Contract(format!(
                    "parameter {} contains non-finite values",
                    p.name
                )));
            }
        }
        Ok(())
    }
}
