//! AdamW with decoupled weight decay, a linear-to-zero learning-rate
//! schedule, and global-norm gradient clipping.

use crate::error::TensorError;
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear decay from the peak rate to zero over `total_steps`, without
    /// warmup. The first step runs at the full peak rate.
    LinearToZero { total_steps: u64 },
}

pub struct AdamW<S: Scalar> {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(store: &ParamStore<S>, lr_peak: f64, weight_decay: f64, schedule: LrSchedule) -> Self {
        let m = store.iter().map(|(_, p)| vec![S::ZERO; p.numel()]).collect();
        let v = store.iter().map(|(_, p)| vec![S::ZERO; p.numel()]).collect();
        AdamW {
            lr_peak,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            schedule,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate used by step number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr_peak,
            LrSchedule::LinearToZero { total_steps } => {
                let total = total_steps.max(1);
                let done = (step - 1).min(total);
                self.lr_peak * (total - done) as f64 / total as f64
            }
        }
    }

    /// One update. Weight decay is applied directly to the weights at the
    /// scheduled rate, not through the moment estimates.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<(), TensorError> {
        if !store.any_grad() {
            return Err(TensorError::Contract(
                "optimizer step with no gradients populated".into(),
            ));
        }
        self.step += 1;
        let lr = self.lr_at(self.step);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let (ob1, ob2) = (S::from_f64(1.0 - self.beta1), S::from_f64(1.0 - self.beta2));
        let eps = S::from_f64(self.eps);
        let lr_s = S::from_f64(lr);
        let decay = S::from_f64(1.0 - lr * self.weight_decay);
        let (inv_bc1, inv_bc2) = (S::from_f64(1.0 / bc1), S::from_f64(1.0 / bc2));

        for (i, p) in store.iter_mut().enumerate() {
            let Some(grad) = p.grad.as_ref() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.values.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + ob1 * g;
                v[j] = b2 * v[j] + ob2 * g * g;
                let mhat = m[j] * inv_bc1;
                let vhat = v[j] * inv_bc2;
                if self.weight_decay != 0.0 {
                    p.values[j] *= decay;
                }
                p.values[j] -= lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub(crate) fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn restore(&mut self, step: u64, m: Vec<Vec<S>>, v: Vec<Vec<S>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// Scale all populated gradients by `max_norm / norm` when the global L2
/// norm exceeds `max_norm`. Returns the observed (pre-clip) norm.
pub fn clip_global_norm<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip norm must be positive");
    let mut sq = 0.0f64;
    for (_, p) in store.iter() {
        if let Some(g) = p.grad.as_ref() {
            for &v in g {
                let x = v.to_f64();
                sq += x * x;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = S::from_f64(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
    norm
}
