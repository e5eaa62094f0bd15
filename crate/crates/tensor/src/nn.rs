//! Transformer building blocks on top of the tape primitives.

use crate::error::TensorError;
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::{mask_value, Scalar};
use crate::tape::{Tape, Tx};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Projection weights for one multi-head attention sublayer, plus the
/// post-residual layer norm.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

impl AttentionParams {
    pub fn create<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        dim: usize,
        init_std: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut w = |suffix: &str, shape: &[usize], init: Init, rng: &mut Rng| {
            store.add(&format!("{prefix}.{suffix}"), shape, init, rng)
        };
        AttentionParams {
            wq: w("wq", &[dim, dim], Init::Normal(init_std), rng),
            bq: w("bq", &[dim], Init::Zeros, rng),
            wk: w("wk", &[dim, dim], Init::Normal(init_std), rng),
            bk: w("bk", &[dim], Init::Zeros, rng),
            wv: w("wv", &[dim, dim], Init::Normal(init_std), rng),
            bv: w("bv", &[dim], Init::Zeros, rng),
            wo: w("wo", &[dim, dim], Init::Normal(init_std), rng),
            bo: w("bo", &[dim], Init::Zeros, rng),
            norm_gain: w("norm_gain", &[dim], Init::Ones, rng),
            norm_bias: w("norm_bias", &[dim], Init::Zeros, rng),
        }
    }
}

/// Output of [`attention_layer`]; the probability tensor is exposed so tests
/// can assert row-stochasticity and causal structure.
pub struct AttentionOut {
    pub out: Tx,
    pub probs: Tx,
}

/// Additive mask leaf of shape `[lq, lk]` hiding keys beyond each query's
/// position. Key position j is visible to query i iff `j <= i + (lk - lq)`,
/// so with `lk > lq` the leading `lk - lq` context keys are visible to all.
pub fn causal_mask<S: Scalar>(tape: &mut Tape<S>, lq: usize, lk: usize) -> Tx {
    let off = lk - lq;
    let neg = mask_value::<S>();
    let mut data = vec![S::ZERO; lq * lk];
    for i in 0..lq {
        for j in 0..lk {
            if j > i + off {
                data[i * lk + j] = neg;
            }
        }
    }
    tape.leaf(&[lq, lk], data)
}

/// Additive key-padding mask of shape `[batch, 1, 1, lk]` from boolean
/// validity flags (`true` = attend).
pub fn key_padding_mask<S: Scalar>(tape: &mut Tape<S>, valid: &[bool], batch: usize, lk: usize) -> Tx {
    assert_eq!(valid.len(), batch * lk);
    let neg = mask_value::<S>();
    let data = valid
        .iter()
        .map(|&v| if v { S::ZERO } else { neg })
        .collect();
    tape.leaf(&[batch, 1, 1, lk], data)
}

/// Multi-head scaled dot-product attention with residual connection and
/// layer normalization. Queries come from `q_src`, keys and values from
/// `kv_src`; pass the same handle for self-attention.
///
/// `attn_mask` is any additive tensor broadcastable to the score shape
/// `[.., heads, Lq, Lk]` (combine causal and padding masks before calling,
/// or pass them through `Tape::add`).
pub fn attention_layer<S: Scalar>(
    tape: &mut Tape<S>,
    q_src: Tx,
    kv_src: Tx,
    heads: usize,
    causal: bool,
    attn_mask: Option<Tx>,
    p: &AttentionParams,
    store_view: &ParamView<S>,
) -> Result<AttentionOut, TensorError> {
    if tape.shape(q_src).len() < 2 || tape.shape(kv_src).len() < 2 {
        return Err(TensorError::Shape(
            "attention expects [.., len, dim] inputs".into(),
        ));
    }
    let d = *tape.shape(q_src).last().unwrap();
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Config(format!(
            "head count {heads} must divide feature dim {d}"
        )));
    }
    let lq = tape.shape(q_src)[tape.shape(q_src).len() - 2];
    let lk = tape.shape(kv_src)[tape.shape(kv_src).len() - 2];
    if lk == 0 {
        return Err(TensorError::Contract("attention needs at least one key".into()));
    }

    let q = linear(tape, q_src, store_view.get(p.wq), Some(store_view.get(p.bq)))?;
    let k = linear(tape, kv_src, store_view.get(p.wk), Some(store_view.get(p.bk)))?;
    let v = linear(tape, kv_src, store_view.get(p.wv), Some(store_view.get(p.bv)))?;

    let mut scores = tape.mh_scores(q, k, heads)?;
    if causal {
        let cm = causal_mask(tape, lq, lk);
        scores = tape.add(scores, cm)?;
    }
    if let Some(m) = attn_mask {
        scores = tape.add(scores, m)?;
    }
    let probs = tape.softmax_last(scores);
    let ctx = tape.mh_mix(probs, v, heads)?;
    let proj = linear(tape, ctx, store_view.get(p.wo), Some(store_view.get(p.bo)))?;
    let res = tape.add(q_src, proj)?;
    let out = tape.layer_norm(
        res,
        store_view.get(p.norm_gain),
        store_view.get(p.norm_bias),
        LAYER_NORM_EPS,
    )?;
    Ok(AttentionOut { out, probs })
}

/// Bias-free two-matrix feedforward: `GeLU(x W1)` with dropout in training
/// mode, then `W2`. Evaluation mode is deterministic.
pub fn feedforward_gelu<S: Scalar>(
    tape: &mut Tape<S>,
    x: Tx,
    w1: Tx,
    w2: Tx,
    dropout_rate: f64,
) -> Result<Tx, TensorError> {
    let h = tape.matmul(x, w1)?;
    let h = tape.gelu(h);
    let h = tape.dropout(h, dropout_rate)?;
    tape.matmul(h, w2)
}

/// `x W + b`.
pub fn linear<S: Scalar>(
    tape: &mut Tape<S>,
    x: Tx,
    w: Tx,
    b: Option<Tx>,
) -> Result<Tx, TensorError> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Parameter handles materialized on a tape for one forward pass, so layer
/// code can refer to `ParamId`s without threading `Tx` values everywhere.
pub struct ParamView<S: Scalar> {
    handles: Vec<Tx>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> ParamView<S> {
    /// Push every parameter onto the tape once.
    pub fn attach(tape: &mut Tape<S>, store: &ParamStore<S>) -> Self {
        let handles = (0..store.len())
            .map(|i| tape.param(store, ParamId(i)))
            .collect();
        ParamView {
            handles,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn get(&self, id: ParamId) -> Tx {
        self.handles[id.0]
    }
}
