//! Append-only computation tape with reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Handles
//! ([`Tx`]) are indices into the tape, so the node order is already a
//! topological order and backward is a single reverse sweep. Parameter leaves
//! remember their [`ParamStore`] slot and deposit gradients there.

use crate::error::TensorError;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;

pub type Shape = Vec<usize>;

/// Handle to a tensor living on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tx(pub usize);

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Param(ParamId),
    Add(Tx, Tx),
    Sub(Tx, Tx),
    Mul(Tx, Tx),
    Neg(Tx),
    Scale(Tx, S),
    MatMul(Tx, Tx),
    MatMulBt(Tx, Tx),
    Gelu(Tx),
    Sigmoid(Tx),
    SoftmaxLast(Tx),
    LogSoftmaxLast(Tx),
    LayerNorm {
        x: Tx,
        gain: Tx,
        bias: Tx,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Dropout {
        x: Tx,
        mask: Vec<S>,
    },
    Embed {
        table: Tx,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Tx,
        idx: Vec<usize>,
    },
    SelectPerBatch {
        x: Tx,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Tx>),
    ConcatCols(Tx, Tx),
    ConcatMid(Tx, Tx),
    Reshape(Tx),
    MhScores {
        q: Tx,
        k: Tx,
        heads: usize,
    },
    MhMix {
        probs: Tx,
        v: Tx,
        heads: usize,
    },
    SumAll(Tx),
    MeanAll(Tx),
    SumLast(Tx),
    RsqrtEps(Tx, S),
    Nll {
        logp: Tx,
        targets: Vec<usize>,
        weights: Vec<S>,
        denom: S,
    },
    BceLogits {
        logits: Tx,
        labels: Vec<S>,
        weights: Vec<S>,
        denom: S,
    },
}

struct Node<S: Scalar> {
    shape: Shape,
    data: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients of one backward sweep, indexed by tape handle.
pub struct Grads<S: Scalar> {
    by_node: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, t: Tx) -> Option<&[S]> {
        self.by_node.get(t.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    pub training: bool,
    rng: Rng,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Split a shape into (leading rows, trailing columns) for last-axis ops.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (numel(shape) / cols.max(1), cols)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Shape, TensorError> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::Shape(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Row-major strides with zeros on broadcast axes, right-aligned to `out`.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let offset = nd - shape.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn apply_binary<S: Scalar>(
    a: &[S],
    ashape: &[usize],
    b: &[S],
    bshape: &[usize],
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    let n = numel(out_shape);
    if ashape == bshape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = bcast_strides(ashape, out_shape);
    let sb = bcast_strides(bshape, out_shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a[oa], b[ob]));
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum `grad` (shaped `from`) down to `to` for broadcast backward.
fn reduce_to_shape<S: Scalar>(grad: &[S], from: &[usize], to: &[usize]) -> Vec<S> {
    if from == to {
        return grad.to_vec();
    }
    let strides = bcast_strides(to, from);
    let mut out = vec![S::ZERO; numel(to)];
    let mut idx = vec![0usize; from.len()];
    let mut off = 0usize;
    for &g in grad {
        out[off] += g;
        for d in (0..from.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
            off -= strides[d] * from[d];
        }
    }
    out
}

impl<S: Scalar> Tape<S> {
    pub fn new(training: bool, seed: u64) -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            training,
            rng: Rng::new(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: Tx) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: Tx) -> &[S] {
        &self.nodes[t.0].data
    }

    pub fn scalar_value(&self, t: Tx) -> S {
        debug_assert_eq!(numel(&self.nodes[t.0].shape), 1);
        self.nodes[t.0].data[0]
    }

    fn push(&mut self, shape: Shape, data: Vec<S>, op: Op<S>, needs_grad: bool) -> Tx {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Tx(self.nodes.len() - 1)
    }

    fn ng(&self, t: Tx) -> bool {
        self.nodes[t.0].needs_grad
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, shape: &[usize], data: Vec<S>) -> Tx {
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    /// Leaf that participates in backward; gradients are readable from the
    /// sweep result. Used by tests and the finite-difference harness.
    pub fn leaf_grad(&mut self, shape: &[usize], data: Vec<S>) -> Tx {
        self.push(shape.to_vec(), data, Op::Leaf, true)
    }

    pub fn scalar_leaf(&mut self, v: S) -> Tx {
        self.leaf(&[1], vec![v])
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tx {
        let data = vec![S::ZERO; numel(shape)];
        self.leaf(shape, data)
    }

    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Tx {
        let p = store.get(id);
        self.push(p.shape.clone(), p.values.clone(), Op::Param(id), true)
    }

    /// Leaf copy of `x`: same values, no gradient path. Backward sweeps
    /// never traverse past it.
    pub fn detach(&mut self, x: Tx) -> Tx {
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0].data.clone();
        self.push(shape, data, Op::Leaf, false)
    }

    // ---- elementwise and broadcast ops --------------------------------

    pub fn add(&mut self, a: Tx, b: Tx) -> Result<Tx, TensorError> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let data = apply_binary(
            self.value(a),
            self.shape(a),
            self.value(b),
            self.shape(b),
            &shape,
            |x, y| x + y,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, data, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Tx, b: Tx) -> Result<Tx, TensorError> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let data = apply_binary(
            self.value(a),
            self.shape(a),
            self.value(b),
            self.shape(b),
            &shape,
            |x, y| x - y,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, data, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Tx, b: Tx) -> Result<Tx, TensorError> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let data = apply_binary(
            self.value(a),
            self.shape(a),
            self.value(b),
            self.shape(b),
            &shape,
            |x, y| x * y,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, data, Op::Mul(a, b), ng))
    }

    pub fn neg(&mut self, x: Tx) -> Tx {
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0].data.iter().map(|&v| -v).collect();
        let ng = self.ng(x);
        self.push(shape, data, Op::Neg(x), ng)
    }

    pub fn scale(&mut self, x: Tx, c: S) -> Tx {
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let ng = self.ng(x);
        self.push(shape, data, Op::Scale(x, c), ng)
    }

    // ---- linear algebra ------------------------------------------------

    /// `[.., M, K] x [K, N] -> [.., M, N]`. Leading axes of `a` are treated
    /// as stacked rows, so one gemm covers the whole batch.
    pub fn matmul(&mut self, a: Tx, b: Tx) -> Result<Tx, TensorError> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.is_empty() || bsh.len() != 2 {
            return Err(TensorError::Shape(format!(
                "matmul expects [.., M, K] x [K, N], got {ash:?} x {bsh:?}"
            )));
        }
        let k = *ash.last().unwrap();
        let (kb, n) = (bsh[0], bsh[1]);
        if k != kb {
            return Err(TensorError::Shape(format!(
                "matmul inner dims differ: {ash:?} x {bsh:?}"
            )));
        }
        let rows = numel(ash) / k;
        let mut out_shape = ash.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut data = vec![S::ZERO; rows * n];
        unsafe {
            S::gemm(
                rows,
                k,
                n,
                S::ONE,
                self.value(a).as_ptr(),
                k as isize,
                1,
                self.value(b).as_ptr(),
                n as isize,
                1,
                S::ZERO,
                data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out_shape, data, Op::MatMul(a, b), ng))
    }

    /// `[M, K] x [N, K]^T -> [M, N]`.
    pub fn matmul_bt(&mut self, a: Tx, b: Tx) -> Result<Tx, TensorError> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[1] {
            return Err(TensorError::Shape(format!(
                "matmul_bt expects [M, K] x [N, K], got {ash:?} x {bsh:?}"
            )));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[0]);
        let mut data = vec![S::ZERO; m * n];
        unsafe {
            S::gemm(
                m,
                k,
                n,
                S::ONE,
                self.value(a).as_ptr(),
                k as isize,
                1,
                self.value(b).as_ptr(),
                1,
                k as isize,
                S::ZERO,
                data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], data, Op::MatMulBt(a, b), ng))
    }

    // ---- activations -----------------------------------------------------

    pub fn gelu(&mut self, x: Tx) -> Tx {
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| crate::scalar::gelu_scalar(v))
            .collect();
        let ng = self.ng(x);
        self.push(shape, data, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Tx) -> Tx {
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| S::ONE / (S::ONE + (-v).exp()))
            .collect();
        let ng = self.ng(x);
        self.push(shape, data, Op::Sigmoid(x), ng)
    }

    pub fn softmax_last(&mut self, x: Tx) -> Tx {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        let mut data = vec![S::ZERO; rows * cols];
        for r in 0..rows {
            let xin = &self.nodes[x.0].data[r * cols..(r + 1) * cols];
            let mut m = xin[0];
            for &v in xin {
                m = m.maxv(v);
            }
            let mut sum = S::ZERO;
            for c in 0..cols {
                let e = (xin[c] - m).exp();
                data[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                data[r * cols + c] = data[r * cols + c] / sum;
            }
        }
        let ng = self.ng(x);
        self.push(shape, data, Op::SoftmaxLast(x), ng)
    }

    pub fn log_softmax_last(&mut self, x: Tx) -> Tx {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        let mut data = vec![S::ZERO; rows * cols];
        for r in 0..rows {
            let xin = &self.nodes[x.0].data[r * cols..(r + 1) * cols];
            let mut m = xin[0];
            for &v in xin {
                m = m.maxv(v);
            }
            let mut sum = S::ZERO;
            for &v in xin {
                sum += (v - m).exp();
            }
            let lse = m + sum.ln();
            for c in 0..cols {
                data[r * cols + c] = xin[c] - lse;
            }
        }
        let ng = self.ng(x);
        self.push(shape, data, Op::LogSoftmaxLast(x), ng)
    }

    pub fn layer_norm(&mut self, x: Tx, gain: Tx, bias: Tx, eps: f64) -> Result<Tx, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(TensorError::Shape(format!(
                "layer_norm affine params must be [{cols}], got {:?} / {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let epss = S::from_f64(eps);
        let inv_cols = S::from_f64(1.0 / cols as f64);
        let mut data = vec![S::ZERO; rows * cols];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let xin = &self.nodes[x.0].data[r * cols..(r + 1) * cols];
            let mut mean = S::ZERO;
            for &v in xin {
                mean += v;
            }
            mean *= inv_cols;
            let mut var = S::ZERO;
            for &v in xin {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_cols;
            let rstd = S::ONE / (var + epss).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let g = &self.nodes[gain.0].data;
            let b = &self.nodes[bias.0].data;
            for c in 0..cols {
                data[r * cols + c] = (xin[c] - mean) * rstd * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            shape,
            data,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            ng,
        ))
    }

    /// Inverted dropout: identity unless the tape is in training mode.
    pub fn dropout(&mut self, x: Tx, rate: f64) -> Result<Tx, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let shape = self.nodes[x.0].shape.clone();
        let keep = 1.0 - rate;
        let scale = S::from_f64(1.0 / keep);
        let mask: Vec<S> = (0..numel(&shape))
            .map(|_| {
                if self.rng.uniform() < rate {
                    S::ZERO
                } else {
                    scale
                }
            })
            .collect();
        let data = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let ng = self.ng(x);
        Ok(self.push(shape, data, Op::Dropout { x, mask }, ng))
    }

    // ---- gather / scatter style ops -------------------------------------

    /// Row lookup: `table [V, D]`, `ids` of any length -> `[len(ids), D]`
    /// (or `out_shape` when given, e.g. `[B, L, D]`).
    pub fn embed(&mut self, table: Tx, ids: &[usize], out_batch: Option<&[usize]>) -> Result<Tx, TensorError> {
        let tsh = self.shape(table);
        if tsh.len() != 2 {
            return Err(TensorError::Shape(format!(
                "embedding table must be 2-d, got {tsh:?}"
            )));
        }
        let (v, d) = (tsh[0], tsh[1]);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Contract(format!(
                    "embedding id {id} out of range (table rows {v})"
                )));
            }
        }
        let mut shape: Shape = match out_batch {
            Some(lead) => {
                if numel(lead) != ids.len() {
                    return Err(TensorError::Shape(
                        "embed leading shape does not match id count".into(),
                    ));
                }
                lead.to_vec()
            }
            None => vec![ids.len()],
        };
        shape.push(d);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            shape,
            data,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Gather slices along axis 0.
    pub fn select_rows(&mut self, x: Tx, idx: &[usize]) -> Result<Tx, TensorError> {
        let xsh = self.shape(x).to_vec();
        if xsh.is_empty() {
            return Err(TensorError::Shape("select_rows on scalar".into()));
        }
        let slice = numel(&xsh) / xsh[0];
        for &i in idx {
            if i >= xsh[0] {
                return Err(TensorError::Contract(format!(
                    "row index {i} out of range (rows {})",
                    xsh[0]
                )));
            }
        }
        let mut shape = xsh.clone();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * slice);
        for &i in idx {
            data.extend_from_slice(&self.nodes[x.0].data[i * slice..(i + 1) * slice]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            shape,
            data,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// `x [B, L, D]` with one row index per batch entry -> `[B, D]`.
    pub fn select_per_batch(&mut self, x: Tx, idx: &[usize]) -> Result<Tx, TensorError> {
        let xsh = self.shape(x).to_vec();
        if xsh.len() != 3 || idx.len() != xsh[0] {
            return Err(TensorError::Shape(format!(
                "select_per_batch expects [B, L, D] with B indices, got {xsh:?} / {}",
                idx.len()
            )));
        }
        let (l, d) = (xsh[1], xsh[2]);
        for &i in idx {
            if i >= l {
                return Err(TensorError::Contract(format!(
                    "per-batch index {i} out of range (length {l})"
                )));
            }
        }
        let mut data = Vec::with_capacity(xsh[0] * d);
        for (b, &i) in idx.iter().enumerate() {
            let off = (b * l + i) * d;
            data.extend_from_slice(&self.nodes[x.0].data[off..off + d]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            vec![xsh[0], d],
            data,
            Op::SelectPerBatch {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Stack along axis 0; all parts must agree on trailing dims.
    pub fn concat_rows(&mut self, parts: &[Tx]) -> Result<Tx, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_rows of nothing".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        let trailing = &first[1..];
        let mut rows = 0usize;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != first.len() || &sh[1..] != trailing {
                return Err(TensorError::Shape(format!(
                    "concat_rows trailing dims differ: {first:?} vs {sh:?}"
                )));
            }
            rows += sh[0];
        }
        let mut shape = first.clone();
        shape[0] = rows;
        let mut data = Vec::with_capacity(numel(&shape));
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape, data, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// 2-d concat along the feature axis.
    pub fn concat_cols(&mut self, a: Tx, b: Tx) -> Result<Tx, TensorError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[0] != bsh[0] {
            return Err(TensorError::Shape(format!(
                "concat_cols expects matching row counts, got {ash:?} / {bsh:?}"
            )));
        }
        let (r, ca, cb) = (ash[0], ash[1], bsh[1]);
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&self.nodes[a.0].data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&self.nodes[b.0].data[i * cb..(i + 1) * cb]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![r, ca + cb], data, Op::ConcatCols(a, b), ng))
    }

    pub fn reshape(&mut self, x: Tx, shape: &[usize]) -> Result<Tx, TensorError> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(TensorError::Shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), ng))
    }

    // ---- attention primitives -------------------------------------------

    /// Per-head scaled dot products.
    /// `q [.., Lq, D]`, `k [.., Lk, D]` -> `[.., H, Lq, Lk]`, scaled by
    /// `1/sqrt(D/H)`. Leading batch dims must match exactly.
    pub fn mh_scores(&mut self, q: Tx, k: Tx, heads: usize) -> Result<Tx, TensorError> {
        let (qsh, ksh) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if qsh.len() < 2 || ksh.len() < 2 || qsh[..qsh.len() - 2] != ksh[..ksh.len() - 2] {
            return Err(TensorError::Shape(format!(
                "mh_scores batch dims differ: {qsh:?} vs {ksh:?}"
            )));
        }
        let d = *qsh.last().unwrap();
        if d != *ksh.last().unwrap() {
            return Err(TensorError::Shape(format!(
                "mh_scores feature dims differ: {qsh:?} vs {ksh:?}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "head count {heads} must divide feature dim {d}"
            )));
        }
        let dh = d / heads;
        let lq = qsh[qsh.len() - 2];
        let lk = ksh[ksh.len() - 2];
        if lk == 0 {
            return Err(TensorError::Contract("mh_scores with zero keys".into()));
        }
        let batch = numel(&qsh[..qsh.len() - 2]);
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let mut shape = qsh[..qsh.len() - 2].to_vec();
        shape.extend_from_slice(&[heads, lq, lk]);
        let mut data = vec![S::ZERO; batch * heads * lq * lk];
        let qdat = self.nodes[q.0].data.as_ptr();
        let kdat = self.nodes[k.0].data.as_ptr();
        for bi in 0..batch {
            for h in 0..heads {
                unsafe {
                    S::gemm(
                        lq,
                        dh,
                        lk,
                        scale,
                        qdat.add(bi * lq * d + h * dh),
                        d as isize,
                        1,
                        kdat.add(bi * lk * d + h * dh),
                        1,
                        d as isize,
                        S::ZERO,
                        data.as_mut_ptr().add((bi * heads + h) * lq * lk),
                        lk as isize,
                        1,
                    );
                }
            }
        }
        let ng = self.ng(q) || self.ng(k);
        Ok(self.push(shape, data, Op::MhScores { q, k, heads }, ng))
    }

    /// Recombine heads: `probs [.., H, Lq, Lk]`, `v [.., Lk, D]` -> `[.., Lq, D]`.
    pub fn mh_mix(&mut self, probs: Tx, v: Tx, heads: usize) -> Result<Tx, TensorError> {
        let (psh, vsh) = (self.shape(probs).to_vec(), self.shape(v).to_vec());
        if psh.len() < 3 || vsh.len() < 2 {
            return Err(TensorError::Shape(format!(
                "mh_mix expects [.., H, Lq, Lk] and [.., Lk, D], got {psh:?} / {vsh:?}"
            )));
        }
        let (h, lq, lk) = (psh[psh.len() - 3], psh[psh.len() - 2], psh[psh.len() - 1]);
        let d = *vsh.last().unwrap();
        if h != heads || vsh[vsh.len() - 2] != lk || d % heads != 0 {
            return Err(TensorError::Shape(format!(
                "mh_mix inconsistent shapes: {psh:?} / {vsh:?} with {heads} heads"
            )));
        }
        if psh[..psh.len() - 3] != vsh[..vsh.len() - 2] {
            return Err(TensorError::Shape(format!(
                "mh_mix batch dims differ: {psh:?} vs {vsh:?}"
            )));
        }
        let dh = d / heads;
        let batch = numel(&psh[..psh.len() - 3]);
        let mut shape = psh[..psh.len() - 3].to_vec();
        shape.extend_from_slice(&[lq, d]);
        let mut data = vec![S::ZERO; batch * lq * d];
        let pdat = self.nodes[probs.0].data.as_ptr();
        let vdat = self.nodes[v.0].data.as_ptr();
        for bi in 0..batch {
            for hi in 0..heads {
                unsafe {
                    S::gemm(
                        lq,
                        lk,
                        dh,
                        S::ONE,
                        pdat.add((bi * heads + hi) * lq * lk),
                        lk as isize,
                        1,
                        vdat.add(bi * lk * d + hi * dh),
                        d as isize,
                        1,
                        S::ZERO,
                        data.as_mut_ptr().add(bi * lq * d + hi * dh),
                        d as isize,
                        1,
                    );
                }
            }
        }
        let ng = self.ng(probs) || self.ng(v);
        Ok(self.push(shape, data, Op::MhMix { probs, v, heads }, ng))
    }

    // ---- reductions and losses --------------------------------------------

    pub fn sum_all(&mut self, x: Tx) -> Tx {
        let mut s = S::ZERO;
        for &v in &self.nodes[x.0].data {
            s += v;
        }
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Tx) -> Tx {
        let n = self.nodes[x.0].data.len();
        let mut s = S::ZERO;
        for &v in &self.nodes[x.0].data {
            s += v;
        }
        let ng = self.ng(x);
        self.push(
            vec![1],
            vec![s * S::from_f64(1.0 / n as f64)],
            Op::MeanAll(x),
            ng,
        )
    }

    /// Reduce the last axis, keeping it as size 1.
    pub fn sum_last(&mut self, x: Tx) -> Tx {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, cols) = rows_cols(&shape);
        let mut data = vec![S::ZERO; rows];
        for r in 0..rows {
            for c in 0..cols {
                data[r] += self.nodes[x.0].data[r * cols + c];
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = 1;
        let ng = self.ng(x);
        self.push(out_shape, data, Op::SumLast(x), ng)
    }

    pub fn rsqrt_eps(&mut self, x: Tx, eps: f64) -> Tx {
        let e = S::from_f64(eps);
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| S::ONE / (v + e).sqrt())
            .collect();
        let ng = self.ng(x);
        self.push(shape, data, Op::RsqrtEps(x, e), ng)
    }

    /// Weighted negative log-likelihood over rows of `logp [N, C]`:
    /// `-(sum_i w_i * logp[i, t_i]) / denom`.
    pub fn nll(
        &mut self,
        logp: Tx,
        targets: &[usize],
        weights: &[S],
        denom: f64,
    ) -> Result<Tx, TensorError> {
        let shape = self.shape(logp).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::Contract(format!(
                "nll expects {rows} targets/weights, got {}/{}",
                targets.len(),
                weights.len()
            )));
        }
        if denom <= 0.0 {
            return Err(TensorError::Contract("nll denom must be positive".into()));
        }
        for (&t, &w) in targets.iter().zip(weights) {
            if w != S::ZERO && t >= cols {
                return Err(TensorError::Contract(format!(
                    "nll target {t} out of range (classes {cols})"
                )));
            }
        }
        let d = S::from_f64(denom);
        let mut s = S::ZERO;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w != S::ZERO {
                s += w * self.nodes[logp.0].data[r * cols + t];
            }
        }
        let ng = self.ng(logp);
        Ok(self.push(
            vec![1],
            vec![-s / d],
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                denom: d,
            },
            ng,
        ))
    }

    /// Numerically stable binary cross-entropy on logits:
    /// `sum_i w_i * (max(z,0) - z*y + ln(1 + exp(-|z|))) / denom`.
    pub fn bce_logits(
        &mut self,
        logits: Tx,
        labels: &[S],
        weights: &[S],
        denom: f64,
    ) -> Result<Tx, TensorError> {
        let n = self.nodes[logits.0].data.len();
        if labels.len() != n || weights.len() != n {
            return Err(TensorError::Contract(format!(
                "bce expects {n} labels/weights, got {}/{}",
                labels.len(),
                weights.len()
            )));
        }
        if denom <= 0.0 {
            return Err(TensorError::Contract("bce denom must be positive".into()));
        }
        let d = S::from_f64(denom);
        let mut s = S::ZERO;
        for i in 0..n {
            let z = self.nodes[logits.0].data[i];
            let y = labels[i];
            let l = z.maxv(S::ZERO) - z * y + (S::ONE + (-z.abs()).exp()).ln();
            s += weights[i] * l;
        }
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![s / d],
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                denom: d,
            },
            ng,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate into
    /// `store`; gradients of `leaf_grad` inputs are readable from the result.
    pub fn backward(&mut self, loss: Tx, store: &mut ParamStore<S>) -> Result<Grads<S>, TensorError> {
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::ONE]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads, store);
            // Keep leaf/input gradients readable after the sweep.
            if matches!(self.nodes[id].op, Op::Leaf | Op::Param(_)) {
                grads[id] = Some(g);
            }
        }
        Ok(Grads { by_node: grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<S>>], t: Tx, add: impl FnOnce(&mut [S])) {
        if !self.nodes[t.0].needs_grad {
            return;
        }
        let slot = &mut grads[t.0];
        if slot.is_none() {
            *slot = Some(vec![S::ZERO; self.nodes[t.0].data.len()]);
        }
        add(slot.as_mut().unwrap());
    }

    fn backprop_node(
        &self,
        id: usize,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
        store: &mut ParamStore<S>,
    ) {
        let node = &self.nodes[id];
        let out_shape = &node.shape;
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => {
                store.accumulate_grad(*pid, g);
            }
            Op::Add(a, b) => {
                let ra = reduce_to_shape(g, out_shape, self.shape(*a));
                self.accum(grads, *a, |dst| add_into(dst, &ra));
                let rb = reduce_to_shape(g, out_shape, self.shape(*b));
                self.accum(grads, *b, |dst| add_into(dst, &rb));
            }
            Op::Sub(a, b) => {
                let ra = reduce_to_shape(g, out_shape, self.shape(*a));
                self.accum(grads, *a, |dst| add_into(dst, &ra));
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                let rb = reduce_to_shape(&neg, out_shape, self.shape(*b));
                self.accum(grads, *b, |dst| add_into(dst, &rb));
            }
            Op::Mul(a, b) => {
                let ga = apply_binary(g, out_shape, self.value(*b), self.shape(*b), out_shape, |x, y| x * y);
                let ra = reduce_to_shape(&ga, out_shape, self.shape(*a));
                self.accum(grads, *a, |dst| add_into(dst, &ra));
                let gb = apply_binary(g, out_shape, self.value(*a), self.shape(*a), out_shape, |x, y| x * y);
                let rb = reduce_to_shape(&gb, out_shape, self.shape(*b));
                self.accum(grads, *b, |dst| add_into(dst, &rb));
            }
            Op::Neg(x) => {
                self.accum(grads, *x, |dst| {
                    for (d, &v) in dst.iter_mut().zip(g) {
                        *d -= v;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accum(grads, *x, |dst| {
                    for (d, &v) in dst.iter_mut().zip(g) {
                        *d += v * c;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let k = *self.shape(*a).last().unwrap();
                let n = self.shape(*b)[1];
                let rows = numel(self.shape(*a)) / k;
                let bdat = self.nodes[b.0].data.as_ptr();
                let adat = self.nodes[a.0].data.as_ptr();
                // dA = dC * B^T
                self.accum(grads, *a, |dst| unsafe {
                    S::gemm(
                        rows, n, k, S::ONE, g.as_ptr(), n as isize, 1, bdat, 1, n as isize,
                        S::ONE, dst.as_mut_ptr(), k as isize, 1,
                    );
                });
                // dB = A^T * dC
                self.accum(grads, *b, |dst| unsafe {
                    S::gemm(
                        k, rows, n, S::ONE, adat, 1, k as isize, g.as_ptr(), n as isize, 1,
                        S::ONE, dst.as_mut_ptr(), n as isize, 1,
                    );
                });
            }
            Op::MatMulBt(a, b) => {
                let (m, kk) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let bdat = self.nodes[b.0].data.as_ptr();
                let adat = self.nodes[a.0].data.as_ptr();
                // dA = dC * B
                self.accum(grads, *a, |dst| unsafe {
                    S::gemm(
                        m, n, kk, S::ONE, g.as_ptr(), n as isize, 1, bdat, kk as isize, 1,
                        S::ONE, dst.as_mut_ptr(), kk as isize, 1,
                    );
                });
                // dB = dC^T * A
                self.accum(grads, *b, |dst| unsafe {
                    S::gemm(
                        n, m, kk, S::ONE, g.as_ptr(), 1, n as isize, adat, kk as isize, 1,
                        S::ONE, dst.as_mut_ptr(), kk as isize, 1,
                    );
                });
            }
            Op::Gelu(x) => {
                let xin = self.value(*x);
                self.accum(grads, *x, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * crate::scalar::gelu_grad_scalar(xin[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.data;
                self.accum(grads, *x, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * y[i] * (S::ONE - y[i]);
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let (rows, cols) = rows_cols(out_shape);
                let y = &node.data;
                self.accum(grads, *x, |dst| {
                    for r in 0..rows {
                        let o = r * cols;
                        let mut dot = S::ZERO;
                        for c in 0..cols {
                            dot += g[o + c] * y[o + c];
                        }
                        for c in 0..cols {
                            dst[o + c] += y[o + c] * (g[o + c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxLast(x) => {
                let (rows, cols) = rows_cols(out_shape);
                let y = &node.data;
                self.accum(grads, *x, |dst| {
                    for r in 0..rows {
                        let o = r * cols;
                        let mut gsum = S::ZERO;
                        for c in 0..cols {
                            gsum += g[o + c];
                        }
                        for c in 0..cols {
                            dst[o + c] += g[o + c] - y[o + c].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (rows, cols) = rows_cols(out_shape);
                let xin = self.value(*x);
                let gdat = self.value(*gain);
                let inv_cols = S::from_f64(1.0 / cols as f64);
                self.accum(grads, *bias, |dst| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dst[c] += g[r * cols + c];
                        }
                    }
                });
                self.accum(grads, *gain, |dst| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let xh = (xin[r * cols + c] - mean[r]) * rstd[r];
                            dst[c] += g[r * cols + c] * xh;
                        }
                    }
                });
                self.accum(grads, *x, |dst| {
                    for r in 0..rows {
                        let o = r * cols;
                        let mut sum_dxh = S::ZERO;
                        let mut sum_dxh_xh = S::ZERO;
                        for c in 0..cols {
                            let xh = (xin[o + c] - mean[r]) * rstd[r];
                            let dxh = g[o + c] * gdat[c];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let m1 = sum_dxh * inv_cols;
                        let m2 = sum_dxh_xh * inv_cols;
                        for c in 0..cols {
                            let xh = (xin[o + c] - mean[r]) * rstd[r];
                            let dxh = g[o + c] * gdat[c];
                            dst[o + c] += rstd[r] * (dxh - m1 - xh * m2);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accum(grads, *x, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Embed { table, ids } => {
                let d = self.shape(*table)[1];
                self.accum(grads, *table, |dst| {
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dst[id * d + c] += g[row * d + c];
                        }
                    }
                });
            }
            Op::SelectRows { x, idx } => {
                let slice = numel(self.shape(*x)) / self.shape(*x)[0];
                self.accum(grads, *x, |dst| {
                    for (row, &i) in idx.iter().enumerate() {
                        for c in 0..slice {
                            dst[i * slice + c] += g[row * slice + c];
                        }
                    }
                });
            }
            Op::SelectPerBatch { x, idx } => {
                let xsh = self.shape(*x);
                let (l, d) = (xsh[1], xsh[2]);
                self.accum(grads, *x, |dst| {
                    for (b, &i) in idx.iter().enumerate() {
                        let off = (b * l + i) * d;
                        for c in 0..d {
                            dst[off + c] += g[b * d + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0usize;
                for &p in parts {
                    let n = self.nodes[p.0].data.len();
                    let gslice = &g[off..off + n];
                    self.accum(grads, p, |dst| add_into(dst, gslice));
                    off += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = (self.shape(*a)[0], self.shape(*a)[1]);
                let cb = self.shape(*b)[1];
                let w = ca + cb;
                self.accum(grads, *a, |dst| {
                    for i in 0..r {
                        for c in 0..ca {
                            dst[i * ca + c] += g[i * w + c];
                        }
                    }
                });
                self.accum(grads, *b, |dst| {
                    for i in 0..r {
                        for c in 0..cb {
                            dst[i * cb + c] += g[i * w + ca + c];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, |dst| add_into(dst, g));
            }
            Op::MhScores { q, k, heads } => {
                let qsh = self.shape(*q);
                let d = *qsh.last().unwrap();
                let dh = d / heads;
                let lq = qsh[qsh.len() - 2];
                let ksh = self.shape(*k);
                let lk = ksh[ksh.len() - 2];
                let batch = numel(&qsh[..qsh.len() - 2]);
                let scale = S::from_f64(1.0 / (dh as f64).sqrt());
                let qdat = self.nodes[q.0].data.as_ptr();
                let kdat = self.nodes[k.0].data.as_ptr();
                let heads = *heads;
                // dQ_h += scale * dS_h * K_h ; dK_h += scale * dS_h^T * Q_h
                self.accum(grads, *q, |dst| {
                    for bi in 0..batch {
                        for h in 0..heads {
                            unsafe {
                                S::gemm(
                                    lq,
                                    lk,
                                    dh,
                                    scale,
                                    g.as_ptr().add((bi * heads + h) * lq * lk),
                                    lk as isize,
                                    1,
                                    kdat.add(bi * lk * d + h * dh),
                                    d as isize,
                                    1,
                                    S::ONE,
                                    dst.as_mut_ptr().add(bi * lq * d + h * dh),
                                    d as isize,
                                    1,
                                );
                            }
                        }
                    }
                });
                self.accum(grads, *k, |dst| {
                    for bi in 0..batch {
                        for h in 0..heads {
                            unsafe {
                                S::gemm(
                                    lk,
                                    lq,
                                    dh,
                                    scale,
                                    g.as_ptr().add((bi * heads + h) * lq * lk),
                                    1,
                                    lk as isize,
                                    qdat.add(bi * lq * d + h * dh),
                                    d as isize,
                                    1,
                                    S::ONE,
                                    dst.as_mut_ptr().add(bi * lk * d + h * dh),
                                    d as isize,
                                    1,
                                );
                            }
                        }
                    }
                });
            }
            Op::MhMix { probs, v, heads } => {
                let psh = self.shape(*probs);
                let (lq, lk) = (psh[psh.len() - 2], psh[psh.len() - 1]);
                let vsh = self.shape(*v);
                let d = *vsh.last().unwrap();
                let dh = d / heads;
                let batch = numel(&psh[..psh.len() - 3]);
                let pdat = self.nodes[probs.0].data.as_ptr();
                let vdat = self.nodes[v.0].data.as_ptr();
                let heads = *heads;
                // dP_h += dO_h * V_h^T ; dV_h += P_h^T * dO_h
                self.accum(grads, *probs, |dst| {
                    for bi in 0..batch {
                        for h in 0..heads {
                            unsafe {
                                S::gemm(
                                    lq,
                                    dh,
                                    lk,
                                    S::ONE,
                                    g.as_ptr().add(bi * lq * d + h * dh),
                                    d as isize,
                                    1,
                                    vdat.add(bi * lk * d + h * dh),
                                    1,
                                    d as isize,
                                    S::ONE,
                                    dst.as_mut_ptr().add((bi * heads + h) * lq * lk),
                                    lk as isize,
                                    1,
                                );
                            }
                        }
                    }
                });
                self.accum(grads, *v, |dst| {
                    for bi in 0..batch {
                        for h in 0..heads {
                            unsafe {
                                S::gemm(
                                    lk,
                                    lq,
                                    dh,
                                    S::ONE,
                                    pdat.add((bi * heads + h) * lq * lk),
                                    1,
                                    lk as isize,
                                    g.as_ptr().add(bi * lq * d + h * dh),
                                    d as isize,
                                    1,
                                    S::ONE,
                                    dst.as_mut_ptr().add(bi * lk * d + h * dh),
                                    d as isize,
                                    1,
                                );
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                self.accum(grads, *x, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].data.len();
                let gv = g[0] * S::from_f64(1.0 / n as f64);
                self.accum(grads, *x, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::SumLast(x) => {
                let xsh = self.shape(*x);
                let (rows, cols) = rows_cols(xsh);
                self.accum(grads, *x, |dst| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dst[r * cols + c] += g[r];
                        }
                    }
                });
            }
            Op::RsqrtEps(x, _) => {
                let y = &node.data;
                self.accum(grads, *x, |dst| {
                    let half = S::from_f64(0.5);
                    for i in 0..dst.len() {
                        dst[i] += -half * y[i] * y[i] * y[i] * g[i];
                    }
                });
            }
            Op::Nll {
                logp,
                targets,
                weights,
                denom,
            } => {
                let cols = *self.shape(*logp).last().unwrap();
                let gv = g[0];
                let d = *denom;
                self.accum(grads, *logp, |dst| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w != S::ZERO {
                            dst[r * cols + t] += -(w / d) * gv;
                        }
                    }
                });
            }
            Op::BceLogits {
                logits,
                labels,
                weights,
                denom,
            } => {
                let z = self.value(*logits);
                let gv = g[0];
                let d = *denom;
                self.accum(grads, *logits, |dst| {
                    for i in 0..dst.len() {
                        let sig = S::ONE / (S::ONE + (-z[i]).exp());
                        dst[i] += weights[i] * (sig - labels[i]) / d * gv;
                    }
                });
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
