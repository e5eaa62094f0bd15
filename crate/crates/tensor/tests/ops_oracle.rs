//! Value-level oracles: frozen expected numbers and an independently coded
//! dense attention reference (plain loops, no tape machinery).

use gridhome_tensor::nn::{self, AttentionParams, ParamView};
use gridhome_tensor::{Init, ParamStore, Rng, Tape};

#[test]
fn gelu_exact_erf_value() {
    // 0.5 * 1 * (1 + erf(1/sqrt(2))) evaluated with double-precision erf.
    let mut tape: Tape<f64> = Tape::new(false, 0);
    let x = tape.leaf(&[1], vec![1.0]);
    let y = tape.gelu(x);
    assert!((tape.value(y)[0] - 0.841_344_746_068_543_0).abs() < 1e-12);

    let z = tape.leaf(&[1], vec![0.0]);
    let yz = tape.gelu(z);
    assert_eq!(tape.value(yz)[0], 0.0);
}

#[test]
fn feedforward_scalar_chain() {
    // d_in = d_h = d_out = 1 with unit weights collapses to GeLU(1).
    let mut tape: Tape<f64> = Tape::new(false, 0);
    let x = tape.leaf(&[1, 1], vec![1.0]);
    let w1 = tape.leaf(&[1, 1], vec![1.0]);
    let w2 = tape.leaf(&[1, 1], vec![1.0]);
    let y = nn::feedforward_gelu(&mut tape, x, w1, w2, 0.0).unwrap();
    assert!((tape.value(y)[0] - 0.841_344_746_068_543_0).abs() < 1e-12);
}

#[test]
fn feedforward_zero_input_stays_zero() {
    let mut tape: Tape<f64> = Tape::new(false, 0);
    let x = tape.leaf(&[2, 3], vec![0.0; 6]);
    let mut rng = Rng::new(4);
    let w1 = tape.leaf(&[3, 5], (0..15).map(|_| rng.normal()).collect());
    let w2 = tape.leaf(&[5, 2], (0..10).map(|_| rng.normal()).collect());
    let y = nn::feedforward_gelu(&mut tape, x, w1, w2, 0.0).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn feedforward_dropout_zero_matches_eval() {
    let mut rng = Rng::new(8);
    let data: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
    let w1d: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
    let w2d: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
    let run = |training: bool| {
        let mut tape: Tape<f64> = Tape::new(training, 77);
        let x = tape.leaf(&[3, 4], data.clone());
        let w1 = tape.leaf(&[4, 5], w1d.clone());
        let w2 = tape.leaf(&[5, 3], w2d.clone());
        let y = nn::feedforward_gelu(&mut tape, x, w1, w2, 0.0).unwrap();
        tape.value(y).to_vec()
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn attention_single_position_weight_is_one() {
    let mut rng = Rng::new(11);
    let mut store: ParamStore<f64> = ParamStore::new();
    let p = AttentionParams::create(&mut store, "a", 4, 0.5, &mut rng);
    let mut tape = Tape::new(false, 0);
    let view = ParamView::attach(&mut tape, &store);
    let q = tape.leaf(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]);
    let out = nn::attention_layer(&mut tape, q, q, 2, false, None, &p, &view).unwrap();
    // [heads, 1, 1] of exactly 1.0 each.
    assert_eq!(tape.shape(out.probs), &[2, 1, 1]);
    for &v in tape.value(out.probs) {
        assert_eq!(v, 1.0);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = Rng::new(13);
    let mut store: ParamStore<f64> = ParamStore::new();
    let p = AttentionParams::create(&mut store, "a", 8, 0.5, &mut rng);
    let mut tape = Tape::new(false, 0);
    let view = ParamView::attach(&mut tape, &store);
    let qd: Vec<f64> = (0..6 * 8).map(|_| rng.normal()).collect();
    let q = tape.leaf(&[6, 8], qd);
    let out = nn::attention_layer(&mut tape, q, q, 4, true, None, &p, &view).unwrap();
    let probs = tape.value(out.probs);
    let lk = 6;
    for row in probs.chunks(lk) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
    }
    // Causality: row t puts zero mass past position t.
    for h in 0..4 {
        for i in 0..6 {
            for j in (i + 1)..6 {
                assert_eq!(probs[(h * 6 + i) * 6 + j], 0.0);
            }
        }
    }
}

/// Independent dense reference: multi-head attention with residual and layer
/// norm, written as explicit scalar loops over plain slices.
#[allow(clippy::too_many_arguments)]
fn reference_attention(
    q_in: &[f64],
    kv_in: &[f64],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    w: &ReferenceWeights,
) -> Vec<f64> {
    let lin = |x: &[f64], rows: usize, wm: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; rows * d];
        for i in 0..rows {
            for j in 0..d {
                let mut s = b[j];
                for k in 0..d {
                    s += x[i * d + k] * wm[k * d + j];
                }
                out[i * d + j] = s;
            }
        }
        out
    };
    let q = lin(q_in, lq, &w.wq, &w.bq);
    let k = lin(kv_in, lk, &w.wk, &w.bk);
    let v = lin(kv_in, lk, &w.wv, &w.bv);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0; lq * d];
    for h in 0..heads {
        for i in 0..lq {
            let mut scores = vec![0.0; lk];
            for j in 0..lk {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                }
                scores[j] = s * scale;
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..lk {
                let p = exps[j] / z;
                for c in 0..dh {
                    ctx[i * d + h * dh + c] += p * v[j * d + h * dh + c];
                }
            }
        }
    }
    let proj = lin(&ctx, lq, &w.wo, &w.bo);
    // Residual + layer norm.
    let mut out = vec![0.0; lq * d];
    for i in 0..lq {
        let row: Vec<f64> = (0..d).map(|j| q_in[i * d + j] + proj[i * d + j]).collect();
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * rstd * w.gain[j] + w.bias[j];
        }
    }
    out
}

struct ReferenceWeights {
    wq: Vec<f64>,
    bq: Vec<f64>,
    wk: Vec<f64>,
    bk: Vec<f64>,
    wv: Vec<f64>,
    bv: Vec<f64>,
    wo: Vec<f64>,
    bo: Vec<f64>,
    gain: Vec<f64>,
    bias: Vec<f64>,
}

#[test]
fn attention_matches_loop_reference() {
    let d = 8;
    let heads = 2;
    let mut rng = Rng::new(21);
    let mut store: ParamStore<f64> = ParamStore::new();
    let p = AttentionParams::create(&mut store, "a", d, 0.6, &mut rng);
    // Bias values nonzero so the reference exercises them.
    for name in ["a.bq", "a.bk", "a.bv", "a.bo", "a.norm_bias"] {
        let id = store.lookup(name).unwrap();
        for v in store.get_mut(id).values.iter_mut() {
            *v = rng.normal() * 0.3;
        }
    }
    let grab = |store: &ParamStore<f64>, name: &str| -> Vec<f64> {
        store.get(store.lookup(name).unwrap()).values.clone()
    };
    let w = ReferenceWeights {
        wq: grab(&store, "a.wq"),
        bq: grab(&store, "a.bq"),
        wk: grab(&store, "a.wk"),
        bk: grab(&store, "a.bk"),
        wv: grab(&store, "a.wv"),
        bv: grab(&store, "a.bv"),
        wo: grab(&store, "a.wo"),
        bo: grab(&store, "a.bo"),
        gain: grab(&store, "a.norm_gain"),
        bias: grab(&store, "a.norm_bias"),
    };

    let qd: Vec<f64> = (0..3 * d).map(|_| rng.normal()).collect();
    let mut tape = Tape::new(false, 0);
    let view = ParamView::attach(&mut tape, &store);
    let q = tape.leaf(&[3, d], qd.clone());
    let out = nn::attention_layer(&mut tape, q, q, heads, false, None, &p, &view).unwrap();
    let got = tape.value(out.out);

    let want = reference_attention(&qd, &qd, 3, 3, d, heads, &w);
    for (g, e) in got.iter().zip(&want) {
        assert!((g - e).abs() < 1e-6, "got {g}, want {e}");
    }
}

#[test]
fn softmax_uniform_on_identical_keys() {
    // Identical key rows force uniform attention weights regardless of query.
    let mut tape: Tape<f64> = Tape::new(false, 0);
    let mut rng = Rng::new(30);
    let qd: Vec<f64> = (0..2 * 8).map(|_| rng.normal()).collect();
    let row: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let mut kd = Vec::new();
    for _ in 0..5 {
        kd.extend_from_slice(&row);
    }
    let q = tape.leaf(&[2, 8], qd);
    let k = tape.leaf(&[5, 8], kd);
    let scores = tape.mh_scores(q, k, 2).unwrap();
    let probs = tape.softmax_last(scores);
    for &v in tape.value(probs) {
        assert!((v - 0.2).abs() < 1e-12, "weight {v}");
    }
}

#[test]
fn layer_norm_statistics() {
    let mut rng = Rng::new(31);
    let mut tape: Tape<f64> = Tape::new(false, 0);
    let rows = 16;
    let cols = 64;
    let xd: Vec<f64> = (0..rows * cols).map(|_| rng.normal_scaled(0.7, 2.5)).collect();
    let x = tape.leaf(&[rows, cols], xd);
    let gain = tape.leaf(&[cols], vec![1.0; cols]);
    let bias = tape.leaf(&[cols], vec![0.0; cols]);
    let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
    for row in tape.value(y).chunks(cols) {
        let mean: f64 = row.iter().sum::<f64>() / cols as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn backward_sum_gives_ones() {
    let mut tape: Tape<f64> = Tape::new(false, 0);
    let mut store = ParamStore::new();
    let x = tape.leaf_grad(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
    let loss = tape.sum_all(x);
    let grads = tape.backward(loss, &mut store).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_square_scalar() {
    let mut tape: Tape<f64> = Tape::new(false, 0);
    let mut store = ParamStore::new();
    let x = tape.leaf_grad(&[1], vec![3.0]);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq);
    let grads = tape.backward(loss, &mut store).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut rng = Rng::new(40);
    let mut store: ParamStore<f64> = ParamStore::new();
    let id = store.add("w", &[3], Init::Normal(1.0), &mut rng);
    for _ in 0..2 {
        let mut tape = Tape::new(false, 0);
        let w = tape.param(&store, id);
        let loss = tape.sum_all(w);
        tape.backward(loss, &mut store).unwrap();
    }
    assert_eq!(store.get(id).grad.as_deref().unwrap(), &[2.0, 2.0, 2.0]);
    store.zero_grads();
    assert!(store.get(id).grad.is_none());
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape: Tape<f64> = Tape::new(false, 0);
    let mut store = ParamStore::new();
    let x = tape.leaf_grad(&[2], vec![1.0, 2.0]);
    assert!(tape.backward(x, &mut store).is_err());
}

#[test]
fn head_count_must_divide_dim() {
    let mut tape: Tape<f64> = Tape::new(false, 0);
    let q = tape.leaf(&[2, 6], vec![0.0; 12]);
    assert!(tape.mh_scores(q, q, 4).is_err());
}

#[test]
fn softmax_never_produces_nonfinite() {
    let mut tape: Tape<f64> = Tape::new(false, 0);
    let x = tape.leaf(&[2, 3], vec![1e4, -1e4, 0.0, 3.0, 3.0, 3.0]);
    let y = tape.softmax_last(x);
    assert!(tape.value(y).iter().all(|v| v.is_finite()));
    let ls = tape.log_softmax_last(x);
    assert!(tape.value(ls).iter().all(|v| v.is_finite()));
}
