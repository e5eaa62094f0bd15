//! Central finite-difference gradient checking.
//!
//! The closure must rebuild the loss deterministically for a given store
//! (each evaluation gets a tape seeded identically, so dropout masks replay).

use crate::error::TensorError;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Tx};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Relative error with a small absolute floor so near-zero pairs compare
/// cleanly: `|a - n| / max(|a|, |n|, 1e-3)`.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Check analytic gradients of every parameter in `ids` against central
/// differences of the scalar produced by `f`.
pub fn gradcheck(
    f: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Tx, TensorError>,
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    eps: f64,
) -> Result<GradCheckReport, TensorError> {
    let tape_seed = 0x5eed;

    // Analytic pass.
    let mut tape = Tape::new(true, tape_seed);
    let loss = f(&mut tape, store)?;
    store.zero_grads();
    tape.backward(loss, store)?;
    let analytic: Vec<(String, Vec<f64>)> = ids
        .iter()
        .map(|&id| {
            let p = store.get(id);
            let g = p
                .grad
                .clone()
                .unwrap_or_else(|| vec![0.0; p.numel()]);
            (p.name.clone(), g)
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };

    for (slot, &id) in ids.iter().enumerate() {
        let n = store.get(id).numel();
        for j in 0..n {
            let original = store.get(id).values[j];

            store.get_mut(id).values[j] = original + eps;
            let mut tp = Tape::new(true, tape_seed);
            let lp = f(&mut tp, store)?;
            let fp = tp.scalar_value(lp);

            store.get_mut(id).values[j] = original - eps;
            let mut tm = Tape::new(true, tape_seed);
            let lm = f(&mut tm, store)?;
            let fm = tm.scalar_value(lm);

            store.get_mut(id).values[j] = original;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[slot].1[j];
            let e = rel_err(a, numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = analytic[slot].0.clone();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    store.zero_grads();
    Ok(report)
}
