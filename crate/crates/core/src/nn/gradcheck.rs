//! Central finite-difference verification of tape gradients.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub elements: usize,
    /// `max_i |a_i − n_i| / max(max_i |a_i|, max_i |n_i|, 1e-8)`.
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < tol)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn eval<F>(store: &ParamStore, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut t = Tape::new(store);
    let l = loss(&mut t)?;
    Ok(t.scalar(l))
}

/// Compares the tape gradient of `loss` with central differences for every
/// element of every tensor in `store`. The closure must be deterministic.
///
/// When the two one-sided differences disagree by more than `1e-5` of the
/// tensor's gradient scale, a kink (L1 or ReLU) may lie inside the step.
/// Second-order one-sided stencils are then taken on both sides at steps
/// `h` and `h/2`; the side whose two estimates agree is kink-free and its
/// finer estimate is used.
pub fn grad_check<F>(store: &mut ParamStore, loss: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let (base, analytic) = {
        let mut t = Tape::new(store);
        let l = loss(&mut t)?;
        let base = t.scalar(l);
        (base, t.backward(l)?)
    };
    let mut entries = Vec::with_capacity(store.len());
    for id in store.ids().collect::<Vec<_>>() {
        let a = analytic.get(id).clone();
        let scale = a.max_abs().max(1e-8);
        let mut numeric = Vec::with_capacity(a.data().len());
        for k in 0..a.data().len() {
            let orig = store.get(id).data()[k];
            let h = step;
            let mut at = |delta: f64| -> Result<f64> {
                store.get_mut(id).data_mut()[k] = orig + delta;
                let v = eval(store, &loss);
                store.get_mut(id).data_mut()[k] = orig;
                v
            };
            let (fp, fm) = (at(h)?, at(-h)?);
            let (dp, dm) = ((fp - base) / h, (base - fm) / h);
            let est = if (dp - dm).abs() <= 1e-5 * scale {
                (fp - fm) / (2.0 * h)
            } else {
                let (fp2, fph) = (at(2.0 * h)?, at(0.5 * h)?);
                let (fm2, fmh) = (at(-2.0 * h)?, at(-0.5 * h)?);
                let fwd = |f1: f64, f2: f64, s: f64| (-3.0 * base + 4.0 * f1 - f2) / (2.0 * s);
                let (right, right_fine) = (fwd(fp, fp2, h), fwd(fph, fp, 0.5 * h));
                let (left, left_fine) = (-fwd(fm, fm2, h), -fwd(fmh, fm, 0.5 * h));
                if (right - right_fine).abs() <= (left - left_fine).abs() {
                    right_fine
                } else {
                    left_fine
                }
            };
            numeric.push(est);
        }
        let max_num = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_diff = a.data().iter().zip(&numeric).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        entries.push(GradCheckEntry {
            name: store.name(id).to_string(),
            elements: a.data().len(),
            max_rel_error: max_diff / a.max_abs().max(max_num).max(1e-8),
            max_abs_analytic: a.max_abs(),
        });
    }
    Ok(GradCheckReport { loss: base, entries })
}
