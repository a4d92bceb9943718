//! Central finite-difference oracle for tape gradients.
//!
//! Perturbs parameter values directly and reruns the forward closure, so it
//! never touches a backward rule. Central differences at steps `h` and `h/2`
//! are Richardson-combined, which cancels the `h^2` truncation term.

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub const FD_STEP: f64 = 2e-5;
const FLOOR: f64 = 1e-6;

pub fn check<F>(store: &mut ParamStore, forward: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let loss = forward(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic = store.gradients(&bound, &grads);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let b = store.bind(&mut t, false);
        let l = forward(&mut t, &b)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for p in 0..store.len() {
        for j in 0..store.tensors()[p].numel() {
            let orig = store.tensors()[p].data()[j];
            let mut central = |h: f64| -> Result<f64> {
                store.tensors_mut()[p].data_mut()[j] = orig + h;
                let plus = eval(store)?;
                store.tensors_mut()[p].data_mut()[j] = orig - h;
                let minus = eval(store)?;
                store.tensors_mut()[p].data_mut()[j] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let coarse = central(FD_STEP)?;
            let fine = central(FD_STEP / 2.0)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = analytic[p].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.names()[p].clone(), j));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
