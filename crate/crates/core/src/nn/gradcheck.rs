//! Central finite-difference verification of recorded gradients.

use super::layers::Bind;
use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare analytic gradients of `loss` with central differences of step
/// `eps` on every scalar of every parameter. The relative error uses
/// `max(|fd|, |analytic|, 1e-6)` as denominator.
pub fn check_gradients<F>(store: &ParamStore, eps: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape, Bind) -> Var,
{
    check_gradients_except(store, eps, &[], loss)
}

/// As [`check_gradients`], skipping the named tensors (stored constants the
/// loss reads through `Tape::frozen`).
pub fn check_gradients_except<F>(
    store: &ParamStore,
    eps: f64,
    skip: &[&str],
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape, Bind) -> Var,
{
    let mut tape = Tape::new();
    let l = loss(store, &mut tape, Bind::train(store));
    let grads = tape.backward(l)?;
    let eval = |s: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let v = loss(s, &mut t, Bind::frozen(s));
        t.scalar(v)
    };
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for id in 0..store.len() {
        if skip.contains(&store.name(id)) {
            continue;
        }
        for k in 0..store.value(id).len() {
            let orig = store.value(id)[k];
            probe.value_mut(id)[k] = orig + eps;
            let up = eval(&probe);
            probe.value_mut(id)[k] = orig - eps;
            let down = eval(&probe);
            probe.value_mut(id)[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g[k]);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), k, fd, analytic));
            }
        }
    }
    Ok(report)
}
