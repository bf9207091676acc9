//! Central-difference verification of reverse-mode gradients.

use alloc::string::{String, ToString};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares `backward` against central differences on up to
/// `per_param` randomly chosen coordinates of every trainable parameter.
///
/// `loss_fn` must record a scalar loss on the tape it is handed.
pub fn gradient_check<F>(
    store: &ParamStore<f64>,
    trainable: Option<&[bool]>,
    eps: f64,
    per_param: usize,
    seed: u64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    let mask = trainable.map_or_else(|| alloc::vec![true; store.len()], <[bool]>::to_vec);
    let analytic = {
        let mut tape = Tape::with_trainable(store, mask.clone());
        let loss = loss_fn(&mut tape)?;
        if !tape.value(loss).data()[0].is_finite() {
            return Err(Error::NonFinite("gradient_check: loss"));
        }
        tape.backward(loss)?.params(&tape)
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_trainable(s, alloc::vec![false; s.len()]);
        let loss = loss_fn(&mut tape)?;
        let v = tape.value(loss).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("gradient_check: perturbed loss"))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
    };
    for id in store.ids() {
        if !mask[id.0] {
            continue;
        }
        let len = store.get(id).len();
        let picks = sample(&mut rng, len, per_param.min(len));
        for idx in picks.iter() {
            let orig = store.get(id).data()[idx];
            work.get_mut(id).data_mut()[idx] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[idx] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[idx]);
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if report.coordinates == 1 || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
