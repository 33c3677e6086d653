//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many random coordinates per parameter (all when `None`).
    pub max_coords_per_param: Option<usize>,
    /// Restrict the check to these parameters (all when `None`).
    pub only: Option<Vec<ParamId>>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-5,
            max_coords_per_param: None,
            only: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(parameter, row, col, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Compares the tape gradient of the scalar built by `f` with central
/// differences over the entries of `store`.
pub fn check_gradients<F>(store: &ParamStore, opts: &GradCheckOptions, f: F) -> GradCheckReport
where
    F: for<'s> Fn(&mut Tape<'s>, &'s ParamStore) -> Var,
{
    let analytic = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store);
        tape.backward(loss).into_params()
    };
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s);
        tape.scalar(loss)
    };
    let mut work = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<ParamId> = match &opts.only {
        Some(v) => v.clone(),
        None => store.ids().collect(),
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    for id in ids {
        let (rows, cols) = store.get(id).dim();
        let total = rows * cols;
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < total => sample(&mut rng, total, k).into_vec(),
            _ => (0..total).collect(),
        };
        for flat in coords {
            let (r, c) = (flat / cols, flat % cols);
            let orig = work.get(id)[[r, c]];
            work.get_mut(id)[[r, c]] = orig + opts.step;
            let plus = eval(&work);
            work.get_mut(id)[[r, c]] = orig - opts.step;
            let minus = eval(&work);
            work.get_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(id).map_or(0.0, |g| g[[r, c]]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel >= report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.name(id).to_string(), r, c, a, numeric));
            }
        }
    }
    report
}
