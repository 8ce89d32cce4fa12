//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter (all of them when fewer exist).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, coords_per_param: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose +/- eps probes crossed a ReLU or max-pool kink.
    pub skipped_kinks: usize,
    pub worst: Option<Worst>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(store: &ParamStore<f64>, f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::ShapeMismatch("gradient check needs a scalar function".into()));
    }
    Ok((v.item(), tape.decision_signature()))
}

/// Compares reverse-mode gradients of `f` against central differences on a
/// random subsample of each parameter's coordinates.
pub fn gradient_check<F>(store: &ParamStore<f64>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base_sig = tape.decision_signature();
    let grads = tape.backward(loss)?;
    let analytic = grads.for_store(store);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped_kinks: 0, worst: None };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for coord in coords {
            let orig = store.get(id).data()[coord];
            work.get_mut(id).data_mut()[coord] = orig + opts.eps;
            let (fp, sp) = evaluate(&work, &f)?;
            work.get_mut(id).data_mut()[coord] = orig - opts.eps;
            let (fm, sm) = evaluate(&work, &f)?;
            work.get_mut(id).data_mut()[coord] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[id.index()].data()[coord];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some(Worst { param: store.name(id).to_string(), coord, analytic: a, numeric });
                }
            }
        }
    }
    Ok(report)
}
