//! Central finite-difference oracle for taped operations.

use crate::arr::Arr;
use crate::error::Result;
use crate::tape::{Id, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// (input index, element index) of the worst disagreement, when any
    /// element was checked.
    pub worst: Option<(usize, usize)>,
}

pub const FD_STEP: f64 = 1e-5;

/// Checks analytic gradients of a scalar-valued taped function against
/// central finite differences on every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Arr], tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Id]) -> Result<Id>,
{
    grad_check_sampled(f, inputs, tol, usize::MAX, 0)
}

/// Like [`grad_check`] but checks at most `max_per_input` elements per
/// input, chosen deterministically from `seed`.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Arr],
    tol: f64,
    max_per_input: usize,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Id]) -> Result<Id>,
{
    let mut tape = Tape::new();
    let ids: Vec<Id> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let out = f(&mut tape, &ids)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(id).len()]))
        .collect();

    let eval = |arrs: &[Arr]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<Id> = arrs.iter().map(|a| t.constant(a.clone())).collect();
        let out = f(&mut t, &ids)?;
        Ok(t.value(out).data[0])
    };

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut work: Vec<Arr> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut elems: Vec<usize> = (0..input.len()).collect();
        if elems.len() > max_per_input {
            elems.shuffle(&mut rng);
            elems.truncate(max_per_input);
            elems.sort_unstable();
        }
        for e in elems {
            let a = analytic[i][e];
            if !a.is_finite() {
                return Ok(GradReport {
                    max_rel_err: f64::INFINITY,
                    pass: false,
                    worst: Some((i, e)),
                });
            }
            let orig = input.data[e];
            work[i].data[e] = orig + FD_STEP;
            let hi = eval(&work)?;
            work[i].data[e] = orig - FD_STEP;
            let lo = eval(&work)?;
            work[i].data[e] = orig;
            let numeric = (hi - lo) / (2.0 * FD_STEP);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = Some((i, e));
            }
        }
    }
    Ok(GradReport {
        max_rel_err: max_rel,
        pass: max_rel < tol,
        worst,
    })
}
