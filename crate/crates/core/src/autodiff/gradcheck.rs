//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it shares no code
//! path with the backward rules it is checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation is `step_scale · max(1, |x|)`.
    pub step_scale: f64,
    /// Lower bound on the relative-error denominator. Gradients smaller than
    /// this are compared in absolute terms.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates across all inputs.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step_scale: 1e-6,
            floor: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordError>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` against central differences of the scalar built by `f`.
///
/// `f` records its computation on a fresh tape from the given input leaves and
/// returns the scalar output.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect();
    if coords.is_empty() {
        return Err(Error::contract("gradcheck needs at least one input coordinate"));
    }
    let chosen: Vec<(usize, usize)> = match opts.max_coords {
        Some(n) if n < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picks: Vec<usize> = sample(&mut rng, coords.len(), n).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|p| coords[p]).collect()
        }
        _ => coords,
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (i, k) in chosen {
        let x0 = inputs[i].data()[k];
        let h = opts.step_scale * x0.abs().max(1.0);
        work[i].data_mut()[k] = x0 + h;
        let fp = eval(&work)?;
        work[i].data_mut()[k] = x0 - h;
        let fm = eval(&work)?;
        work[i].data_mut()[k] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i].data()[k];
        let rel = relative_error(a, numeric, opts.floor);
        report.checked += 1;
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some(CoordError {
                input: i,
                index: k,
                analytic: a,
                numeric,
                rel_err: rel,
            });
        }
    }
    Ok(report)
}
