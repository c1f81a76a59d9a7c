//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct ProbeOptions {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error.
    pub abs_floor: f64,
    /// Probe a random subset of this many coordinates; `None` probes all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            abs_floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

/// Compares `analytic` against central differences of `value_fn` around
/// `params` and returns the worst relative error
/// `|a − n| / max(|a|, |n|, abs_floor)`.
pub fn finite_diff_check<F>(
    mut value_fn: F,
    params: &[f64],
    analytic: &[f64],
    opts: &ProbeOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} params but {} analytic gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    if !(opts.eps > 0.0) {
        return Err(Error::Config(format!("probe eps must be > 0, got {}", opts.eps)));
    }
    let f0 = value_fn(params)?;
    let f1 = value_fn(params)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::InvalidCheck(format!(
            "loss is nondeterministic: {f0:e} then {f1:e} at the same point"
        )));
    }

    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < params.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, params.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..params.len()).collect(),
    };

    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: coords.len(),
    };
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + opts.eps;
        let plus = value_fn(&probe)?;
        probe[i] = orig - opts.eps;
        let minus = value_fn(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!(
                "coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
