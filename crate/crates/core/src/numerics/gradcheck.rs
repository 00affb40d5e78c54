use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::NumericsError;

/// Result of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    /// Relative to the numeric derivative at each probe.
    pub max_rel_err: f64,
    pub num_probes: usize,
    /// Probes skipped because both derivatives were below the floor in magnitude.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Default magnitude below which a probe is skipped.
pub const NEGLIGIBLE_GRAD: f64 = 1e-8;

/// Compares `analytic_grad` against `(f(x+h) - f(x-h)) / 2h` at `probes` coordinates.
///
/// Coordinates are drawn without replacement from a generator seeded with `seed`;
/// when `probes >= params.len()` every coordinate is checked.
pub fn finite_diff_check<F>(
    f: F,
    params: &[f64],
    analytic_grad: &[f64],
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    finite_diff_check_with_floor(
        f,
        params,
        analytic_grad,
        probes,
        step,
        seed,
        NEGLIGIBLE_GRAD,
    )
}

/// [`finite_diff_check`] with an explicit skip floor.
///
/// Central differences of a function of magnitude `F` carry roundoff near
/// `F * 2^-52 / step`; derivatives much below that cannot be resolved.
pub fn finite_diff_check_with_floor<F>(
    mut f: F,
    params: &[f64],
    analytic_grad: &[f64],
    probes: usize,
    step: f64,
    seed: u64,
    floor: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic_grad.len() {
        return Err(NumericsError::LengthMismatch {
            what: "analytic gradient",
            expected: params.len(),
            actual: analytic_grad.len(),
        });
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(NumericsError::InvalidArgument(format!(
            "step must be > 0, got {step}"
        )));
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite("parameters".into()));
    }
    let coords: Vec<usize> = if probes >= params.len() {
        (0..params.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, params.len(), probes).into_vec();
        v.sort_unstable();
        v
    };

    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        num_probes: coords.len(),
        skipped: 0,
    };
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericsError::NonFinite(format!(
                "function value while probing coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let analytic = analytic_grad[i];
        let abs = (numeric - analytic).abs();
        report.max_abs_err = report.max_abs_err.max(abs);
        if numeric.abs() < floor && analytic.abs() < floor {
            report.skipped += 1;
            continue;
        }
        let rel = abs / numeric.abs().max(f64::MIN_POSITIVE);
        report.max_rel_err = report.max_rel_err.max(rel);
    }
    Ok(report)
}
