//! Central finite-difference verification of analytic gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest `|a - b| / max(|a|, |b|, 1e-12)` over all coordinates.
    pub max_rel_error: f64,
    /// Coordinate where `max_rel_error` occurs.
    pub worst_index: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floored(a, b, 1e-12)
}

/// `|a - b| / max(|a|, |b|, floor)`: relative above `floor`, absolute
/// (scaled by `1 / floor`) below it.
pub fn relative_error_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `gradient(params)` with `(f(p + h e_i) - f(p - h e_i)) / 2h` for
/// every coordinate `i`.
///
/// `value` must be pure: it is evaluated twice at `params` and a bitwise
/// mismatch is reported as [`Error::NonDeterministic`].
pub fn grad_check<F, G>(mut value: F, gradient: G, params: &[f64], h: f64) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> f64,
    G: FnOnce(&[f64]) -> Vec<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid("grad_check", format!("step must be positive, got {h}")));
    }
    let first = value(params);
    let second = value(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let analytic = gradient(params);
    if analytic.len() != params.len() {
        return Err(invalid(
            "grad_check",
            format!("gradient has {} entries for {} parameters", analytic.len(), params.len()),
        ));
    }
    let mut probe = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = value(&probe);
        probe[i] = orig - h;
        let minus = value(&probe);
        probe[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .enumerate()
        .fold((0, 0.0), |(wi, wm), (i, e)| if e > wm { (i, e) } else { (wi, wm) });
    Ok(GradReport { analytic, numeric, max_rel_error, worst_index })
}

impl GradReport {
    /// Worst `(index, error)` under [`relative_error_floored`].
    pub fn max_error_floored(&self, floor: f64) -> (usize, f64) {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(&a, &b)| relative_error_floored(a, b, floor))
            .enumerate()
            .fold((0, 0.0), |(wi, wm), (i, e)| if e > wm { (i, e) } else { (wi, wm) })
    }
}
