//! Central finite differences for checking analytic gradients of scalar
//! functions of a [`Field`].

use crate::imaging::Field;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Numerical gradient of `f` at `at`, one coordinate at a time:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn central_difference(at: &Field, step: f64, mut f: impl FnMut(&Field) -> f64) -> Field {
    let mut probe = at.clone();
    let mut out = Field::zeros(at.height(), at.width(), at.channels());
    for i in 0..at.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let plus = f(&probe);
        probe.data_mut()[i] = original - step;
        let minus = f(&probe);
        probe.data_mut()[i] = original;
        out.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    out
}

/// Largest per-coordinate relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &Field, numeric: &Field, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
