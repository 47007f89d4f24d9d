//! Finite-difference helpers for verifying analytic gradients.
//!
//! These only ever evaluate forward passes, so they stay independent of the
//! reverse-mode rules they are used to check.

/// Central difference `(f(x0 + h) - f(x0 - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps the ratio meaningful when both values are essentially zero.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let d = central_difference(|x| x * x * x, 2.0, 1e-5);
        assert!(relative_error(d, 12.0, 1e-12) < 1e-9);
    }
}
