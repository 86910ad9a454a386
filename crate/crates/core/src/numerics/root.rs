use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Root of a monotone function on `[lo, hi]` by Newton steps kept inside a shrinking
/// bisection bracket. `eval` returns `(g(t), g'(t))`; `g` must change sign on the bracket.
///
/// Stops when the bracket or the Newton step is narrower than `tol`.
pub fn safeguarded_newton<S: Scalar, F: FnMut(S) -> (S, S)>(
    mut eval: F,
    mut lo: S,
    mut hi: S,
    start: S,
    tol: S,
    max_iter: usize,
) -> Result<S> {
    let (g_lo, _) = eval(lo);
    let increasing = g_lo < S::zero();
    let mut t = if start > lo && start < hi { start } else { (lo + hi) * S::lit(0.5) };
    for _ in 0..max_iter {
        let (g, dg) = eval(t);
        if g == S::zero() {
            return Ok(t);
        }
        if (g < S::zero()) == increasing {
            lo = t;
        } else {
            hi = t;
        }
        if hi - lo <= tol {
            return Ok((lo + hi) * S::lit(0.5));
        }
        let newton = t - g / dg;
        let next = if dg != S::zero() && newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            (lo + hi) * S::lit(0.5)
        };
        if (next - t).abs() <= tol {
            return Ok(next);
        }
        t = next;
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        width: (hi - lo).as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_cube_root() {
        let r: f64 = safeguarded_newton(|t: f64| (t * t * t - 2.0, 3.0 * t * t), 0.0, 5.0, 4.0, 1e-14, 100).unwrap();
        assert!((r - 2f64.cbrt()).abs() < 1e-13);
    }

    #[test]
    fn decreasing_function_with_useless_derivative() {
        // Zero derivative forces pure bisection.
        let r: f64 = safeguarded_newton(|t: f64| (1.0 - t, 0.0), 0.0, 3.0, 2.5, 1e-12, 200).unwrap();
        assert!((r - 1.0).abs() < 1e-11);
    }

    #[test]
    fn iteration_cap_is_reported() {
        let e = safeguarded_newton(|t: f64| (1.0 - t, 0.0), 0.0, 3.0, 2.5, 1e-30, 5).unwrap_err();
        assert!(matches!(e, Error::NonConvergence { iterations: 5, .. }));
    }
}
