use crate::scalar::Scalar;

/// Complementary error function for `x >= 0`.
///
/// Power series for erf below 2, Lentz continued fraction above. Relative accuracy is
/// close to machine precision on both branches for `f64`.
pub fn erfc<S: Scalar>(x: S) -> S {
    if x < S::zero() {
        return S::lit(2.0) - erfc(-x);
    }
    if x < S::lit(2.0) {
        S::one() - erf_series(x)
    } else {
        erfc_continued_fraction(x)
    }
}

fn erf_series<S: Scalar>(x: S) -> S {
    // erf(x) = 2/sqrt(pi) * sum_n (-1)^n x^(2n+1) / (n! (2n+1))
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0usize;
    loop {
        n += 1;
        term = -term * x2 / S::from_usize_lossy(n);
        let contrib = term / S::from_usize_lossy(2 * n + 1);
        sum += contrib;
        if contrib.abs() <= S::epsilon() * sum.abs() || n > 200 {
            break;
        }
    }
    sum * S::lit(2.0) / S::PI().sqrt()
}

fn erfc_continued_fraction<S: Scalar>(x: S) -> S {
    // erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let tiny = S::tiny();
    let mut f = x;
    let mut c = x;
    let mut d = S::zero();
    for k in 1..500usize {
        let a = S::from_usize_lossy(k) * S::lit(0.5);
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = d.recip();
        let delta = c * d;
        f *= delta;
        if (delta - S::one()).abs() <= S::epsilon() {
            break;
        }
    }
    (-x * x).exp() / (S::PI().sqrt() * f)
}

/// Standard normal upper tail probability.
pub fn normal_sf<S: Scalar>(z: S) -> S {
    erfc(z / S::SQRT_2()) * S::lit(0.5)
}

/// Standard normal quantile by bisection on the tail function. Intended for test
/// thresholds, not hot loops.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1)");
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if 1.0 - normal_sf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
