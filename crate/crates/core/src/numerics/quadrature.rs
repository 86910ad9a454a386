//! Adaptive Gauss–Kronrod integration and Gauss–Legendre rules.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd Kronrod nodes (1, 3, 5, 7).
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod15<S: Scalar, F: FnMut(S) -> S>(f: &mut F, a: S, b: S) -> (S, S) {
    let half = (b - a) * S::lit(0.5);
    let centre = (a + b) * S::lit(0.5);
    let fc = f(centre);
    let mut kronrod = fc * S::lit(WGK[7]);
    let mut gauss = fc * S::lit(WG[3]);
    for i in 0..7 {
        let dx = half * S::lit(XGK[i]);
        let pair = f(centre - dx) + f(centre + dx);
        kronrod += pair * S::lit(WGK[i]);
        if i % 2 == 1 {
            gauss += pair * S::lit(WG[i / 2]);
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Integrates `f` over `[a, b]` by recursive bisection of G7–K15 panels until each
/// panel's error estimate fits its share of `abs_tol`.
pub fn integrate<S: Scalar, F: FnMut(S) -> S>(mut f: F, a: S, b: S, abs_tol: S) -> Result<S> {
    if b == a {
        return Ok(S::zero());
    }
    if b < a {
        return integrate(f, b, a, abs_tol).map(|v| -v);
    }
    let mut total = S::zero();
    let mut stack = vec![(a, b, 0usize)];
    let width = b - a;
    while let Some((lo, hi, depth)) = stack.pop() {
        let (value, err) = kronrod15(&mut f, lo, hi);
        let share = abs_tol * (hi - lo) / width;
        // Error floor set by the arithmetic itself.
        let floor = S::epsilon() * S::lit(50.0) * value.abs();
        if err <= share.max(floor) {
            total += value;
        } else if depth >= 48 {
            return Err(Error::QuadratureFailure {
                a: lo.as_f64(),
                b: hi.as_f64(),
                tolerance: abs_tol.as_f64(),
            });
        } else {
            let mid = (lo + hi) * S::lit(0.5);
            stack.push((mid, hi, depth + 1));
            stack.push((lo, mid, depth + 1));
        }
    }
    Ok(total)
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit<S: Scalar>(n: usize) -> (Vec<S>, Vec<S>) {
    assert!(n >= 1);
    let mut nodes = vec![S::zero(); n];
    let mut weights = vec![S::zero(); n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // Map from [-1, 1] to [0, 1], ascending order.
        nodes[i] = S::lit(0.5 * (1.0 - x));
        nodes[n - 1 - i] = S::lit(0.5 * (1.0 + x));
        weights[i] = S::lit(0.5 * w);
        weights[n - 1 - i] = S::lit(0.5 * w);
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}
