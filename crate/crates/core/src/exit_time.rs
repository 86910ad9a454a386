//! Law of the first exit time of a standard Brownian motion from `[-1, 1]`.
//!
//! Two representations are used. For `t >= 0.15` the eigenfunction expansion
//!
//! ```text
//! P(tau > t) = (4/pi) sum_{m>=0} (-1)^m / (2m+1) exp(-(2m+1)^2 pi^2 t / 8)
//! ```
//!
//! converges after a handful of terms. Below the crossover it needs many terms and
//! loses all relative accuracy in the density, so the reflection (theta) expansion
//!
//! ```text
//! P(tau <= t) = 2 sum_{n>=0} (-1)^n erfc((2n+1) / sqrt(2t))
//! ```
//!
//! is used instead. Both agree to better than `1e-12` at the crossover.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::root::safeguarded_newton;
use crate::numerics::special::erfc;
use crate::scalar::Scalar;

/// Switch point between the theta and eigenfunction expansions.
pub const SERIES_CROSSOVER: f64 = 0.15;
/// Lower end of the inverse-CDF bracket.
pub const BRACKET_LOW: f64 = 1e-8;
/// Upper end of the inverse-CDF bracket; `P(tau > 60) < 1e-32`.
pub const BRACKET_HIGH: f64 = 60.0;
pub const MAX_ROOT_ITERATIONS: usize = 200;
pub const DEFAULT_SERIES_TERMS: usize = 50;

/// Exit-time law with a fixed truncation order and root-finding tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitLaw<S> {
    series_terms: usize,
    cdf_tolerance: S,
}

impl<S: Scalar> Default for ExitLaw<S> {
    fn default() -> Self {
        let tol = S::lit(1e-10).max(S::epsilon().sqrt() * S::lit(1e-2));
        Self {
            series_terms: DEFAULT_SERIES_TERMS,
            cdf_tolerance: tol,
        }
    }
}

impl<S: Scalar> ExitLaw<S> {
    pub fn new(series_terms: usize, cdf_tolerance: S) -> Result<Self> {
        if series_terms == 0 {
            return Err(Error::Config("series_terms must be at least 1".into()));
        }
        if !(cdf_tolerance > S::zero()) {
            return Err(Error::Config("cdf_tolerance must be positive".into()));
        }
        Ok(Self {
            series_terms,
            cdf_tolerance,
        })
    }

    pub fn series_terms(&self) -> usize {
        self.series_terms
    }

    pub fn cdf_tolerance(&self) -> S {
        self.cdf_tolerance
    }

    /// Asymptotic hazard rate `pi^2 / 8`.
    pub fn tail_rate() -> S {
        S::PI() * S::PI() / S::lit(8.0)
    }

    /// `P(tau > t)`, clamped to `[0, 1]`.
    pub fn survival(&self, t: S) -> S {
        if t <= S::zero() {
            return S::one();
        }
        let s = if t < S::lit(SERIES_CROSSOVER) {
            S::one() - self.theta_cdf(t)
        } else {
            let (sum, _) = self.eigen_sums(t);
            S::lit(4.0) / S::PI() * (-Self::tail_rate() * t).exp() * sum
        };
        s.max(S::zero()).min(S::one())
    }

    /// `P(tau <= t)`, accurate in relative terms for small `t`.
    pub fn cdf(&self, t: S) -> S {
        if t <= S::zero() {
            S::zero()
        } else if t < S::lit(SERIES_CROSSOVER) {
            self.theta_cdf(t).max(S::zero())
        } else {
            S::one() - self.survival(t)
        }
    }

    /// Probability density of `tau`. Zero at `t = 0` by continuity.
    pub fn density(&self, t: S) -> S {
        if t <= S::zero() {
            return S::zero();
        }
        if t < S::lit(SERIES_CROSSOVER) {
            self.theta_density(t)
        } else {
            let (_, dsum) = self.eigen_sums(t);
            S::PI() / S::lit(2.0) * (-Self::tail_rate() * t).exp() * dsum
        }
    }

    /// Density divided by survival. Computed without underflow for large `t`.
    pub fn hazard(&self, t: S) -> S {
        self.log_survival_and_hazard(t).1
    }

    /// `ln P(tau > t)`, finite for every finite `t`.
    pub fn log_survival(&self, t: S) -> S {
        self.log_survival_and_hazard(t).0
    }

    /// `(ln P(tau > t), hazard(t))` from a single series pass.
    pub fn log_survival_and_hazard(&self, t: S) -> (S, S) {
        if t <= S::zero() {
            return (S::zero(), S::zero());
        }
        if t < S::lit(SERIES_CROSSOVER) {
            let cdf = self.theta_cdf(t).max(S::zero());
            let log_s = (-cdf).ln_1p();
            let h = self.theta_density(t) / (S::one() - cdf);
            (log_s, h.max(S::zero()))
        } else {
            let (sum, dsum) = self.eigen_sums(t);
            let gamma = Self::tail_rate();
            let log_s = (S::lit(4.0) / S::PI()).ln() - gamma * t + sum.ln();
            // density / survival = (pi/2) dsum / ((4/pi) sum) = (pi^2/8) dsum / sum
            let h = gamma * dsum / sum;
            (log_s, h.max(S::zero()))
        }
    }

    /// Bound on the truncation error of the eigenfunction survival series: the first
    /// omitted term of the alternating sum.
    pub fn truncation_bound(&self, t: S) -> S {
        let k = S::from_usize_lossy(2 * self.series_terms + 1);
        S::lit(4.0) / S::PI() / k * (-k * k * Self::tail_rate() * t).exp()
    }

    /// Inverse of the survival function: the `t` with `P(tau > t) = u`.
    pub fn survival_quantile(&self, u: S) -> Result<S> {
        if !(u > S::zero() && u < S::one()) {
            return Err(Error::DegenerateInput(format!("survival level {u} outside (0, 1)")));
        }
        self.conditional_quantile(S::zero(), u)
    }

    /// The `r >= 0` with `P(tau > e + r | tau > e) = u`.
    pub fn conditional_quantile(&self, elapsed: S, u: S) -> Result<S> {
        let target = u.ln();
        let base = if elapsed > S::zero() { self.log_survival(elapsed) } else { S::zero() };
        let gamma = Self::tail_rate();
        // Leading-mode inverse as the starting point.
        let start = if elapsed > S::lit(0.5) {
            -target / gamma
        } else {
            ((-(target + base) + (S::lit(4.0) / S::PI()).ln()) / gamma - elapsed).max(S::lit(0.1))
        };
        let lo = if elapsed > S::zero() { S::zero() } else { S::lit(BRACKET_LOW) };
        safeguarded_newton(
            |r| {
                let (ls, h) = self.log_survival_and_hazard(elapsed + r);
                (ls - base - target, -h)
            },
            lo,
            S::lit(BRACKET_HIGH),
            start,
            self.cdf_tolerance,
            MAX_ROOT_ITERATIONS,
        )
    }

    /// One draw of `tau` by inversion of the survival function.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<S> {
        let u = S::open_unit(rng);
        self.survival_quantile(u)
    }

    /// Sums `(sum_m (-1)^m/(2m+1) e_m, sum_m (-1)^m (2m+1) e_m)` with
    /// `e_m = exp(-((2m+1)^2 - 1) gamma t)`; the common factor `exp(-gamma t)` is left out.
    fn eigen_sums(&self, t: S) -> (S, S) {
        let gamma = Self::tail_rate();
        let mut sum = S::zero();
        let mut dsum = S::zero();
        for m in 0..self.series_terms {
            let k = S::from_usize_lossy(2 * m + 1);
            let decay = (-(k * k - S::one()) * gamma * t).exp();
            let sign = if m % 2 == 0 { S::one() } else { -S::one() };
            sum += sign * decay / k;
            dsum += sign * decay * k;
            if decay * k < S::epsilon() * S::lit(1e-3) {
                break;
            }
        }
        (sum, dsum)
    }

    fn theta_cdf(&self, t: S) -> S {
        let scale = (S::lit(2.0) * t).sqrt();
        let mut acc = S::zero();
        for n in 0..self.series_terms.max(4) {
            let a = S::from_usize_lossy(2 * n + 1);
            let term = erfc(a / scale);
            acc += if n % 2 == 0 { term } else { -term };
            if term <= S::epsilon() * acc.abs() || term == S::zero() {
                break;
            }
        }
        S::lit(2.0) * acc
    }

    fn theta_density(&self, t: S) -> S {
        let norm = S::lit(2.0) / (S::lit(2.0) * S::PI() * t * t * t).sqrt();
        let mut acc = S::zero();
        for n in 0..self.series_terms.max(4) {
            let a = S::from_usize_lossy(2 * n + 1);
            let term = a * (-a * a / (S::lit(2.0) * t)).exp();
            acc += if n % 2 == 0 { term } else { -term };
            if term <= S::epsilon() * acc.abs() || term == S::zero() {
                break;
            }
        }
        (norm * acc).max(S::zero())
    }
}
