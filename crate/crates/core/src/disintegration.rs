//! The one-step kernel `ν^k_{n+1}(ds, di | b^k_n)`: law of the next inter-arrival and
//! mark given the history, realized by the renewal-residual representation.
//!
//! Given the history, coordinate `j` has been waiting `e_j` since its last event, so its
//! next event comes after a residual `R_j ~ ε²(τ − e_j/ε² | τ > e_j/ε²)`, independently
//! across coordinates. The next merged event is `min_j R_j`; its sign is a fair coin.

use rand::Rng;

use crate::error::{Error, Result};
use crate::exit_time::{ExitLaw, BRACKET_HIGH};
use crate::history::History;
use crate::numerics::quadrature::integrate;
use crate::scalar::Scalar;
use crate::skeleton::Mark;

/// Smallest admissible conditioning survival probability.
pub const SURVIVAL_FLOOR: f64 = 1e-30;

/// How the triggering coordinate is drawn given the arrival time, for `d >= 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarkConditioning<S> {
    /// Kernel-weighted `next_event_sample` draws within `bandwidth·ε²` of the arrival.
    Kernel { bandwidth: S },
    /// `P(j | Δt = s) = h(e_j + s)/Σ_i h(e_i + s)` with `h` the scaled hazard.
    HazardRatio,
}

impl<S: Scalar> Default for MarkConditioning<S> {
    fn default() -> Self {
        MarkConditioning::Kernel { bandwidth: S::lit(0.1) }
    }
}

fn check_survival<S: Scalar>(law: &ExitLaw<S>, e: S) -> Result<()> {
    let ls = law.log_survival(e);
    if ls < S::lit(SURVIVAL_FLOOR.ln()) {
        return Err(Error::Underflow { elapsed: e.as_f64(), survival: ls.exp().as_f64() });
    }
    Ok(())
}

/// One draw of `ε²(τ − e | τ > e)` with `e = elapsed/ε²`.
pub fn residual_sample<S: Scalar, R: Rng + ?Sized>(elapsed: S, mesh: S, law: &ExitLaw<S>, rng: &mut R) -> Result<S> {
    if elapsed < S::zero() {
        return Err(Error::DegenerateInput(format!("elapsed time {elapsed} is negative")));
    }
    let eps2 = mesh * mesh;
    let e = elapsed / eps2;
    check_survival(law, e)?;
    let u = S::open_unit(rng);
    Ok(eps2 * law.conditional_quantile(e, u)?)
}

/// One draw from `ν(·|h)`: `(min_j R_j, (argmin, fair sign))`. Residuals are drawn in
/// coordinate order, then the sign.
pub fn next_event_sample<S: Scalar, R: Rng + ?Sized>(h: &History<S>, law: &ExitLaw<S>, rng: &mut R) -> Result<(S, Mark)> {
    let mut best = (S::infinity(), 0);
    for j in 0..h.dimension() {
        let r = residual_sample(h.elapsed(j), h.mesh(), law, rng)?;
        if r < best.0 {
            best = (r, j);
        }
    }
    Ok((best.0, Mark::new(best.1, Mark::fair_sign(rng))))
}

/// Extends `h` by kernel draws until its last event is past `until` and it holds at
/// least `min_len` events.
pub fn extend_until<S: Scalar, R: Rng + ?Sized>(
    h: &mut History<S>,
    until: S,
    min_len: usize,
    law: &ExitLaw<S>,
    rng: &mut R,
) -> Result<()> {
    while h.current_time() <= until || h.len() < min_len {
        let (dt, mark) = next_event_sample(h, law, rng)?;
        h.push(dt, mark)?;
    }
    Ok(())
}

/// `P(min_j R_j > s | h)` for `s >= 0`.
pub fn joint_survival<S: Scalar>(h: &History<S>, law: &ExitLaw<S>, s: S) -> S {
    let eps2 = h.mesh() * h.mesh();
    let mut log = S::zero();
    for j in 0..h.dimension() {
        let e = h.elapsed(j) / eps2;
        log += law.log_survival(e + s / eps2) - law.log_survival(e);
    }
    log.exp()
}

/// `E[ΔT_{n+1} | h] = ∫_0^∞ P(min_j R_j > s) ds`. Exactly `ε²` when `d = 1`, since the
/// only coordinate has just renewed.
pub fn expected_interarrival<S: Scalar>(h: &History<S>, law: &ExitLaw<S>, abs_tol: S) -> Result<S> {
    let eps2 = h.mesh() * h.mesh();
    if h.dimension() == 1 {
        return Ok(eps2);
    }
    for j in 0..h.dimension() {
        check_survival(law, h.elapsed(j) / eps2)?;
    }
    let unit = integrate(|u| joint_survival(h, law, u * eps2), S::zero(), S::lit(BRACKET_HIGH), abs_tol)?;
    Ok(eps2 * unit)
}

/// `P(ℵ_1 = j | Δt = s, h)` for every `j`, by the hazard ratio.
pub fn mark_probabilities<S: Scalar>(h: &History<S>, law: &ExitLaw<S>, s: S) -> Vec<S> {
    let eps2 = h.mesh() * h.mesh();
    let rates: Vec<S> = (0..h.dimension()).map(|j| law.hazard((h.elapsed(j) + s) / eps2)).collect();
    let total: S = rates.iter().copied().sum();
    if total > S::zero() {
        rates.into_iter().map(|r| r / total).collect()
    } else {
        vec![S::one() / S::from_usize_lossy(h.dimension()); h.dimension()]
    }
}

/// Coordinate weights for the mark given `Δt = s`: exact hazard ratios, or the
/// triangular-kernel frequencies of `budget` draws from `ν(·|h)`. Kernel weights may
/// all vanish when no draw lands in the band; the caller then falls back to the ratio.
pub fn coordinate_weights<S: Scalar, R: Rng + ?Sized>(
    h: &History<S>,
    law: &ExitLaw<S>,
    s: S,
    conditioning: MarkConditioning<S>,
    budget: usize,
    rng: &mut R,
) -> Result<Vec<S>> {
    match conditioning {
        MarkConditioning::HazardRatio => Ok(mark_probabilities(h, law, s)),
        MarkConditioning::Kernel { bandwidth } => {
            let width = bandwidth * h.mesh() * h.mesh();
            let mut w = vec![S::zero(); h.dimension()];
            let mut total = S::zero();
            for _ in 0..budget {
                let (dt, mark) = next_event_sample(h, law, rng)?;
                let k = S::one() - ((dt - s) / width).abs();
                if k > S::zero() {
                    w[mark.coordinate] += k;
                    total += k;
                }
            }
            if total > S::zero() {
                Ok(w.into_iter().map(|x| x / total).collect())
            } else {
                Ok(mark_probabilities(h, law, s))
            }
        }
    }
}
