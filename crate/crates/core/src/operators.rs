//! Discrete variational operators of a functional structure: the jump quotient
//! `𝒟^{k,j}X`, the weak generator `U^{k}X`, their pathwise forms `∇_j F^k` and `𝒰F^k`,
//! the extended processes `𝔻`, `𝕌`, and the decomposition `X^k = X(0) + M + N`.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::disintegration::{mark_probabilities, next_event_sample, MarkConditioning};
use crate::error::{Error, Result};
use crate::exit_time::ExitLaw;
use crate::functional::{eval_at_event, PathFunctional};
use crate::history::History;
use crate::numerics::quadrature::integrate;
use crate::numerics::stats::Summary;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::skeleton::{Mark, Skeleton};
use crate::structures::StepProcess;

/// Per-event samples `D_n` and, once filled, `U_n` with its standard error.
#[derive(Debug, Clone)]
pub struct OperatorField<S> {
    skeleton: Arc<Skeleton<S>>,
    // Index n = 1..=events; index 0 is unused and zero.
    derivative: Vec<S>,
    generator: Vec<S>,
    generator_stderr: Vec<S>,
}

impl<S: Scalar> OperatorField<S> {
    pub fn skeleton(&self) -> &Arc<Skeleton<S>> {
        &self.skeleton
    }

    pub fn len(&self) -> usize {
        self.derivative.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mesh(&self) -> S {
        self.skeleton.mesh()
    }

    /// `D_n`, attached to coordinate `ℵ_1(η_n)`.
    pub fn derivative(&self, n: usize) -> S {
        self.derivative[n]
    }

    pub fn mark(&self, n: usize) -> Mark {
        self.skeleton.events().mark(n)
    }

    /// `𝒟^{k,j}X(T_n)`: `D_n` at coordinate-`j` events, zero elsewhere.
    pub fn derivative_for(&self, j: usize, n: usize) -> S {
        if self.mark(n).coordinate == j {
            self.derivative[n]
        } else {
            S::zero()
        }
    }

    pub fn has_generator(&self) -> bool {
        !self.generator.is_empty()
    }

    /// `(U_n, stderr)` once the generator is filled.
    pub fn generator(&self, n: usize) -> Option<(S, S)> {
        self.has_generator().then(|| (self.generator[n], self.generator_stderr[n]))
    }

    /// Installs `U_n` and standard errors for `n = 1..=events`.
    pub fn with_generator(mut self, values: Vec<S>, stderr: Vec<S>) -> Result<Self> {
        if values.len() != self.len() || stderr.len() != self.len() {
            return Err(Error::DegenerateInput("generator samples do not match the events".into()));
        }
        self.generator = std::iter::once(S::zero()).chain(values).collect();
        self.generator_stderr = std::iter::once(S::zero()).chain(stderr).collect();
        Ok(self)
    }

    /// `X(0) + Σ_{m <= n} D_m·ε·ℵ_2(η_m)` for every `n`.
    pub fn reconstruct(&self, initial: S) -> Vec<S> {
        let eps = self.mesh();
        let mut acc = initial;
        let mut out = Vec::with_capacity(self.derivative.len());
        out.push(acc);
        for n in 1..self.derivative.len() {
            acc += self.derivative[n] * eps * self.mark(n).sign_scalar::<S>();
            out.push(acc);
        }
        out
    }

    /// Rows `n,time,coordinate,sign,D,U,U_stderr` (coordinate 1-based; `U` columns empty
    /// when the generator is not filled).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "n,time,coordinate,sign,D,U,U_stderr")?;
        for n in 1..=self.len() {
            let mark = self.mark(n);
            let (u, se) = match self.generator(n) {
                Some((u, se)) => (u.to_string(), se.to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                n,
                self.skeleton.events().time(n),
                mark.coordinate + 1,
                mark.sign,
                self.derivative[n],
                u,
                se
            )?;
        }
        Ok(())
    }
}

/// `D_n = ΔX(T_n)/(ε·ℵ_2(η_n))` at every merged event.
pub fn derivative_at_events<S: Scalar>(x: &StepProcess<S>) -> OperatorField<S> {
    let s = x.skeleton().clone();
    let eps = s.mesh();
    let mut derivative = vec![S::zero()];
    for n in 1..=x.len() {
        derivative.push(x.increment(n) / (eps * s.events().mark(n).sign_scalar::<S>()));
    }
    OperatorField { skeleton: s, derivative, generator: Vec::new(), generator_stderr: Vec::new() }
}

/// `∇_j F^k(b_n) = (F_n(b_n) − F_{n−1}(π_{n−1} b_n))/(ε·ℵ_2(η_n))·1{ℵ_1(η_n) = j}`.
pub fn nabla<S: Scalar>(f: &dyn PathFunctional<S>, h: &History<S>, j: usize) -> Result<S> {
    if j >= h.dimension() {
        return Err(Error::CoordinateOutOfRange { coordinate: j, dimension: h.dimension() });
    }
    let n = h.len();
    if n == 0 {
        return Err(Error::DegenerateInput("nabla needs a nonempty history".into()));
    }
    let mark = h.mark(n);
    if mark.coordinate != j {
        return Ok(S::zero());
    }
    let now = eval_at_event(f, h, n)?;
    let before = eval_at_event(f, &h.prefix(n - 1), n - 1)?;
    Ok((now - before) / (h.mesh() * mark.sign_scalar::<S>()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    /// Both signs enumerated; zero standard error when the coordinate law is exact.
    Exact,
    /// `budget` random marks averaged.
    MonteCarlo { budget: usize },
}

/// How `U_n = E[ΔX(T_n)/ε² | F_{T_n−}]` averages over the unknown mark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig<S> {
    pub sampling: Sampling,
    /// Triggering-coordinate law given the arrival time (ignored when `d = 1`).
    pub conditioning: MarkConditioning<S>,
    /// Kernel draws per event under kernel conditioning.
    pub kernel_budget: usize,
    /// Raise `BudgetTooSmall` when a standard error exceeds this.
    pub tolerance: Option<S>,
}

impl<S: Scalar> Default for GeneratorConfig<S> {
    fn default() -> Self {
        Self { sampling: Sampling::Exact, conditioning: MarkConditioning::default(), kernel_budget: 4000, tolerance: None }
    }
}

/// `(F(t, h + (t, (j, σ))) − x_prev)/ε²`, evaluated by pushing and popping on `h`.
fn jump_value<S: Scalar>(f: &dyn PathFunctional<S>, h: &mut History<S>, t: S, mark: Mark, x_prev: S) -> Result<S> {
    let eps2 = h.mesh() * h.mesh();
    h.push_at(t, mark)?;
    let n = h.len();
    let v = eval_at_event(f, h, n);
    h.pop();
    Ok((v? - x_prev) / eps2)
}

/// Sign-averaged jump value for coordinate `j`.
fn sign_average<S: Scalar>(f: &dyn PathFunctional<S>, h: &mut History<S>, t: S, j: usize, x_prev: S) -> Result<S> {
    let up = jump_value(f, h, t, Mark::new(j, 1), x_prev)?;
    let down = jump_value(f, h, t, Mark::new(j, -1), x_prev)?;
    Ok((up + down) * S::lit(0.5))
}

fn weighted_mean<S: Scalar>(pairs: &[(S, S)]) -> (S, S) {
    let total: S = pairs.iter().map(|p| p.0).sum();
    let mean = pairs.iter().map(|&(w, v)| w * v).sum::<S>() / total;
    let var = pairs.iter().map(|&(w, v)| (w * (v - mean)).powi(2)).sum::<S>();
    (mean, var.sqrt() / total)
}

/// `U` for the event at absolute time `t` following history `h` (whose last value is
/// `x_prev`). `h` is restored before returning.
fn generator_after<S: Scalar, R: Rng + ?Sized>(
    f: &dyn PathFunctional<S>,
    h: &mut History<S>,
    t: S,
    x_prev: S,
    config: &GeneratorConfig<S>,
    law: &ExitLaw<S>,
    rng: &mut R,
) -> Result<(S, S)> {
    let d = h.dimension();
    let dt = t - h.current_time();
    let kernel = match config.conditioning {
        MarkConditioning::Kernel { bandwidth } if d > 1 => Some(bandwidth * h.mesh() * h.mesh()),
        _ => None,
    };
    let (u, se) = if let Some(width) = kernel {
        let mut pairs = Vec::new();
        for _ in 0..config.kernel_budget {
            let (draw, mark) = next_event_sample(h, law, rng)?;
            let k = S::one() - ((draw - dt) / width).abs();
            if k > S::zero() {
                pairs.push((k, mark));
            }
        }
        if pairs.is_empty() {
            // No draw landed in the band: fall back to the hazard ratio.
            exact_or_sampled(f, h, t, x_prev, &mark_probabilities(h, law, dt), config.sampling, rng)?
        } else {
            let mut cache: Vec<Option<S>> = vec![None; d];
            let mut values = Vec::with_capacity(pairs.len());
            for (k, mark) in pairs {
                let v = match config.sampling {
                    Sampling::Exact => match cache[mark.coordinate] {
                        Some(v) => v,
                        None => {
                            let v = sign_average(f, h, t, mark.coordinate, x_prev)?;
                            cache[mark.coordinate] = Some(v);
                            v
                        }
                    },
                    Sampling::MonteCarlo { .. } => jump_value(f, h, t, mark, x_prev)?,
                };
                values.push((k, v));
            }
            weighted_mean(&values)
        }
    } else {
        let weights = if d == 1 { vec![S::one()] } else { mark_probabilities(h, law, dt) };
        exact_or_sampled(f, h, t, x_prev, &weights, config.sampling, rng)?
    };
    if let Some(tol) = config.tolerance {
        if se > tol {
            return Err(Error::BudgetTooSmall { stderr: se.as_f64(), tolerance: tol.as_f64() });
        }
    }
    Ok((u, se))
}

fn exact_or_sampled<S: Scalar, R: Rng + ?Sized>(
    f: &dyn PathFunctional<S>,
    h: &mut History<S>,
    t: S,
    x_prev: S,
    weights: &[S],
    sampling: Sampling,
    rng: &mut R,
) -> Result<(S, S)> {
    match sampling {
        Sampling::Exact => {
            let mut u = S::zero();
            for (j, &p) in weights.iter().enumerate() {
                if p > S::zero() {
                    u += p * sign_average(f, h, t, j, x_prev)?;
                }
            }
            Ok((u, S::zero()))
        }
        Sampling::MonteCarlo { budget } => {
            if budget < 2 {
                return Err(Error::Config("Monte Carlo budget must be at least 2".into()));
            }
            let mut summary = Summary::default();
            for _ in 0..budget {
                let mut j = 0;
                if weights.len() > 1 {
                    let mut u = S::open_unit(rng);
                    while j + 1 < weights.len() && u >= weights[j] {
                        u -= weights[j];
                        j += 1;
                    }
                }
                let v = jump_value(f, h, t, Mark::new(j, Mark::fair_sign(rng)), x_prev)?;
                summary.push(v.as_f64());
            }
            Ok((S::lit(summary.mean), S::lit(summary.stderr())))
        }
    }
}

/// `U_n = E[ΔX(T_n)/ε² | F_{T_n−}]` for the functional structure of `f`: the arrival
/// time `T_n` is kept and the mark is averaged out.
pub fn weak_generator_at_event<S: Scalar, R: Rng + ?Sized>(
    f: &dyn PathFunctional<S>,
    h: &History<S>,
    n: usize,
    config: &GeneratorConfig<S>,
    law: &ExitLaw<S>,
    rng: &mut R,
) -> Result<(S, S)> {
    if n == 0 || n > h.len() {
        return Err(Error::DegenerateInput(format!("event {n} outside 1..={}", h.len())));
    }
    let mut prev = h.prefix(n - 1);
    let x_prev = eval_at_event(f, &prev, n - 1)?;
    generator_after(f, &mut prev, h.time(n), x_prev, config, law, rng)
}

const FIELD_CHUNK: usize = 256;

/// Fills `U_n` at every event of `x`'s skeleton for the functional structure of `f`.
/// Event `n` draws from stream `n` of `seed`, so the field does not depend on the
/// thread count.
pub fn generator_field<S: Scalar>(
    f: &dyn PathFunctional<S>,
    x: &StepProcess<S>,
    config: &GeneratorConfig<S>,
    law: &ExitLaw<S>,
    seed: u64,
) -> Result<OperatorField<S>> {
    let field = derivative_at_events(x);
    let s = x.skeleton().clone();
    let total = x.len();
    let chunks: Vec<usize> = (0..total.div_ceil(FIELD_CHUNK)).collect();
    let parts = chunks
        .par_iter()
        .map(|&c| {
            let first = c * FIELD_CHUNK + 1;
            let last = ((c + 1) * FIELD_CHUNK).min(total);
            let mut h = s.events().prefix(first - 1);
            let mut out = Vec::with_capacity(last + 1 - first);
            for n in first..=last {
                let mut rng = stream(seed, n as u64);
                let x_prev = x.value_at_event(n - 1);
                out.push(generator_after(f, &mut h, s.events().time(n), x_prev, config, law, &mut rng)?);
                h.push_at(s.events().time(n), s.events().mark(n))?;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let (values, stderr): (Vec<S>, Vec<S>) = parts.into_iter().flatten().unzip();
    field.with_generator(values, stderr)
}

/// `𝒰F^k(b_n) = ∫ (F_{n+1}(b_n, s, i) − F_n(b_n))/ε² ν(ds di | b_n)` by plain Monte Carlo.
pub fn conditional_generator<S: Scalar, R: Rng + ?Sized>(
    f: &dyn PathFunctional<S>,
    h: &History<S>,
    budget: usize,
    law: &ExitLaw<S>,
    rng: &mut R,
) -> Result<(S, S)> {
    if budget < 2 {
        return Err(Error::Config("Monte Carlo budget must be at least 2".into()));
    }
    let mut work = h.clone();
    let x_now = eval_at_event(f, h, h.len())?;
    let mut summary = Summary::default();
    for _ in 0..budget {
        let (dt, mark) = next_event_sample(&work, law, rng)?;
        let t = work.current_time() + dt;
        summary.push(jump_value(f, &mut work, t, mark, x_now)?.as_f64());
    }
    Ok((S::lit(summary.mean), S::lit(summary.stderr())))
}

#[derive(Debug, Clone)]
pub struct Decomposition<S> {
    /// `M = X − X(0) − N`.
    pub martingale: StepProcess<S>,
    /// `N(T_n) = Σ_{m <= n} ε²U_m`.
    pub compensator: StepProcess<S>,
    /// Standard error of `N(T_n)` from the generator's Monte Carlo errors.
    pub compensator_stderr: Vec<S>,
}

/// The `F^k`-special semimartingale decomposition of a structure with a filled generator.
pub fn decompose<S: Scalar>(x: &StepProcess<S>, field: &OperatorField<S>) -> Result<Decomposition<S>> {
    if !field.has_generator() {
        return Err(Error::DegenerateInput("decomposition needs the generator field".into()));
    }
    if field.len() != x.len() || !Arc::ptr_eq(field.skeleton(), x.skeleton()) {
        return Err(Error::DegenerateInput("field and process live on different skeletons".into()));
    }
    let eps2 = field.mesh() * field.mesh();
    let mut n_vals = vec![S::zero()];
    let mut m_vals = vec![S::zero()];
    let mut var = vec![S::zero()];
    for n in 1..=x.len() {
        let (u, se) = field.generator(n).expect("filled");
        n_vals.push(n_vals[n - 1] + eps2 * u);
        m_vals.push(x.value_at_event(n) - x.initial() - n_vals[n]);
        var.push(var[n - 1] + (eps2 * se).powi(2));
    }
    Ok(Decomposition {
        martingale: StepProcess::new(x.skeleton().clone(), m_vals)?,
        compensator: StepProcess::new(x.skeleton().clone(), n_vals)?,
        compensator_stderr: var.into_iter().map(|v| v.sqrt()).collect(),
    })
}

/// `𝔻^{k,j}` and `𝕌^{k,j}` as functions of time.
pub struct ExtendedFields<'a, S: Scalar> {
    field: &'a OperatorField<S>,
    functional: &'a dyn PathFunctional<S>,
    values: &'a StepProcess<S>,
    law: &'a ExitLaw<S>,
}

pub fn extend_fields<'a, S: Scalar>(
    field: &'a OperatorField<S>,
    functional: &'a dyn PathFunctional<S>,
    values: &'a StepProcess<S>,
    law: &'a ExitLaw<S>,
) -> ExtendedFields<'a, S> {
    ExtendedFields { field, functional, values, law }
}

impl<S: Scalar> ExtendedFields<'_, S> {
    /// `𝔻^j(t)`: `D` of the last coordinate-`j` event at or before `t`, constant over
    /// coordinate `j`'s own inter-event intervals (zero before its first event).
    pub fn derivative(&self, j: usize, t: S) -> S {
        let ev = self.field.skeleton().events();
        let m = ev.count(j, t);
        if m == 0 {
            S::zero()
        } else {
            self.field.derivative(ev.merged_index(j, m))
        }
    }

    /// `𝕌^j(t) = U^j(t)·d⟨A^j⟩/dt` with `U^j(t)` the sign-averaged jump per `ε²` if
    /// coordinate `j` fired at `t`, and `d⟨A^j⟩/dt` the scaled hazard of its age.
    pub fn generator_density(&self, j: usize, t: S) -> Result<S> {
        let ev = self.field.skeleton().events();
        let m = ev.event_times().partition_point(|s| *s < t);
        let mut h = ev.prefix(m);
        self.density_after(&mut h, j, t)
    }

    fn density_after(&self, h: &mut History<S>, j: usize, t: S) -> Result<S> {
        let eps2 = h.mesh() * h.mesh();
        let last_j = h.coordinate_time(j, h.coordinate_count(j));
        let rate = self.law.hazard((t - last_j) / eps2);
        if rate == S::zero() || t <= h.current_time() {
            return Ok(S::zero());
        }
        let x_prev = self.values.value_at_event(h.len());
        Ok(sign_average(self.functional, h, t, j, x_prev)? * rate)
    }

    /// `∫_0^t 𝕌^j(s) ds`, by adaptive quadrature between consecutive merged events.
    pub fn integrate_generator(&self, j: usize, t: S, abs_tol: S) -> Result<S> {
        let ev = self.field.skeleton().events();
        let mut h = History::new(ev.dimension(), ev.mesh());
        let mut total = S::zero();
        for n in 0..=ev.len() {
            let a = ev.time(n);
            if a >= t {
                break;
            }
            let b = if n < ev.len() { ev.time(n + 1).min(t) } else { t };
            let mut err = None;
            total += integrate(
                |s| match self.density_after(&mut h, j, s) {
                    Ok(v) => v,
                    Err(e) => {
                        err.get_or_insert(e);
                        S::zero()
                    }
                },
                a,
                b,
                abs_tol,
            )?;
            if let Some(e) = err {
                return Err(e);
            }
            if n < ev.len() {
                h.push_at(ev.time(n + 1), ev.mark(n + 1))?;
            }
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::{Constant, Coordinate, RunningIntegral, SquareMinusTime, Time};
    use crate::skeleton::SkeletonConfig;
    use crate::structures::build_functional_structure;

    fn law() -> ExitLaw<f64> {
        ExitLaw::default()
    }

    fn intrinsic(d: usize, eps: f64, horizon: f64, seed: u64) -> Arc<Skeleton<f64>> {
        Arc::new(Skeleton::generate_intrinsic(SkeletonConfig::intrinsic(d, eps, horizon), &law(), &mut stream(seed, 0)).unwrap())
    }

    fn mc(budget: usize) -> GeneratorConfig<f64> {
        GeneratorConfig { sampling: Sampling::MonteCarlo { budget }, ..GeneratorConfig::default() }
    }

    #[test]
    fn identity_has_unit_derivative_on_its_coordinate() {
        let s = intrinsic(2, 0.1, 1.0, 1);
        let field = derivative_at_events(&build_functional_structure(&Coordinate(0), &s).unwrap());
        for n in 1..=field.len() {
            let j = field.mark(n).coordinate;
            let want = if j == 0 { 1.0 } else { 0.0 };
            assert!((field.derivative_for(0, n) - want).abs() < 1e-12);
            assert_eq!(field.derivative_for(1, n), 0.0);
        }
    }

    #[test]
    fn square_minus_time_derivative_expands_algebraically() {
        let s = intrinsic(1, 0.1, 1.0, 2);
        let field = derivative_at_events(&build_functional_structure(&SquareMinusTime(0), &s).unwrap());
        let ev = s.events();
        for n in 1..=field.len() {
            let a_prev = ev.value_at_event(0, n - 1);
            let es = 0.1 * f64::from(ev.mark(n).sign);
            let oracle = 2.0 * a_prev + es - ev.increment(n) / es;
            assert!((field.derivative(n) - oracle).abs() < 1e-9 * (1.0 + oracle.abs()));
        }
    }

    #[test]
    fn constant_has_zero_derivative() {
        let s = intrinsic(2, 0.1, 1.0, 3);
        let field = derivative_at_events(&build_functional_structure(&Constant(2.5), &s).unwrap());
        assert!((1..=field.len()).all(|n| field.derivative(n) == 0.0));
    }

    #[test]
    fn nabla_examples() {
        let eps: f64 = 0.1;
        let h = History::from_increments(2, eps, &[(0.01, Mark::new(0, 1)), (0.02, Mark::new(0, -1)), (0.01, Mark::new(0, -1))])
            .unwrap();
        assert_eq!(nabla(&Coordinate(0), &h, 0).unwrap(), 1.0);
        let mut h2 = h.clone();
        h2.push(0.01, Mark::new(1, 1)).unwrap();
        assert_eq!(nabla(&Coordinate(0), &h2, 0).unwrap(), 0.0);
        // (walk)² before the last event: A = 0, last move −ε: 2·0 + ε·(−1).
        let sq = crate::functional::Square(0);
        assert!((nabla(&sq, &h, 0).unwrap() - (2.0 * 0.0 - eps)).abs() < 1e-12);
        assert!(matches!(nabla(&sq, &h, 2), Err(Error::CoordinateOutOfRange { .. })));
        assert!(nabla(&sq, &History::new(1, eps), 0).is_err());
    }

    #[test]
    fn nabla_and_derivative_are_bit_identical() {
        let s = intrinsic(2, 0.1, 0.5, 4);
        for f in [&SquareMinusTime(0) as &dyn PathFunctional<f64>, &RunningIntegral(1), &Coordinate(1)] {
            let field = derivative_at_events(&build_functional_structure(f, &s).unwrap());
            for n in 1..=field.len() {
                let h = s.events().prefix(n);
                for j in 0..2 {
                    assert_eq!(nabla(f, &h, j).unwrap().to_bits(), field.derivative_for(j, n).to_bits());
                }
            }
        }
    }

    #[test]
    fn telescoping_reconstruction() {
        let s = intrinsic(3, 0.1, 1.0, 5);
        for f in [&SquareMinusTime(2) as &dyn PathFunctional<f64>, &RunningIntegral(0), &Time] {
            let x = build_functional_structure(f, &s).unwrap();
            let rebuilt = derivative_at_events(&x).reconstruct(x.initial());
            let mut scale = 0.0;
            for n in 0..=x.len() {
                if n > 0 {
                    scale += x.increment(n).abs() + x.value_at_event(n).abs();
                }
                let bound = 4.0 * (n as f64 + 1.0) * f64::EPSILON * scale;
                assert!((rebuilt[n] - x.value_at_event(n)).abs() <= bound);
            }
        }
    }

    #[test]
    fn generator_of_the_walk_vanishes() {
        let s = intrinsic(1, 0.1, 1.0, 6);
        let field = generator_field(&Coordinate(0), &build_functional_structure(&Coordinate(0), &s).unwrap(), &GeneratorConfig::default(), &law(), 0)
            .unwrap();
        for n in 1..=field.len() {
            let (u, se) = field.generator(n).unwrap();
            assert!(u.abs() < 1e-12 && se == 0.0);
        }
    }

    #[test]
    fn generator_closed_form_for_square_minus_time() {
        let s = intrinsic(1, 0.1, 1.0, 7);
        let f = SquareMinusTime(0);
        let x = build_functional_structure(&f, &s).unwrap();
        let exact = generator_field(&f, &x, &GeneratorConfig::default(), &law(), 0).unwrap();
        let sampled = generator_field(&f, &x, &mc(400), &law(), 1).unwrap();
        let mut within = 0;
        for n in 1..=x.len() {
            let oracle = (0.01 - s.events().increment(n)) / 0.01;
            assert!((exact.generator(n).unwrap().0 - oracle).abs() < 1e-9);
            let (u, se) = sampled.generator(n).unwrap();
            within += usize::from((u - oracle).abs() <= 3.0 * se + 1e-9);
        }
        assert!(within as f64 >= 0.95 * x.len() as f64);
    }

    #[test]
    fn generator_of_the_clock() {
        let s = intrinsic(2, 0.1, 1.0, 8);
        let x = build_functional_structure(&Time, &s).unwrap();
        let field = generator_field(&Time, &x, &GeneratorConfig::default(), &law(), 0).unwrap();
        for n in 1..=x.len() {
            assert!((field.generator(n).unwrap().0 - s.events().increment(n) / 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn kernel_conditioning_matches_hazard_ratio() {
        // A generator that depends on which coordinate fires: X = A¹² − A²².
        let f = crate::functional::FnFunctional::markov("diff", |_t, x: &[f64]| x[0] * x[0] - x[1] * x[1]);
        let s = intrinsic(2, 0.1, 0.3, 9);
        let h = s.events().clone();
        let kernel = GeneratorConfig { kernel_budget: 20_000, ..GeneratorConfig::default() };
        let exact = GeneratorConfig { conditioning: MarkConditioning::HazardRatio, ..GeneratorConfig::default() };
        for n in 2..h.len().min(8) {
            let (uk, sek) = weak_generator_at_event(&f, &h, n, &kernel, &law(), &mut stream(10, n as u64)).unwrap();
            let (ue, see) = weak_generator_at_event(&f, &h, n, &exact, &law(), &mut stream(11, n as u64)).unwrap();
            assert_eq!(see, 0.0);
            // The triangular kernel smooths the hazard ratio; allow its bias on top of noise.
            assert!((uk - ue).abs() <= 3.0 * sek + 0.05, "event {n}: {uk} ± {sek} vs {ue}");
        }
    }

    #[test]
    fn budget_too_small_is_reported() {
        let s = intrinsic(1, 0.1, 0.2, 12);
        let f = Coordinate(0);
        let config = GeneratorConfig { tolerance: Some(1e-6), ..mc(4) };
        let r = weak_generator_at_event(&f, s.events(), 3, &config, &law(), &mut stream(0, 0));
        assert!(matches!(r, Err(Error::BudgetTooSmall { .. })));
    }

    #[test]
    fn conditional_generator_examples() {
        let s = intrinsic(1, 0.1, 0.5, 13);
        let h = s.events().prefix(10);
        let mut rng = stream(14, 0);
        let (u, se) = conditional_generator(&SquareMinusTime(0), &h, 20_000, &law(), &mut rng).unwrap();
        assert!(u.abs() <= 3.0 * se, "{u} ± {se}");
        let (u, se) = conditional_generator(&Time, &h, 20_000, &law(), &mut rng).unwrap();
        assert!((u - 1.0).abs() <= 3.0 * se);
        // E[∫_{T_n}^{T_{n+1}} A ds]/ε² = A(T_n)·E[ΔT]/ε² exactly for the step integral.
        let a = h.value_at_event(0, h.len());
        let (u, se) = conditional_generator(&RunningIntegral(0), &h, 20_000, &law(), &mut rng).unwrap();
        assert!((u - a).abs() <= 3.0 * se + 1e-12, "{u} vs {a}");
    }

    #[test]
    fn decomposition_of_walk_and_clock() {
        let s = intrinsic(1, 0.1, 1.0, 15);
        let walk = build_functional_structure(&Coordinate(0), &s).unwrap();
        let d = decompose(&walk, &generator_field(&Coordinate(0), &walk, &GeneratorConfig::default(), &law(), 0).unwrap()).unwrap();
        for n in 0..=walk.len() {
            assert!(d.compensator.value_at_event(n).abs() < 1e-10);
            assert!((d.martingale.value_at_event(n) - walk.value_at_event(n)).abs() < 1e-10);
        }
        let clock = build_functional_structure(&Time, &s).unwrap();
        let d = decompose(&clock, &generator_field(&Time, &clock, &GeneratorConfig::default(), &law(), 0).unwrap()).unwrap();
        for n in 0..=clock.len() {
            assert!((d.compensator.value_at_event(n) - s.events().time(n)).abs() < 1e-12);
            assert!(d.martingale.value_at_event(n).abs() < 1e-12);
        }
        let field = derivative_at_events(&clock);
        assert!(decompose(&clock, &field).is_err());
    }

    #[test]
    fn martingale_residuals_have_zero_mean() {
        let law = law();
        for f in [&SquareMinusTime(0) as &dyn PathFunctional<f64>, &RunningIntegral(0), &Coordinate(0), &Time] {
            let mut residuals = Summary::default();
            for i in 0..100 {
                let s = intrinsic(1, 0.1, 1.0, 100 + i);
                let x = build_functional_structure(f, &s).unwrap();
                let d = decompose(&x, &generator_field(f, &x, &GeneratorConfig::default(), &law, i).unwrap()).unwrap();
                for n in 1..=x.len() {
                    residuals.push(d.martingale.increment(n));
                }
            }
            assert!(residuals.count > 10_000);
            assert!(residuals.z_score(0.0).abs() < 2.576, "{}: {}", f.name(), residuals.z_score(0.0));
        }
    }

    #[test]
    fn extended_derivative_is_a_step_function() {
        let s = intrinsic(1, 0.1, 1.0, 16);
        let f = SquareMinusTime(0);
        let x = build_functional_structure(&f, &s).unwrap();
        let field = derivative_at_events(&x);
        let law = law();
        let ext = extend_fields(&field, &f, &x, &law);
        let ev = s.events();
        for n in 1..ev.len() {
            let mid = 0.5 * (ev.time(n) + ev.time(n + 1));
            assert_eq!(ext.derivative(0, mid), field.derivative(n));
        }
        assert_eq!(ext.derivative(0, 0.5 * ev.time(1)), 0.0);
    }

    #[test]
    fn extended_generator_vanishes_right_after_events() {
        let s = intrinsic(1, 0.1, 1.0, 17);
        let f = Time;
        let x = build_functional_structure(&f, &s).unwrap();
        let field = derivative_at_events(&x);
        let law = law();
        let ext = extend_fields(&field, &f, &x, &law);
        let t = s.events().time(3);
        assert!(ext.generator_density(0, t + 1e-6).unwrap().abs() < 1e-12);
        assert!(ext.generator_density(0, t + 0.01).unwrap() > 0.0);
    }

    #[test]
    fn integrated_generator_compensates_the_clock() {
        let law = law();
        let horizon = 1.0;
        let (mut integrated, mut compensator) = (Summary::default(), Summary::default());
        for i in 0..1000 {
            let s = intrinsic(1, 0.1, horizon, 200 + i);
            let x = build_functional_structure(&Time, &s).unwrap();
            let field = generator_field(&Time, &x, &GeneratorConfig::default(), &law, 0).unwrap();
            let d = decompose(&x, &field).unwrap();
            let ext = extend_fields(&field, &Time, &x, &law);
            integrated.push(ext.integrate_generator(0, horizon, 1e-9).unwrap());
            compensator.push(d.compensator.value_at(horizon));
        }
        let se = (integrated.stderr().powi(2) + compensator.stderr().powi(2)).sqrt();
        assert!((integrated.mean - compensator.mean).abs() < 3.0 * se, "{} vs {}", integrated.mean, compensator.mean);
        assert!((integrated.mean - horizon).abs() < 0.02);
    }

    #[test]
    fn field_is_independent_of_worker_count() {
        let s = intrinsic(2, 0.05, 1.0, 18);
        let f = SquareMinusTime(1);
        let x = build_functional_structure(&f, &s).unwrap();
        let run = |w| {
            crate::rng::with_workers(w, || generator_field(&f, &x, &GeneratorConfig::default(), &law(), 3).unwrap())
        };
        let (a, b) = (run(1), run(4));
        for n in 1..=x.len() {
            assert_eq!(a.generator(n), b.generator(n));
        }
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("n,time,coordinate,sign,D,U,U_stderr\n1,"));
    }
}
