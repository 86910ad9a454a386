//! Asymptotic estimators: energy, covariation, recovery of the weak derivative and the
//! drift across a mesh schedule, α-variation, and the local hitting-time estimators.
//!
//! Weak convergence in `𝐁²` is not checkable on a machine; the convergence study
//! measures strong errors against closed-form references instead.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::disintegration::MarkConditioning;
use crate::error::{Error, Result};
use crate::exit_time::ExitLaw;
use crate::functional::PathFunctional;
use crate::numerics::stats::{tree_summary, Summary};
use crate::operators::{decompose, derivative_at_events, generator_field, GeneratorConfig, OperatorField};
use crate::path::{ContinuedPath, PathView, Polyline, SampledPath};
use crate::rng::{child_seed, replicate};
use crate::scalar::Scalar;
use crate::skeleton::{schedule_mesh, Skeleton, SkeletonConfig, MIN_GRID_RATIO};
use crate::structures::{build_functional_structure, simulate_segment, StepProcess, MIN_ACCEPTANCES, REJECTION_BAND, REJECTION_GRID};

/// `Σ_{T_n <= t} |ΔX(T_n)|²` on one realization.
pub fn energy<S: Scalar>(x: &StepProcess<S>, t: S) -> S {
    (1..=x.skeleton().count_to(t)).map(|n| x.increment(n).powi(2)).sum()
}

/// `E Σ_{T_n <= T} |ΔX(T_n)|²` over intrinsic skeletons.
pub fn energy_estimate<S: Scalar>(
    f: &dyn PathFunctional<S>,
    config: &SkeletonConfig<S>,
    law: &ExitLaw<S>,
    replications: usize,
    seed: u64,
) -> Result<Summary> {
    let draws = replicate(seed, replications, |_, rng| -> Result<f64> {
        let s = Arc::new(Skeleton::generate_intrinsic(*config, law, rng)?);
        Ok(energy(&build_functional_structure(f, &s)?, config.horizon).as_f64())
    });
    Ok(tree_summary(&draws.into_iter().collect::<Result<Vec<_>>>()?))
}

/// `[X, A^j](t) = Σ ΔX(T_n)·ε·ℵ_2(η_n)` over coordinate-`j` events at or before `t`.
pub fn covariation<S: Scalar>(x: &StepProcess<S>, j: usize, t: S) -> Result<S> {
    let s = x.skeleton();
    if j >= s.dimension() {
        return Err(Error::CoordinateOutOfRange { coordinate: j, dimension: s.dimension() });
    }
    let eps = s.mesh();
    let ev = s.events();
    Ok((1..=ev.count(j, t))
        .map(|m| {
            let n = ev.merged_index(j, m);
            x.increment(n) * eps * ev.mark(n).sign_scalar::<S>()
        })
        .sum())
}

/// `|x_0|^α + Σ |x_{i+1} − x_i|^α` over consecutive samples.
pub fn p_variation<S: Scalar>(samples: impl IntoIterator<Item = S>, alpha: S) -> Result<S> {
    if !(alpha >= S::one()) {
        return Err(Error::Config(format!("variation exponent {alpha} must be at least 1")));
    }
    let mut it = samples.into_iter();
    let Some(mut prev) = it.next() else {
        return Ok(S::zero());
    };
    let mut total = prev.abs().powf(alpha);
    for x in it {
        total += (x - prev).abs().powf(alpha);
        prev = x;
    }
    Ok(total)
}

/// α-variation of a step process over its own events up to `t`.
pub fn step_p_variation<S: Scalar>(x: &StepProcess<S>, alpha: S, t: S) -> Result<S> {
    p_variation(x.values()[..=x.skeleton().count_to(t)].iter().copied(), alpha)
}

/// `N^k`, the level-`k` approximation of the drift `V_X`.
pub fn drift_reconstruction<S: Scalar>(x: &StepProcess<S>, field: &OperatorField<S>) -> Result<StepProcess<S>> {
    Ok(decompose(x, field)?.compensator)
}

/// `sup |N(t) − V(t)|` over the events up to `t` and `t` itself, `V` read off `path`.
pub fn drift_sup_error<S: Scalar>(
    compensator: &StepProcess<S>,
    drift: &dyn PathFunctional<S>,
    path: &dyn PathView<S>,
    t: S,
) -> Result<S> {
    let ev = compensator.skeleton().events();
    let last = compensator.skeleton().count_to(t);
    let mut worst = (compensator.value_at_event(last) - drift.eval(t, path)?).abs();
    for n in 0..=last {
        worst = worst.max((compensator.value_at_event(n) - drift.eval(ev.time(n), path)?).abs());
    }
    Ok(worst)
}

/// `∫_0^t |𝔻^j(s) − H(s)|² ds` as a Riemann sum on the grid `i·step` where `reference`
/// holds `H(i·step)`.
pub fn derivative_l2_error<S: Scalar>(field: &OperatorField<S>, j: usize, reference: &[S], step: S, t: S) -> S {
    let ev = field.skeleton().events();
    let times = ev.coordinate_times(j);
    let mut m = 0;
    let mut total = S::zero();
    for (i, &h) in reference.iter().enumerate() {
        let s = step * S::from_usize_lossy(i);
        if s >= t {
            break;
        }
        while m + 1 < times.len() && times[m + 1] <= s {
            m += 1;
        }
        let d = if m == 0 { S::zero() } else { field.derivative(ev.merged_index(j, m)) };
        total += (d - h).powi(2) * step.min(t - s);
    }
    total
}

/// A coupled convergence study: every replication draws one fine Brownian path and
/// extracts the skeleton of each level from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceStudy {
    pub dimension: usize,
    pub horizon: f64,
    /// `ε_k = base·2^{−k}`.
    pub base: f64,
    pub levels: Vec<usize>,
    pub replications: usize,
    /// Fine step is `ε²_min/grid_ratio`.
    pub grid_ratio: f64,
    pub seed: u64,
}

impl Default for ConvergenceStudy {
    fn default() -> Self {
        Self {
            dimension: 1,
            horizon: 1.0,
            base: crate::skeleton::DEFAULT_MESH_BASE,
            levels: (2..=6).collect(),
            replications: 1000,
            grid_ratio: MIN_GRID_RATIO,
            seed: 0,
        }
    }
}

impl ConvergenceStudy {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 || self.levels.is_empty() || self.replications < 2 {
            return Err(Error::Config("study needs a dimension, levels and at least two replications".into()));
        }
        if !(self.horizon > 0.0 && self.base > 0.0) || self.grid_ratio < MIN_GRID_RATIO {
            return Err(Error::Config(format!("need horizon > 0, base > 0 and grid_ratio >= {MIN_GRID_RATIO}")));
        }
        Ok(())
    }

    pub fn fine_step<S: Scalar>(&self) -> S {
        let finest = self.levels.iter().map(|&k| schedule_mesh(S::lit(self.base), k)).fold(S::infinity(), S::min);
        finest * finest / S::lit(self.grid_ratio)
    }
}

/// What the study compares each level against.
pub struct StudyTargets<'a, S: Scalar> {
    pub functional: &'a dyn PathFunctional<S>,
    /// `H_j` per coordinate, evaluated on the driving path.
    pub derivative: Vec<Arc<dyn PathFunctional<S>>>,
    /// `V_X` on the driving path; the generator is only computed when present.
    pub drift: Option<Arc<dyn PathFunctional<S>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LevelReport {
    pub level: usize,
    pub mesh: f64,
    pub mean_events: f64,
    /// `E ∫_0^T Σ_j |𝔻^j − H_j|² dt`.
    pub derivative_error: f64,
    pub derivative_stderr: f64,
    /// `E sup_t |N(t) − V(t)|`.
    pub drift_error: Option<f64>,
    pub drift_stderr: Option<f64>,
    /// `E Σ |ΔX|²`.
    pub energy: f64,
    pub energy_stderr: f64,
    /// Stability proxies: `Var N(T)` and `E Q²(N)` over the level's partition.
    pub compensator_variance: Option<f64>,
    pub compensator_quadratic_variation: Option<f64>,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceReport {
    pub functional: String,
    pub study: ConvergenceStudy,
    pub fine_step: f64,
    pub levels: Vec<LevelReport>,
}

impl ConvergenceReport {
    pub fn derivative_errors(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.derivative_error).collect()
    }

    pub fn drift_errors(&self) -> Option<Vec<f64>> {
        self.levels.iter().map(|l| l.drift_error).collect()
    }

    /// Rows `level,mesh,mean_events,derivative_error,...`; absent drift columns are empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "level,mesh,mean_events,derivative_error,derivative_stderr,drift_error,drift_stderr,energy,energy_stderr,compensator_variance,compensator_quadratic_variation"
        )?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for l in &self.levels {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                l.level,
                l.mesh,
                l.mean_events,
                l.derivative_error,
                l.derivative_stderr,
                opt(l.drift_error),
                opt(l.drift_stderr),
                l.energy,
                l.energy_stderr,
                opt(l.compensator_variance),
                opt(l.compensator_quadratic_variation)
            )?;
        }
        Ok(())
    }
}

/// Number of `i` with `values[i + 1] >= values[i]`.
pub fn monotonicity_violations(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] >= w[0]).count()
}

/// `last/first`.
pub fn final_ratio(values: &[f64]) -> f64 {
    match (values.first(), values.last()) {
        (Some(&a), Some(&b)) => b / a,
        _ => f64::NAN,
    }
}

struct LevelSample {
    events: f64,
    derivative: f64,
    energy: f64,
    drift: Option<(f64, f64, f64)>,
}

/// Runs the study. Replications are independent streams of `study.seed`; results are
/// reduced in replication order.
pub fn run_convergence_study<S: Scalar>(
    study: &ConvergenceStudy,
    targets: &StudyTargets<'_, S>,
    law: &ExitLaw<S>,
) -> Result<ConvergenceReport> {
    study.validate()?;
    if targets.derivative.len() != study.dimension {
        return Err(Error::Dimension(format!(
            "{} derivative references for dimension {}",
            targets.derivative.len(),
            study.dimension
        )));
    }
    let horizon = S::lit(study.horizon);
    let step: S = study.fine_step();
    let meshes: Vec<S> = study.levels.iter().map(|&k| schedule_mesh(S::lit(study.base), k)).collect();
    let generator = GeneratorConfig { conditioning: MarkConditioning::HazardRatio, ..GeneratorConfig::default() };
    let started = Instant::now();
    let samples = replicate(study.seed, study.replications, |i, rng| -> Result<Vec<LevelSample>> {
        let path = Arc::new(SampledPath::brownian(study.dimension, step, horizon + step, rng));
        let grid = (horizon / step).ceil().to_usize().expect("grid size") + 1;
        let reference = targets
            .derivative
            .iter()
            .map(|h| (0..grid).map(|n| h.eval(step * S::from_usize_lossy(n), path.as_ref())).collect::<Result<Vec<S>>>())
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(meshes.len());
        for (level, &eps) in meshes.iter().enumerate() {
            let s = Arc::new(Skeleton::extract_with_horizon(path.clone(), eps, horizon)?);
            let x = build_functional_structure(targets.functional, &s)?;
            let field = derivative_at_events(&x);
            let derivative = (0..study.dimension)
                .map(|j| derivative_l2_error(&field, j, &reference[j], step, horizon))
                .sum::<S>();
            let drift = match &targets.drift {
                Some(v) => {
                    let seed = child_seed(study.seed, (i * meshes.len() + level) as u64);
                    let field = generator_field(targets.functional, &x, &generator, law, seed)?;
                    let n = drift_reconstruction(&x, &field)?;
                    let sup = drift_sup_error(&n, v.as_ref(), path.as_ref(), horizon)?;
                    let q2 = step_p_variation(&n, S::lit(2.0), horizon)? - n.initial().powi(2);
                    Some((sup.as_f64(), n.value_at(horizon).as_f64(), q2.as_f64()))
                }
                None => None,
            };
            out.push(LevelSample {
                events: s.count_to(horizon) as f64,
                derivative: derivative.as_f64(),
                energy: energy(&x, horizon).as_f64(),
                drift,
            });
        }
        Ok(out)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let elapsed = started.elapsed().as_secs_f64() / meshes.len() as f64;
    let levels = study
        .levels
        .iter()
        .zip(&meshes)
        .enumerate()
        .map(|(l, (&k, &eps))| {
            let column = |f: &dyn Fn(&LevelSample) -> f64| tree_summary(&samples.iter().map(|r| f(&r[l])).collect::<Vec<_>>());
            let derivative = column(&|r| r.derivative);
            let energy = column(&|r| r.energy);
            let drift = targets.drift.as_ref().map(|_| {
                (
                    column(&|r| r.drift.expect("drift").0),
                    column(&|r| r.drift.expect("drift").1),
                    column(&|r| r.drift.expect("drift").2),
                )
            });
            LevelReport {
                level: k,
                mesh: eps.as_f64(),
                mean_events: column(&|r| r.events).mean,
                derivative_error: derivative.mean,
                derivative_stderr: derivative.stderr(),
                drift_error: drift.as_ref().map(|d| d.0.mean),
                drift_stderr: drift.as_ref().map(|d| d.0.stderr()),
                energy: energy.mean,
                energy_stderr: energy.stderr(),
                compensator_variance: drift.as_ref().map(|d| d.1.variance()),
                compensator_quadratic_variation: drift.as_ref().map(|d| d.2.mean),
                runtime_seconds: elapsed,
            }
        })
        .collect();
    Ok(ConvergenceReport {
        functional: targets.functional.name(),
        study: study.clone(),
        fine_step: step.as_f64(),
        levels,
    })
}

/// First time after `t0` at which coordinate `j` of `path` is `ε` away from its value
/// at `t0`, with linear interpolation inside the grid cell, and the exit side.
pub fn exit_after<S: Scalar>(path: &SampledPath<S>, j: usize, t0: S, eps: S) -> Result<(S, i8)> {
    let line = path.coordinate(j);
    let h = line
        .uniform_step()
        .ok_or_else(|| Error::DegenerateInput("crossing detection needs a uniform grid".into()))?;
    if h * S::lit(MIN_GRID_RATIO) > eps * eps {
        return Err(Error::GridTooCoarse { step: h.as_f64(), mesh: eps.as_f64() });
    }
    let centre = line.value_at(t0);
    let (up, down) = (centre + eps, centre - eps);
    let first = ((t0 - line.start()) / h).floor().to_usize().unwrap_or(0) + 1;
    let mut prev = (t0, centre);
    for i in first..line.len() {
        let (t, v) = (line.time(i), line.values()[i]);
        if t <= t0 {
            continue;
        }
        let hit = if v >= up {
            Some((up, 1))
        } else if v <= down {
            Some((down, -1))
        } else {
            None
        };
        if let Some((level, sign)) = hit {
            let w = ((level - prev.1) / (v - prev.1)).max(S::zero()).min(S::one());
            return Ok((prev.0 + (t - prev.0) * w, sign));
        }
        prev = (t, v);
    }
    Err(Error::HorizonExceeded { level: centre.as_f64(), end: line.end().as_f64() })
}

/// `(X(t0 + T) − X(t0))/(B^j(t0 + T) − B^j(t0))` with `T` the exit time of `B^j` from
/// `B^j(t0) ± ε`.
pub fn local_derivative<S: Scalar>(
    path: &SampledPath<S>,
    x: &dyn PathFunctional<S>,
    t0: S,
    eps: S,
    j: usize,
) -> Result<S> {
    if j >= path.dim() {
        return Err(Error::CoordinateOutOfRange { coordinate: j, dimension: path.dim() });
    }
    let (t1, _) = exit_after(path, j, t0, eps)?;
    Ok((x.eval(t1, path)? - x.eval(t0, path)?) / (path.value(j, t1) - path.value(j, t0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalGenerator {
    pub estimate: f64,
    pub stderr: f64,
    /// Observed exit time `T^{t0,ε,j}`.
    pub exit_time: f64,
    pub accepted: usize,
    pub proposals: usize,
}

/// `E[(X(t0 + T) − X(t0))/T | F_{t0} ∨ σ(T)]`: continuations of `path` from `t0` are
/// accepted when their coordinate-`j` exit time falls within `0.1 ε²` of the observed one,
/// then stretched in time to match it exactly.
pub fn local_generator<S: Scalar, R: Rng + ?Sized>(
    path: &SampledPath<S>,
    x: &dyn PathFunctional<S>,
    t0: S,
    eps: S,
    j: usize,
    budget: usize,
    rng: &mut R,
) -> Result<LocalGenerator> {
    let d = path.dim();
    if j >= d {
        return Err(Error::CoordinateOutOfRange { coordinate: j, dimension: d });
    }
    let (exit, _) = exit_after(path, j, t0, eps)?;
    let observed = exit - t0;
    let eps2 = eps * eps;
    let band = S::lit(REJECTION_BAND) * eps2;
    let h = eps2 / S::lit(REJECTION_GRID);
    let start: Vec<S> = (0..d).map(|i| path.value(i, t0)).collect();
    let mut widths = vec![S::infinity(); d];
    widths[j] = eps;
    let x0 = x.eval(t0, path)?;
    let mut summary = Summary::default();
    for _ in 0..budget {
        let Some((times, values, _)) = simulate_segment(&start, &start, &widths, h, observed + band, rng) else {
            continue;
        };
        let tau = *times.last().expect("knot");
        if (tau - observed).abs() > band {
            continue;
        }
        let stretch = observed / tau;
        let mut knots: Vec<S> = times.iter().map(|&s| t0 + s * stretch).collect();
        *knots.last_mut().expect("knot") = exit;
        let tail: Vec<Polyline<S>> = values.into_iter().map(|v| Polyline::knots(knots.clone(), v)).collect();
        let continued = ContinuedPath::new(path, t0, &tail);
        summary.push(((x.eval(exit, &continued)? - x0) / observed).as_f64());
    }
    if (summary.count as usize) < MIN_ACCEPTANCES {
        return Err(Error::RejectionStarvation { accepted: summary.count as usize, budget, required: MIN_ACCEPTANCES });
    }
    Ok(LocalGenerator {
        estimate: summary.mean,
        stderr: summary.stderr(),
        exit_time: observed.as_f64(),
        accepted: summary.count as usize,
        proposals: budget,
    })
}
