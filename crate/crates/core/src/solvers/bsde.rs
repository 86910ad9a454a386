//! BSDE scheme on the skeleton. Backwards over events `n < r`:
//! `Z^j_n = E[ΔY_{n+1} ΔA^j_{n+1} | 𝒜_n] / E[(ΔA^j_{n+1})² | 𝒜_n]` and
//! `Y_n = E[Y_{n+1} | 𝒜_n] + E[ΔT_{n+1} | 𝒜_n] g(T_n, Y_n, Z_n)`, with `Y_r = ξ`.
//! `E[Y_{n+1} | 𝒜_n]` is estimated as `E[ξ + Σ_{m>n} ΔT_{m+1} g_m | 𝒜_n]`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{state, training_histories, Regression};
use crate::error::{Error, Result};
use crate::exit_time::ExitLaw;
use crate::functional::{eval_at_event, PathFunctional};
use crate::history::History;
use crate::numerics::stats::{tree_summary, Summary};
use crate::operators::{derivative_at_events, OperatorField};
use crate::rng::{child_seed, stream};
use crate::scalar::Scalar;
use crate::skeleton::{Skeleton, SkeletonConfig};
use crate::structures::StepProcess;

/// `P(mark = j | 𝒜_n)` is floored here before dividing.
const MARK_PROBABILITY_FLOOR: f64 = 1e-3;

/// Driver `g(t, y, z)` of the BSDE.
pub trait Driver<S: Scalar>: Send + Sync {
    fn name(&self) -> String;

    fn eval(&self, t: S, y: S, z: &[S]) -> S;

    /// Lipschitz constant in `y`; the implicit step needs `ε² L < 1`.
    fn lipschitz_y(&self) -> S;
}

/// `g = c + a y + b·z`.
#[derive(Debug, Clone)]
pub struct LinearDriver<S> {
    pub constant: S,
    pub y: S,
    pub z: Vec<S>,
}

impl<S: Scalar> LinearDriver<S> {
    pub fn zero() -> Self {
        Self { constant: S::zero(), y: S::zero(), z: Vec::new() }
    }

    pub fn constant(c: S) -> Self {
        Self { constant: c, y: S::zero(), z: Vec::new() }
    }

    pub fn linear(a: S) -> Self {
        Self { constant: S::zero(), y: a, z: Vec::new() }
    }
}

impl<S: Scalar> Driver<S> for LinearDriver<S> {
    fn name(&self) -> String {
        format!("linear[{}; {}; {:?}]", self.constant, self.y, self.z)
    }

    fn eval(&self, _t: S, y: S, z: &[S]) -> S {
        self.constant + self.y * y + self.z.iter().zip(z).map(|(&b, &z)| b * z).sum::<S>()
    }

    fn lipschitz_y(&self) -> S {
        self.y.abs()
    }
}

/// A driver from a closure and its Lipschitz constant in `y`.
pub struct FnDriver<S: Scalar> {
    name: String,
    g: Box<dyn Fn(S, S, &[S]) -> S + Send + Sync>,
    lipschitz: S,
}

impl<S: Scalar> FnDriver<S> {
    pub fn new(name: impl Into<String>, lipschitz: S, g: impl Fn(S, S, &[S]) -> S + Send + Sync + 'static) -> Self {
        Self { name: name.into(), g: Box::new(g), lipschitz }
    }
}

impl<S: Scalar> Driver<S> for FnDriver<S> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn eval(&self, t: S, y: S, z: &[S]) -> S {
        (self.g)(t, y, z)
    }

    fn lipschitz_y(&self) -> S {
        self.lipschitz
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsdeConfig {
    pub dimension: usize,
    pub mesh: f64,
    pub horizon: f64,
    /// Training histories for the backward regressions.
    pub paths: usize,
    /// Fresh histories for the forward validation pass.
    pub validation_paths: usize,
    pub degree: usize,
    pub seed: u64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for BsdeConfig {
    fn default() -> Self {
        Self {
            dimension: 1,
            mesh: 0.05,
            horizon: 1.0,
            paths: 20_000,
            validation_paths: 20_000,
            degree: 3,
            seed: 0,
            max_iterations: 50,
            tolerance: 1e-10,
        }
    }
}

/// Regression coefficients of one backward layer.
#[derive(Debug, Clone)]
struct Layer<S> {
    regression: Regression<S>,
    mean: Vec<S>,
    /// Per coordinate: `E[(Y_{n+1} − C_n) ΔA^j]`.
    cross: Vec<Vec<S>>,
    /// Per coordinate, `d > 1` only: `P(mark = j)`.
    mark_probability: Vec<Vec<S>>,
    /// `d > 1` only: `E[ΔT_{n+1}]`.
    hold: Option<Vec<S>>,
}

/// `Y`, `Z` and `g` along one history, for events `0..=r` (`z`, `g` for `0..r`).
#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    pub y: Vec<S>,
    pub z: Vec<Vec<S>>,
    pub g: Vec<S>,
}

impl<S: Scalar> Trajectory<S> {
    /// `Λ_n = Y_n − Y_0 + Σ_{m<n} ΔT_{m+1} g_m` at events `0..=r`.
    pub fn lambda(&self, h: &History<S>) -> Vec<S> {
        let mut out = Vec::with_capacity(self.y.len());
        let mut drift = S::zero();
        out.push(S::zero());
        for n in 1..self.y.len() {
            drift += h.increment(n) * self.g[n - 1];
            out.push(self.y[n] - self.y[0] + drift);
        }
        out
    }
}

/// The backward layers with the driver and terminal condition they were fitted for.
pub struct FittedBsde<S: Scalar> {
    config: BsdeConfig,
    horizon_index: usize,
    driver: Arc<dyn Driver<S>>,
    terminal: Arc<dyn PathFunctional<S>>,
    layers: Vec<Layer<S>>,
}

impl<S: Scalar> FittedBsde<S> {
    pub fn config(&self) -> &BsdeConfig {
        &self.config
    }

    pub fn horizon_index(&self) -> usize {
        self.horizon_index
    }

    pub fn mesh(&self) -> S {
        S::lit(self.config.mesh)
    }

    pub fn driver(&self) -> &Arc<dyn Driver<S>> {
        &self.driver
    }

    pub fn terminal(&self) -> &Arc<dyn PathFunctional<S>> {
        &self.terminal
    }

    /// The fitted solution along a history of at least `r` events, with the largest
    /// fixed-point iteration count used.
    pub fn evaluate(&self, h: &History<S>) -> Result<(Trajectory<S>, usize)> {
        let r = self.horizon_index;
        if h.len() < r || h.dimension() != self.config.dimension {
            return Err(Error::DegenerateInput(format!("history of {} events, need {r}", h.len())));
        }
        let mut y = Vec::with_capacity(r + 1);
        let mut z = Vec::with_capacity(r);
        let mut g = Vec::with_capacity(r);
        let mut iterations = 0;
        for (n, layer) in self.layers.iter().enumerate() {
            let (yn, zn, it) = self.step(layer, &state(h, n), h.time(n))?;
            iterations = iterations.max(it);
            g.push(self.driver.eval(h.time(n), yn, &zn));
            y.push(yn);
            z.push(zn);
        }
        y.push(eval_at_event(self.terminal.as_ref(), h, r)?);
        Ok((Trajectory { y, z, g }, iterations))
    }

    fn step(&self, layer: &Layer<S>, vars: &[S], t: S) -> Result<(S, Vec<S>, usize)> {
        let d = self.config.dimension;
        let eps2 = self.mesh() * self.mesh();
        let reg = &layer.regression;
        let c = reg.predict(&layer.mean, vars, &[]);
        let z: Vec<S> = (0..d)
            .map(|j| {
                let cross = reg.predict(&layer.cross[j], vars, &[]);
                let p = if d == 1 {
                    S::one()
                } else {
                    reg.predict(&layer.mark_probability[j], vars, &[]).max(S::lit(MARK_PROBABILITY_FLOOR))
                };
                cross / (eps2 * p)
            })
            .collect();
        let hold = match &layer.hold {
            None => eps2,
            Some(coef) => reg.predict(coef, vars, &[]).max(S::zero()),
        };
        let (y, it) = fixed_point(|y| c + hold * self.driver.eval(t, y, &z), c, &self.config)?;
        Ok((y, z, it))
    }
}

pub struct BsdeSolution<S: Scalar> {
    pub fitted: FittedBsde<S>,
    pub y0: S,
    pub y0_stderr: S,
    pub z0: Vec<S>,
    /// `E[ξ + ∫ g]` over the validation histories.
    pub y0_forward: S,
    pub y0_forward_stderr: S,
    /// Pooled `ΔΛ_{n+1}/ε²`, the realized `𝒰Y + g`, over validation events.
    pub residual: Summary,
    /// Zero-mean t statistic of the pooled `ΔΛ` increments.
    pub lambda_t_statistic: f64,
    pub max_iterations_used: usize,
    pub dropped_columns: usize,
    /// `Y` along one sample skeleton of `r` events.
    pub y: StepProcess<S>,
    /// Jump quotients `ΔY/ΔA` on the sample.
    pub z: OperatorField<S>,
    /// Regressed `Z_n` on the sample, per event `0..r`.
    pub z_regressed: Vec<Vec<S>>,
    /// Realized `ΔΛ_{n+1}` on the sample, an `ε²(𝒰Y + g)` sample per event.
    pub residuals: Vec<S>,
}

impl<S: Scalar> std::fmt::Debug for BsdeSolution<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BsdeSolution")
            .field("driver", &self.fitted.driver.name())
            .field("terminal", &self.fitted.terminal.name())
            .field("y0", &self.y0)
            .field("y0_stderr", &self.y0_stderr)
            .field("y0_forward", &self.y0_forward)
            .field("residual", &self.residual)
            .finish()
    }
}

impl<S: Scalar> BsdeSolution<S> {
    pub fn horizon_index(&self) -> usize {
        self.fitted.horizon_index
    }

    pub fn evaluate(&self, h: &History<S>) -> Result<(Trajectory<S>, usize)> {
        self.fitted.evaluate(h)
    }
}

fn fixed_point<S: Scalar>(f: impl Fn(S) -> S, start: S, config: &BsdeConfig) -> Result<(S, usize)> {
    let tol = S::lit(config.tolerance);
    let mut y = start;
    for it in 1..=config.max_iterations {
        let next = f(y);
        let change = (next - y).abs();
        y = next;
        if change <= tol * (S::one() + y.abs()) {
            return Ok((y, it));
        }
    }
    Err(Error::NonConvergence { iterations: config.max_iterations, width: (f(y) - y).abs().as_f64() })
}

fn jump<S: Scalar>(h: &History<S>, n: usize, j: usize) -> S {
    let mark = h.mark(n);
    if mark.coordinate == j {
        h.mesh() * mark.sign_scalar::<S>()
    } else {
        S::zero()
    }
}

pub fn solve_bsde<S: Scalar>(
    driver: Arc<dyn Driver<S>>,
    terminal: Arc<dyn PathFunctional<S>>,
    config: &BsdeConfig,
    law: &ExitLaw<S>,
) -> Result<BsdeSolution<S>> {
    let d = config.dimension;
    let mesh = S::lit(config.mesh);
    let horizon = S::lit(config.horizon);
    let contraction = mesh * mesh * driver.lipschitz_y();
    if contraction >= S::one() {
        return Err(Error::ContractionViolation { value: contraction.as_f64() });
    }
    if config.paths < 2 || config.validation_paths < 2 || config.max_iterations == 0 {
        return Err(Error::Config("the BSDE scheme needs at least two paths per pass and one iteration".into()));
    }
    let (r, train) = training_histories(d, mesh, horizon, config.paths, law, child_seed(config.seed, 0))?;
    let mut fitted = FittedBsde { config: config.clone(), horizon_index: r, driver, terminal, layers: Vec::with_capacity(r) };
    let (dropped, iterations, spread) = backward(&mut fitted, &train)?;
    let (y0, z0, _) = fitted.step(&fitted.layers[0], &state(&train[0], 0), S::zero())?;
    let validation = validate(&fitted, law)?;
    let (y, z, z_regressed, residuals) = sample(&fitted, law)?;
    Ok(BsdeSolution {
        y0,
        y0_stderr: S::lit(spread.stderr()),
        z0,
        y0_forward: validation.forward_mean,
        y0_forward_stderr: validation.forward_stderr,
        residual: validation.residual,
        lambda_t_statistic: validation.t_statistic,
        max_iterations_used: iterations.max(validation.iterations),
        dropped_columns: dropped,
        y,
        z,
        z_regressed,
        residuals,
        fitted,
    })
}

/// Fills the layers backwards on the training histories. `Y` regresses the realized tail
/// `ξ + Σ_{m>n} ΔT_{m+1} g_m`, so fitting errors do not compound; `Z` regresses the
/// one-step jump of the fitted `Y_{n+1}`, which carries far less variance.
fn backward<S: Scalar>(fitted: &mut FittedBsde<S>, train: &[History<S>]) -> Result<(usize, usize, Summary)> {
    let (d, r, rows) = (fitted.config.dimension, fitted.horizon_index, train.len());
    let mut tail: Vec<S> = train
        .iter()
        .map(|h| eval_at_event(fitted.terminal.as_ref(), h, r))
        .collect::<Result<Vec<_>>>()?;
    let mut next = tail.clone();
    let (mut dropped, mut iterations) = (0, 0);
    let mut layers = Vec::with_capacity(r);
    for n in (0..r).rev() {
        let vars: Vec<S> = train.iter().flat_map(|h| state(h, n)).collect();
        let row = |p: usize| &vars[p * (d + 1)..(p + 1) * (d + 1)];
        let regression = Regression::fit(&vars, d + 1, &[], 0, rows, fitted.config.degree, n)?;
        let mean = regression.coefficients(&tail);
        let centred: Vec<S> = (0..rows).map(|p| next[p] - regression.predict(&mean, row(p), &[])).collect();
        let cross = (0..d)
            .map(|j| {
                let target: Vec<S> = train.iter().zip(&centred).map(|(h, &c)| c * jump(h, n + 1, j)).collect();
                regression.coefficients(&target)
            })
            .collect();
        let (mark_probability, hold) = if d == 1 {
            (Vec::new(), None)
        } else {
            let probs = (0..d)
                .map(|j| {
                    let target: Vec<S> = train
                        .iter()
                        .map(|h| if h.mark(n + 1).coordinate == j { S::one() } else { S::zero() })
                        .collect();
                    regression.coefficients(&target)
                })
                .collect();
            let dt: Vec<S> = train.iter().map(|h| h.increment(n + 1)).collect();
            (probs, Some(regression.coefficients(&dt)))
        };
        dropped += regression.dropped;
        let layer = Layer { regression, mean, cross, mark_probability, hold };
        let stepped = train
            .par_iter()
            .enumerate()
            .map(|(p, h)| {
                let t = h.time(n);
                let (y, z, it) = fitted.step(&layer, row(p), t)?;
                Ok((y, h.increment(n + 1) * fitted.driver.eval(t, y, &z), it))
            })
            .collect::<Result<Vec<_>>>()?;
        for (p, (y, drift, it)) in stepped.into_iter().enumerate() {
            iterations = iterations.max(it);
            next[p] = y;
            tail[p] += drift;
        }
        layers.push(layer);
    }
    layers.reverse();
    fitted.layers = layers;
    Ok((dropped, iterations, Summary::from_slice(&tail)))
}

struct Validation<S> {
    forward_mean: S,
    forward_stderr: S,
    residual: Summary,
    t_statistic: f64,
    iterations: usize,
}

/// Forward pass over fresh histories: second estimate of `Y(0)`, pooled residuals and
/// the `Λ` martingale test.
fn validate<S: Scalar>(fitted: &FittedBsde<S>, law: &ExitLaw<S>) -> Result<Validation<S>> {
    let (d, r) = (fitted.config.dimension, fitted.horizon_index);
    let mesh = fitted.mesh();
    let (_, fresh) = training_histories(
        d,
        mesh,
        S::lit(fitted.config.horizon),
        fitted.config.validation_paths,
        law,
        child_seed(fitted.config.seed, 1),
    )?;
    let per_path = fresh
        .par_iter()
        .map(|h| {
            let (traj, it) = fitted.evaluate(h)?;
            let forward = traj.y[r] + (0..r).map(|n| h.increment(n + 1) * traj.g[n]).sum::<S>();
            let increments: Vec<f64> = traj.lambda(h).windows(2).map(|w| (w[1] - w[0]).as_f64()).collect();
            Ok((forward.as_f64(), increments, it))
        })
        .collect::<Result<Vec<_>>>()?;
    let forward = tree_summary(&per_path.iter().map(|p| p.0).collect::<Vec<_>>());
    let eps2 = (mesh * mesh).as_f64();
    let increments: Vec<f64> = per_path.iter().flat_map(|p| p.1.iter().copied()).collect();
    let pooled = tree_summary(&increments);
    let scaled: Vec<f64> = increments.iter().map(|x| x / eps2).collect();
    Ok(Validation {
        forward_mean: S::lit(forward.mean),
        forward_stderr: S::lit(forward.stderr()),
        residual: tree_summary(&scaled),
        t_statistic: if pooled.stderr() > 0.0 { pooled.mean / pooled.stderr() } else { 0.0 },
        iterations: per_path.iter().map(|p| p.2).max().unwrap_or(0),
    })
}

#[allow(clippy::type_complexity)]
fn sample<S: Scalar>(fitted: &FittedBsde<S>, law: &ExitLaw<S>) -> Result<(StepProcess<S>, OperatorField<S>, Vec<Vec<S>>, Vec<S>)> {
    let (d, r) = (fitted.config.dimension, fitted.horizon_index);
    let config = SkeletonConfig::intrinsic(d, fitted.mesh(), S::lit(fitted.config.horizon)).through_horizon_index();
    let full = Skeleton::generate_intrinsic(config, law, &mut stream(child_seed(fitted.config.seed, 2), 0))?;
    let skeleton = Arc::new(Skeleton::from_history(config, full.events().prefix(r))?);
    let h = skeleton.events();
    let (traj, _) = fitted.evaluate(h)?;
    let residuals = traj.lambda(h).windows(2).map(|w| w[1] - w[0]).collect();
    let y = StepProcess::new(skeleton, traj.y)?;
    let z = derivative_at_events(&y);
    Ok((y, z, traj.z, residuals))
}
