//! Optimal stopping on the skeleton: `max{𝒰𝕍_i, γ_i − 𝕍_i} = 0`, `𝕍_r = γ_r`, solved
//! backwards as `𝕍_i = max(γ_i, E[𝕍_{i+1} | 𝒜_i])` over event indices `i <= r`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{state, training_histories, Regression};
use crate::error::{Error, Result};
use crate::exit_time::ExitLaw;
use crate::functional::{eval_at_event, PathFunctional};
use crate::history::History;
use crate::numerics::quadrature::gauss_legendre_unit;
use crate::numerics::stats::{tree_summary, Summary};
use crate::rng::{child_seed, stream};
use crate::scalar::Scalar;
use crate::skeleton::{Skeleton, SkeletonConfig};
use crate::structures::StepProcess;

/// Half-width of the tree's time grid at layer `i`, in standard deviations of `T_i`.
const TREE_WIDTH: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StoppingMethod {
    /// `d = 1`, Markovian rewards: both signs times Gauss–Legendre nodes on the
    /// quantile of `τ`, on a time grid of `time_points` per layer.
    #[serde(rename = "tree_1d")]
    Tree1d { quadrature_nodes: usize, time_points: usize },
    /// Least-squares Monte Carlo on simulated histories with a polynomial basis in
    /// `(A, t)` and the reward as an extra regressor.
    RegressionMc { paths: usize, degree: usize },
}

impl StoppingMethod {
    pub fn tree() -> Self {
        Self::Tree1d { quadrature_nodes: 32, time_points: 241 }
    }

    pub fn regression(paths: usize) -> Self {
        Self::RegressionMc { paths, degree: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingConfig {
    pub dimension: usize,
    pub mesh: f64,
    pub horizon: f64,
    pub method: StoppingMethod,
    /// Fresh histories on which the computed rule is evaluated.
    pub evaluation_paths: usize,
    pub seed: u64,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        Self { dimension: 1, mesh: 0.1, horizon: 1.0, method: StoppingMethod::tree(), evaluation_paths: 10_000, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct StoppingSolution<S> {
    pub horizon_index: usize,
    /// `𝕍_0` from the backward recursion.
    pub value_at_zero: S,
    /// Sampling error of `𝕍_0` (zero for the tree).
    pub stderr: S,
    /// Mean reward of the computed rule on fresh histories; a lower bound in expectation.
    pub policy_value: S,
    pub policy_stderr: S,
    /// `𝕍` and the stop decisions along one sample skeleton, up to event `r`.
    pub value: StepProcess<S>,
    pub stop: Vec<bool>,
    /// Basis columns dropped as dependent, summed over layers.
    pub dropped_columns: usize,
}

/// Continuation value `E[𝕍_{i+1} | 𝒜_i]` at event `i` of a history whose reward there is `gamma`.
trait Continuation<S: Scalar>: Sync {
    fn at(&self, i: usize, h: &History<S>, gamma: S) -> S;
}

pub fn solve_optimal_stopping<S: Scalar>(
    reward: &dyn PathFunctional<S>,
    config: &StoppingConfig,
    law: &ExitLaw<S>,
) -> Result<StoppingSolution<S>> {
    let mesh = S::lit(config.mesh);
    let horizon = S::lit(config.horizon);
    let r = SkeletonConfig::intrinsic(config.dimension, mesh, horizon).horizon_index();
    let (v0, se, rule, dropped): (S, S, Box<dyn Continuation<S>>, usize) = match config.method {
        StoppingMethod::Tree1d { quadrature_nodes, time_points } => {
            if config.dimension != 1 || reward.markov(S::zero(), &[S::zero()]).is_none() {
                return Err(Error::Dimension("the quadrature tree needs d = 1 and a Markovian reward".into()));
            }
            let tree = Tree::build(reward, mesh, r, quadrature_nodes.max(1), time_points.max(2), law)?;
            (tree.value_at_zero(), S::zero(), Box::new(tree), 0)
        }
        StoppingMethod::RegressionMc { paths, degree } => {
            let (v0, se, fit) = Lsm::build(reward, config, r, paths, degree, law)?;
            let dropped = fit.dropped;
            (v0, se, Box::new(fit), dropped)
        }
    };
    let policy = evaluate_policy(reward, config, r, rule.as_ref(), law)?;
    let sample = Arc::new(Skeleton::generate_intrinsic(
        SkeletonConfig::intrinsic(config.dimension, mesh, horizon).through_horizon_index(),
        law,
        &mut stream(child_seed(config.seed, 2), 0),
    )?);
    let h = sample.events();
    let mut values = Vec::with_capacity(h.len() + 1);
    let mut stop = Vec::with_capacity(h.len() + 1);
    for i in 0..=h.len() {
        let gamma = eval_at_event(reward, h, i)?;
        if i >= r {
            values.push(gamma);
            stop.push(true);
            continue;
        }
        let c = rule.at(i, h, gamma);
        values.push(if i == 0 { v0 } else { gamma.max(c) });
        stop.push(gamma >= c);
    }
    Ok(StoppingSolution {
        horizon_index: r,
        value_at_zero: v0,
        stderr: se,
        policy_value: S::lit(policy.mean),
        policy_stderr: S::lit(policy.stderr()),
        value: StepProcess::new(sample, values)?,
        stop,
        dropped_columns: dropped,
    })
}

fn evaluate_policy<S: Scalar>(
    reward: &dyn PathFunctional<S>,
    config: &StoppingConfig,
    r: usize,
    rule: &dyn Continuation<S>,
    law: &ExitLaw<S>,
) -> Result<Summary> {
    if config.evaluation_paths < 2 {
        return Err(Error::Config("policy evaluation needs at least two paths".into()));
    }
    let (_, paths) = training_histories(
        config.dimension,
        S::lit(config.mesh),
        S::lit(config.horizon),
        config.evaluation_paths,
        law,
        child_seed(config.seed, 1),
    )?;
    let payoffs = paths
        .iter()
        .map(|h| {
            for i in 0..r {
                let gamma = eval_at_event(reward, h, i)?;
                if gamma >= rule.at(i, h, gamma) {
                    return Ok(gamma.as_f64());
                }
            }
            Ok(eval_at_event(reward, h, r)?.as_f64())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tree_summary(&payoffs))
}

/// Values `𝕍_i(t, L)` on a per-layer time grid around `E T_i = iε²`.
struct Tree<S> {
    mesh: S,
    layers: Vec<TreeLayer<S>>,
    offsets: Vec<S>,
    weights: Vec<S>,
}

struct TreeLayer<S> {
    lo: S,
    step: S,
    points: usize,
    /// `values[(L + i)/2 * points + k]`.
    values: Vec<S>,
}

impl<S: Scalar> TreeLayer<S> {
    fn grid(i: usize, mesh: S, points: usize) -> Self {
        if i == 0 {
            return Self { lo: S::zero(), step: S::one(), points: 1, values: Vec::new() };
        }
        let eps2 = mesh * mesh;
        let mean = eps2 * S::from_usize_lossy(i);
        let sd = eps2 * (S::lit(2.0 / 3.0) * S::from_usize_lossy(i)).sqrt();
        let lo = (mean - S::lit(TREE_WIDTH) * sd).max(S::zero());
        let hi = mean + S::lit(TREE_WIDTH) * sd;
        Self { lo, step: (hi - lo) / S::from_usize_lossy(points - 1), points, values: Vec::new() }
    }

    fn time(&self, k: usize) -> S {
        self.lo + self.step * S::from_usize_lossy(k)
    }

    /// Linear interpolation in time, clamped to the grid, at lattice row `row`.
    fn at(&self, row: usize, t: S) -> S {
        let base = row * self.points;
        if self.points == 1 {
            return self.values[base];
        }
        let x = ((t - self.lo) / self.step).max(S::zero());
        let k = x.floor().to_usize().unwrap_or(usize::MAX).min(self.points - 2);
        let w = (x - S::from_usize_lossy(k)).min(S::one());
        self.values[base + k] * (S::one() - w) + self.values[base + k + 1] * w
    }
}

impl<S: Scalar> Tree<S> {
    fn build(reward: &dyn PathFunctional<S>, mesh: S, r: usize, nodes: usize, points: usize, law: &ExitLaw<S>) -> Result<Self> {
        let (u, weights) = gauss_legendre_unit::<S>(nodes);
        let offsets = u
            .iter()
            .map(|&u| Ok(mesh * mesh * law.survival_quantile(S::one() - u)?))
            .collect::<Result<Vec<S>>>()?;
        let gamma = |t: S, level: i64| reward.markov(t, &[mesh * S::from_i64_lossy(level)]).expect("Markovian reward");
        let mut tree = Self { mesh, layers: Vec::with_capacity(r + 1), offsets, weights };
        let mut last = TreeLayer::grid(r, mesh, points);
        last.values = (0..=r)
            .flat_map(|row| {
                let level = 2 * row as i64 - r as i64;
                (0..last.points).map(move |k| (k, level))
            })
            .map(|(k, level)| gamma(last.time(k), level))
            .collect();
        let mut layers = vec![last];
        for i in (0..r).rev() {
            let next = layers.last().expect("layer");
            let mut layer = TreeLayer::grid(i, mesh, points);
            let mut values = Vec::with_capacity((i + 1) * layer.points);
            for row in 0..=i {
                let level = 2 * row as i64 - i as i64;
                for k in 0..layer.points {
                    let t = layer.time(k);
                    let c = tree.continuation_from(next, row, t);
                    values.push(gamma(t, level).max(c));
                }
            }
            layer.values = values;
            layers.push(layer);
        }
        layers.reverse();
        tree.layers = layers;
        Ok(tree)
    }

    /// `E[𝕍_{i+1}]` from lattice row `row` of layer `i` at time `t`: rows `row` and
    /// `row + 1` of the next layer are levels `L − 1` and `L + 1`.
    fn continuation_from(&self, next: &TreeLayer<S>, row: usize, t: S) -> S {
        let half = S::lit(0.5);
        self.offsets
            .iter()
            .zip(&self.weights)
            .map(|(&dt, &w)| w * half * (next.at(row, t + dt) + next.at(row + 1, t + dt)))
            .sum()
    }

    fn value_at_zero(&self) -> S {
        self.layers[0].values[0]
    }
}

impl<S: Scalar> Continuation<S> for Tree<S> {
    fn at(&self, i: usize, h: &History<S>, _gamma: S) -> S {
        let level = (h.value_at_event(0, i) / self.mesh).round().to_i64().expect("level");
        let row = ((level + i as i64) / 2) as usize;
        self.continuation_from(&self.layers[i + 1], row, h.time(i))
    }
}

/// Per-layer regression coefficients of the realized cash flow.
struct Lsm<S> {
    layers: Vec<Option<(Regression<S>, Vec<S>)>>,
    continuation_at_zero: S,
    dropped: usize,
}

impl<S: Scalar> Lsm<S> {
    fn build(
        reward: &dyn PathFunctional<S>,
        config: &StoppingConfig,
        r: usize,
        paths: usize,
        degree: usize,
        law: &ExitLaw<S>,
    ) -> Result<(S, S, Self)> {
        let (_, train) = training_histories(
            config.dimension,
            S::lit(config.mesh),
            S::lit(config.horizon),
            paths,
            law,
            child_seed(config.seed, 0),
        )?;
        let gammas: Vec<Vec<S>> = train
            .iter()
            .map(|h| (0..=r).map(|i| eval_at_event(reward, h, i)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let nv = config.dimension + 1;
        let mut cash: Vec<S> = gammas.iter().map(|g| g[r]).collect();
        let mut layers = vec![None; r];
        let mut dropped = 0;
        for i in (1..r).rev() {
            let vars: Vec<S> = train.iter().flat_map(|h| state(h, i)).collect();
            let extras: Vec<S> = gammas.iter().map(|g| g[i]).collect();
            let reg = Regression::fit(&vars, nv, &extras, 1, paths, degree, i)?;
            let coef = reg.coefficients(&cash);
            for (p, g) in gammas.iter().enumerate() {
                let c = reg.predict(&coef, &vars[p * nv..(p + 1) * nv], &extras[p..p + 1]);
                if g[i] >= c {
                    cash[p] = g[i];
                }
            }
            dropped += reg.dropped;
            layers[i] = Some((reg, coef));
        }
        let summary = Summary::from_slice(&cash);
        let gamma0 = gammas[0][0];
        let v0 = gamma0.max(S::lit(summary.mean));
        let se = if gamma0 >= S::lit(summary.mean) { S::zero() } else { S::lit(summary.stderr()) };
        Ok((v0, se, Self { layers, continuation_at_zero: S::lit(summary.mean), dropped }))
    }
}

impl<S: Scalar> Continuation<S> for Lsm<S> {
    fn at(&self, i: usize, h: &History<S>, gamma: S) -> S {
        if i == 0 {
            return self.continuation_at_zero;
        }
        let (reg, coef) = self.layers[i].as_ref().expect("fitted layer");
        reg.predict(coef, &state(h, i), &[gamma])
    }
}

/// Reference value of `sup_τ E γ(τ, B(τ))` over stopping times `<= horizon` from a
/// binomial walk with steps `±√dt` at times `k·dt`.
pub fn lattice_oracle<S: Scalar>(reward: &dyn PathFunctional<S>, horizon: S, dt: S) -> Result<S> {
    if !(dt > S::zero() && horizon > S::zero()) {
        return Err(Error::Config("the lattice oracle needs a positive step and horizon".into()));
    }
    if reward.markov(S::zero(), &[S::zero()]).is_none() {
        return Err(Error::Dimension("the lattice oracle needs a Markovian reward of one coordinate".into()));
    }
    let steps = (horizon / dt).round().to_usize().unwrap_or(0).max(1);
    let dt = horizon / S::from_usize_lossy(steps);
    let dx = dt.sqrt();
    let gamma = |k: usize, level: i64| {
        reward
            .markov(dt * S::from_usize_lossy(k), &[dx * S::from_i64_lossy(level)])
            .expect("Markovian reward")
    };
    let mut v: Vec<S> = (0..=steps).map(|row| gamma(steps, 2 * row as i64 - steps as i64)).collect();
    let half = S::lit(0.5);
    for k in (0..steps).rev() {
        for row in 0..=k {
            let c = half * (v[row] + v[row + 1]);
            v[row] = gamma(k, 2 * row as i64 - k as i64).max(c);
        }
        v.truncate(k + 1);
    }
    Ok(v[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::{Constant, Coordinate, DiscountedPut, RunningMax, Shifted, SquareMinusTime};

    fn law() -> ExitLaw<f64> {
        ExitLaw::default()
    }

    fn config(method: StoppingMethod) -> StoppingConfig {
        StoppingConfig { dimension: 1, mesh: 0.2, horizon: 1.0, method, evaluation_paths: 2000, seed: 5 }
    }

    #[test]
    fn constant_reward_is_its_own_value() {
        for method in [StoppingMethod::tree(), StoppingMethod::regression(500)] {
            let sol = solve_optimal_stopping(&Constant(0.7), &config(method), &law()).unwrap();
            assert!((sol.value_at_zero - 0.7).abs() < 1e-12);
            assert!((sol.policy_value - 0.7).abs() < 1e-12);
            assert!(sol.value.values().iter().all(|v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn martingale_reward_has_no_premium() {
        let f = SquareMinusTime(0);
        let tree = solve_optimal_stopping(&f, &config(StoppingMethod::tree()), &law()).unwrap();
        assert!(tree.value_at_zero.abs() < 0.02, "{}", tree.value_at_zero);
        let lattice: f64 = lattice_oracle(&Coordinate(0), 1.0, 1e-3).unwrap();
        assert!(lattice.abs() < 1e-12);
    }

    #[test]
    fn values_are_monotone_in_the_reward() {
        let put = DiscountedPut { coordinate: 0, strike: 0.0, rate: 0.25 };
        let shifted = Shifted { inner: Arc::new(DiscountedPut { coordinate: 0, strike: 0.0, rate: 0.25 }), shift: 0.1 };
        let a = solve_optimal_stopping(&put, &config(StoppingMethod::tree()), &law()).unwrap();
        let b = solve_optimal_stopping(&shifted, &config(StoppingMethod::tree()), &law()).unwrap();
        assert!(b.value_at_zero >= a.value_at_zero + 0.1 - 1e-12);
    }

    #[test]
    fn sample_values_satisfy_the_obstacle_and_terminal_conditions() {
        let put = DiscountedPut { coordinate: 0, strike: 0.0, rate: 0.25 };
        let sol = solve_optimal_stopping(&put, &config(StoppingMethod::tree()), &law()).unwrap();
        let h = sol.value.skeleton().events();
        for i in 0..=sol.horizon_index {
            let gamma = eval_at_event(&put, h, i).unwrap();
            assert!(sol.value.value_at_event(i) >= gamma - 1e-12);
            if sol.stop[i] {
                assert!((sol.value.value_at_event(i) - gamma).abs() < 1e-12 || i == 0);
            }
        }
        assert!(sol.stop[sol.horizon_index]);
    }

    #[test]
    fn tree_regression_and_lattice_agree_on_a_discounted_put() {
        let put = DiscountedPut { coordinate: 0, strike: 0.0, rate: 0.25 };
        let mut cfg = config(StoppingMethod::tree());
        cfg.mesh = 0.1;
        let tree = solve_optimal_stopping(&put, &cfg, &law()).unwrap();
        cfg.method = StoppingMethod::regression(20_000);
        let lsm = solve_optimal_stopping(&put, &cfg, &law()).unwrap();
        let oracle = lattice_oracle(&put, 1.0, 1e-4).unwrap();
        assert!((tree.value_at_zero - oracle).abs() < 0.02, "tree {} oracle {oracle}", tree.value_at_zero);
        assert!((lsm.value_at_zero - oracle).abs() < 0.02, "lsm {} oracle {oracle}", lsm.value_at_zero);
        assert!(tree.policy_value <= tree.value_at_zero + 3.0 * tree.policy_stderr + 0.01);
    }

    #[test]
    fn tree_rejects_path_dependent_rewards() {
        let f = RunningMax(0);
        assert!(matches!(
            solve_optimal_stopping(&f, &config(StoppingMethod::tree()), &law()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bellman_consistency_at_continuation_nodes() {
        let put = DiscountedPut { coordinate: 0, strike: 0.0, rate: 0.25 };
        let law = law();
        let cfg = config(StoppingMethod::tree());
        let sol = solve_optimal_stopping(&put, &cfg, &law).unwrap();
        let tree = Tree::build(&put, 0.2, sol.horizon_index, 32, 241, &law).unwrap();
        let h = sol.value.skeleton().events();
        let mut rng = stream(99, 0);
        let mut checked = 0;
        for i in 0..sol.horizon_index {
            if sol.stop[i] {
                continue;
            }
            let level = (h.value_at_event(0, i) / 0.2).round() as i64;
            let row = ((level + i as i64) / 2) as usize;
            let next = &tree.layers[i + 1];
            let draws: Vec<f64> = (0..4000)
                .map(|_| {
                    let t = h.time(i) + 0.04 * law.sample(&mut rng).unwrap();
                    let up = crate::skeleton::Mark::fair_sign(&mut rng) > 0;
                    next.at(row + usize::from(up), t)
                })
                .collect();
            let s = Summary::from_slice(&draws);
            let v = sol.value.value_at_event(i);
            assert!((s.mean - v).abs() < 3.0 * s.stderr() + 2e-3, "{i}: {} vs {v}", s.mean);
            checked += 1;
        }
        assert!(checked > 0);
    }
}
