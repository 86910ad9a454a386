//! Energy check for a solved BSDE. With `Λ = Y − Y(0) + ∫g` and `𝕐 = ∫Λ`, a competitor
//! `X = 𝕐 + ∫φ` with adapted `φ` and `∫_0^T φ = 0` has the same terminal value, and
//! `‖X‖²_ℍ − ‖𝕐‖²_ℍ = 2∫Λφ + ∫φ²`. Orthogonality of the martingale `Λ` to such `φ` makes
//! the expected margin `E∫φ²`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bsde::BsdeSolution;
use super::training_histories;
use crate::error::{Error, Result};
use crate::exit_time::ExitLaw;
use crate::history::History;
use crate::numerics::quadrature::gauss_legendre_unit;
use crate::numerics::stats::tree_summary;
use crate::path::PathView;
use crate::rng::child_seed;
use crate::scalar::Scalar;

/// Two-sided 1% critical value of the standard normal.
pub const T_CRITICAL_1PCT: f64 = 2.5758293035489;

/// Adapted drift fields with zero integral over `[0, T]`, except `Constant`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Perturbation {
    Zero,
    /// `a sin(2πkt/T)`.
    Sine { amplitude: f64, frequency: u32 },
    /// `a cos(2πkt/T)`.
    Cosine { amplitude: f64, frequency: u32 },
    /// `a A^1(s) sin(2πk(t − s)/(T − s))` on `[s, T]`, zero before: random but adapted.
    FrozenSine { amplitude: f64, frequency: u32, start: f64 },
    /// `a`, which moves the terminal value and is rejected.
    Constant { amplitude: f64 },
}

impl Perturbation {
    /// The five competitors of the standard check.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::Sine { amplitude: 0.5, frequency: 1 },
            Self::Sine { amplitude: 0.5, frequency: 2 },
            Self::Cosine { amplitude: 0.5, frequency: 1 },
            Self::Cosine { amplitude: 0.3, frequency: 3 },
            Self::FrozenSine { amplitude: 1.0, frequency: 1, start: 0.5 },
        ]
    }

    pub fn name(&self) -> String {
        match self {
            Self::Zero => "zero".into(),
            Self::Sine { amplitude, frequency } => format!("sine[{amplitude}; {frequency}]"),
            Self::Cosine { amplitude, frequency } => format!("cosine[{amplitude}; {frequency}]"),
            Self::FrozenSine { amplitude, frequency, start } => format!("frozen_sine[{amplitude}; {frequency}; {start}]"),
            Self::Constant { amplitude } => format!("constant[{amplitude}]"),
        }
    }

    fn breakpoint(&self) -> Option<f64> {
        match self {
            Self::FrozenSine { start, .. } => Some(*start),
            _ => None,
        }
    }

    fn scale(&self) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Sine { amplitude, .. }
            | Self::Cosine { amplitude, .. }
            | Self::FrozenSine { amplitude, .. }
            | Self::Constant { amplitude } => amplitude.abs(),
        }
    }

    /// `φ(t)` given the frozen factor `A^1(s)` where one applies.
    fn value(&self, t: f64, horizon: f64, frozen: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        match *self {
            Self::Zero => 0.0,
            Self::Sine { amplitude, frequency } => amplitude * (tau * f64::from(frequency) * t / horizon).sin(),
            Self::Cosine { amplitude, frequency } => amplitude * (tau * f64::from(frequency) * t / horizon).cos(),
            Self::FrozenSine { amplitude, frequency, start } => {
                if t < start {
                    0.0
                } else {
                    amplitude * frozen * (tau * f64::from(frequency) * (t - start) / (horizon - start)).sin()
                }
            }
            Self::Constant { amplitude } => amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub paths: usize,
    pub seed: u64,
    /// Gauss–Legendre nodes per interval of constancy of `Λ`.
    pub quadrature_nodes: usize,
    /// Largest accepted `|∫_0^T φ|`, relative to the amplitude.
    pub tolerance: f64,
    /// Margins must exceed this many standard errors.
    pub sigmas: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { paths: 20_000, seed: 0, quadrature_nodes: 8, tolerance: 1e-8, sigmas: 3.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub name: String,
    pub competitor_energy: f64,
    pub margin: f64,
    pub margin_stderr: f64,
    /// `E∫φ²`, the expected margin.
    pub perturbation_energy: f64,
    /// Exact equality for the zero field, otherwise a margin above `sigmas` errors.
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyReport {
    pub paths: usize,
    pub solution_energy: f64,
    pub solution_energy_stderr: f64,
    pub perturbations: Vec<PerturbationReport>,
    /// Zero-mean t statistic of the pooled `ΔΛ` increments.
    pub lambda_t_statistic: f64,
    pub lambda_increments: usize,
    pub lambda_passed: bool,
}

impl EnergyReport {
    pub fn passed(&self) -> bool {
        self.lambda_passed && self.perturbations.iter().all(|p| p.passed)
    }
}

struct PathEnergy {
    solution: f64,
    margin: Vec<f64>,
    phi: Vec<f64>,
    integral: Vec<f64>,
    increments: Vec<f64>,
}

pub fn energy_check<S: Scalar>(
    solution: &BsdeSolution<S>,
    perturbations: &[Perturbation],
    config: &EnergyConfig,
    law: &ExitLaw<S>,
) -> Result<EnergyReport> {
    if config.paths < 2 || config.quadrature_nodes == 0 {
        return Err(Error::Config("the energy check needs at least two paths and one quadrature node".into()));
    }
    let fitted = &solution.fitted;
    let bsde = fitted.config();
    let horizon = bsde.horizon;
    for p in perturbations {
        if let Some(s) = p.breakpoint() {
            if !(0.0..horizon).contains(&s) {
                return Err(Error::Config(format!("perturbation {} starts outside [0, T)", p.name())));
            }
        }
    }
    let (_, histories) = training_histories(
        bsde.dimension,
        fitted.mesh(),
        S::lit(horizon),
        config.paths,
        law,
        child_seed(config.seed, 3),
    )?;
    let (nodes, weights) = gauss_legendre_unit::<f64>(config.quadrature_nodes);
    let per_path = histories
        .par_iter()
        .map(|h| path_energy(solution, h, perturbations, horizon, &nodes, &weights))
        .collect::<Result<Vec<_>>>()?;
    for (i, p) in perturbations.iter().enumerate() {
        let worst = per_path.iter().map(|e| e.integral[i].abs()).fold(0.0, f64::max);
        if worst > config.tolerance * (1.0 + p.scale()) {
            return Err(Error::TerminalMismatch { index: i, value: worst });
        }
    }
    let solution_energy = tree_summary(&per_path.iter().map(|e| e.solution).collect::<Vec<_>>());
    let reports = perturbations
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let margin = tree_summary(&per_path.iter().map(|e| e.margin[i]).collect::<Vec<_>>());
            let phi = tree_summary(&per_path.iter().map(|e| e.phi[i]).collect::<Vec<_>>());
            let passed = if *p == Perturbation::Zero {
                margin.mean == 0.0 && margin.variance() == 0.0
            } else {
                margin.mean > config.sigmas * margin.stderr()
            };
            PerturbationReport {
                name: p.name(),
                competitor_energy: solution_energy.mean + margin.mean,
                margin: margin.mean,
                margin_stderr: margin.stderr(),
                perturbation_energy: phi.mean,
                passed,
            }
        })
        .collect();
    let increments: Vec<f64> = per_path.iter().flat_map(|e| e.increments.iter().copied()).collect();
    let pooled = tree_summary(&increments);
    let t = if pooled.stderr() > 0.0 { pooled.mean / pooled.stderr() } else { 0.0 };
    Ok(EnergyReport {
        paths: config.paths,
        solution_energy: solution_energy.mean,
        solution_energy_stderr: solution_energy.stderr(),
        perturbations: reports,
        lambda_t_statistic: t,
        lambda_increments: increments.len(),
        lambda_passed: t.abs() < T_CRITICAL_1PCT,
    })
}

/// `∫_0^T Λ²`, and per perturbation `2∫Λφ + ∫φ²`, `∫φ²` and `∫φ` along one history.
/// `Λ` is constant between events and frozen at `Λ_r` after `T_r`.
fn path_energy<S: Scalar>(
    solution: &BsdeSolution<S>,
    h: &History<S>,
    perturbations: &[Perturbation],
    horizon: f64,
    nodes: &[f64],
    weights: &[f64],
) -> Result<PathEnergy> {
    let (traj, _) = solution.evaluate(h)?;
    let lambda: Vec<f64> = traj.lambda(h).iter().map(|x| x.as_f64()).collect();
    let r = lambda.len() - 1;
    let frozen: Vec<f64> = perturbations
        .iter()
        .map(|p| p.breakpoint().map_or(0.0, |s| h.value(0, S::lit(s)).as_f64()))
        .collect();
    let mut cuts: Vec<f64> = (1..=r).map(|n| h.time(n).as_f64()).filter(|&t| t < horizon).collect();
    cuts.extend(perturbations.iter().filter_map(|p| p.breakpoint()));
    cuts.push(0.0);
    cuts.push(horizon);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let k = perturbations.len();
    let mut out = PathEnergy {
        solution: 0.0,
        margin: vec![0.0; k],
        phi: vec![0.0; k],
        integral: vec![0.0; k],
        increments: lambda.windows(2).map(|w| w[1] - w[0]).collect(),
    };
    let mut n = 0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        while n < r && h.time(n + 1).as_f64() <= a {
            n += 1;
        }
        let level = lambda[n];
        out.solution += level * level * (b - a);
        for (i, p) in perturbations.iter().enumerate() {
            let (mut first, mut second) = (0.0, 0.0);
            for (&u, &wt) in nodes.iter().zip(weights) {
                let phi = p.value(a + (b - a) * u, horizon, frozen[i]);
                first += wt * phi;
                second += wt * phi * phi;
            }
            first *= b - a;
            second *= b - a;
            out.integral[i] += first;
            out.phi[i] += second;
            out.margin[i] += 2.0 * level * first + second;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::Square;
    use crate::solvers::bsde::{solve_bsde, BsdeConfig, LinearDriver};
    use std::sync::Arc;

    fn solved() -> BsdeSolution<f64> {
        let config = BsdeConfig { mesh: 0.1, paths: 4000, validation_paths: 2000, seed: 3, ..BsdeConfig::default() };
        solve_bsde(Arc::new(LinearDriver::linear(0.5)), Arc::new(Square(0)), &config, &ExitLaw::default()).unwrap()
    }

    #[test]
    fn zero_perturbation_has_equal_energy() {
        let sol = solved();
        let cfg = EnergyConfig { paths: 500, ..EnergyConfig::default() };
        let report = energy_check(&sol, &[Perturbation::Zero], &cfg, &ExitLaw::default()).unwrap();
        assert_eq!(report.perturbations[0].competitor_energy, report.solution_energy);
        assert!(report.perturbations[0].passed);
    }

    #[test]
    fn zero_integral_perturbations_cost_energy() {
        let sol = solved();
        let cfg = EnergyConfig { paths: 6000, ..EnergyConfig::default() };
        let report = energy_check(&sol, &Perturbation::standard(), &cfg, &ExitLaw::default()).unwrap();
        for p in &report.perturbations {
            assert!(p.passed, "{p:?}");
            assert!((p.margin - p.perturbation_energy).abs() < 4.0 * p.margin_stderr + 1e-3, "{p:?}");
        }
        assert!(report.lambda_passed, "{}", report.lambda_t_statistic);
    }

    #[test]
    fn deterministic_perturbation_energy_matches_quadrature() {
        let sol = solved();
        let cfg = EnergyConfig { paths: 50, ..EnergyConfig::default() };
        let p = Perturbation::Sine { amplitude: 0.5, frequency: 2 };
        let report = energy_check(&sol, &[p], &cfg, &ExitLaw::default()).unwrap();
        assert!((report.perturbations[0].perturbation_energy - 0.125).abs() < 1e-10);
    }

    #[test]
    fn terminal_moving_perturbations_are_rejected() {
        let sol = solved();
        let cfg = EnergyConfig { paths: 50, ..EnergyConfig::default() };
        let err = energy_check(&sol, &[Perturbation::Zero, Perturbation::Constant { amplitude: 0.1 }], &cfg, &ExitLaw::default());
        assert!(matches!(err, Err(Error::TerminalMismatch { index: 1, .. })));
    }
}
