//! Experiment configs: one TOML table per subcommand, every key optional.

use serde::{Deserialize, Serialize};
use weakcalc::functional::{FunctionalParams, PathFunctional, Registry};
use weakcalc::limits::ConvergenceStudy;
use weakcalc::solvers::bsde::{BsdeConfig, Driver, LinearDriver};
use weakcalc::solvers::energy::{EnergyConfig, Perturbation};
use weakcalc::solvers::stopping::StoppingConfig;
use weakcalc::{Error, Result};

use std::sync::Arc;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub exit_law: ExitLawSection,
    pub sample_skeleton: SkeletonSection,
    pub estimate_derivative: DerivativeSection,
    pub estimate_generator: GeneratorSection,
    pub convergence_report: ConvergenceSection,
    pub solve_stopping: StoppingSection,
    pub solve_bsde: BsdeSection,
    pub energy_check: EnergySection,
}

/// A registry functional by name with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionalSpec {
    pub name: String,
    pub coordinate: usize,
    pub value: f64,
    pub strike: f64,
    pub rate: f64,
}

impl Default for FunctionalSpec {
    fn default() -> Self {
        Self::named("square_minus_time")
    }
}

impl FunctionalSpec {
    pub fn named(name: &str) -> Self {
        let p = FunctionalParams::default();
        Self { name: name.into(), coordinate: p.coordinate, value: p.value, strike: p.strike, rate: p.rate }
    }

    pub fn build(&self) -> Result<Arc<dyn PathFunctional<f64>>> {
        let params = FunctionalParams { coordinate: self.coordinate, value: self.value, strike: self.strike, rate: self.rate };
        Registry::with_builtins().build(&self.name, &params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonMode {
    #[default]
    Intrinsic,
    /// Extracted from a Brownian path sampled with step `ε²/grid_ratio`.
    Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExitLawSection {
    pub draws: usize,
    pub ks_draws: usize,
    pub ks_alpha: f64,
    pub seed: u64,
    /// CDF table on `(0, table_end]`.
    pub table_points: usize,
    pub table_end: f64,
    /// Oracle gaps: `|mean − 1|` and `|E τ² − 5/3|` in standard errors, and the KS test.
    pub max_mean_z: Option<f64>,
    pub max_second_moment_z: Option<f64>,
    pub require_ks: bool,
}

impl Default for ExitLawSection {
    fn default() -> Self {
        Self {
            draws: 1_000_000,
            ks_draws: 100_000,
            ks_alpha: 0.01,
            seed: 0,
            table_points: 200,
            table_end: 4.0,
            max_mean_z: None,
            max_second_moment_z: None,
            require_ks: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkeletonSection {
    pub dimension: usize,
    pub mesh: f64,
    pub horizon: f64,
    pub seed: u64,
    pub mode: SkeletonMode,
    pub grid_ratio: f64,
    pub format: SkeletonFormat,
}

impl Default for SkeletonSection {
    fn default() -> Self {
        Self {
            dimension: 1,
            mesh: 0.1,
            horizon: 1.0,
            seed: 0,
            mode: SkeletonMode::Intrinsic,
            grid_ratio: weakcalc::skeleton::MIN_GRID_RATIO,
            format: SkeletonFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerivativeSection {
    pub functional: FunctionalSpec,
    pub skeleton: SkeletonSection,
    /// `H_1, ..., H_d` to compare `𝔻^j` against.
    pub reference: Vec<FunctionalSpec>,
    pub max_l2_error: Option<f64>,
}

impl Default for DerivativeSection {
    fn default() -> Self {
        Self {
            functional: FunctionalSpec::default(),
            skeleton: SkeletonSection { mode: SkeletonMode::Path, ..SkeletonSection::default() },
            reference: vec![FunctionalSpec { value: 2.0, ..FunctionalSpec::named("scaled_coordinate") }],
            max_l2_error: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingChoice {
    #[default]
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningChoice {
    #[default]
    Kernel,
    HazardRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub functional: FunctionalSpec,
    pub skeleton: SkeletonSection,
    pub sampling: SamplingChoice,
    /// Marks per event under Monte Carlo sampling.
    pub budget: usize,
    pub conditioning: ConditioningChoice,
    pub bandwidth: f64,
    pub kernel_budget: usize,
    /// Oracle gap: pooled `U` against this mean, in standard errors.
    pub expected_pooled_mean: Option<f64>,
    pub max_pooled_z: Option<f64>,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            functional: FunctionalSpec::default(),
            skeleton: SkeletonSection::default(),
            sampling: SamplingChoice::Exact,
            budget: 1000,
            conditioning: ConditioningChoice::Kernel,
            bandwidth: 0.1,
            kernel_budget: 4000,
            expected_pooled_mean: None,
            max_pooled_z: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSection {
    pub study: ConvergenceStudy,
    pub functional: FunctionalSpec,
    pub derivative: Vec<FunctionalSpec>,
    pub drift: Option<FunctionalSpec>,
    /// Oracle gaps on the derivative error column.
    pub max_final_ratio: Option<f64>,
    pub max_violations: Option<usize>,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        Self {
            study: ConvergenceStudy::default(),
            functional: FunctionalSpec::default(),
            derivative: DerivativeSection::default().reference,
            drift: None,
            max_final_ratio: None,
            max_violations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingSection {
    pub reward: FunctionalSpec,
    pub solver: StoppingConfig,
    /// Step of the lattice oracle; none skips it.
    pub oracle_step: Option<f64>,
    pub max_relative_gap: Option<f64>,
}

impl Default for StoppingSection {
    fn default() -> Self {
        Self { reward: FunctionalSpec { strike: 1.0, ..FunctionalSpec::named("put") }, solver: StoppingConfig::default(), oracle_step: None, max_relative_gap: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverKind {
    Zero,
    Constant,
    #[default]
    Linear,
}

/// `g = constant + y·Y + Σ z_j Z^j`; `kind` fixes which terms are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverSpec {
    pub kind: DriverKind,
    pub constant: f64,
    pub y: f64,
    pub z: Vec<f64>,
}

impl Default for DriverSpec {
    fn default() -> Self {
        Self { kind: DriverKind::Linear, constant: 0.0, y: 0.5, z: Vec::new() }
    }
}

impl DriverSpec {
    pub fn build(&self) -> Arc<dyn Driver<f64>> {
        match self.kind {
            DriverKind::Zero => Arc::new(LinearDriver::zero()),
            DriverKind::Constant => Arc::new(LinearDriver::constant(self.constant)),
            DriverKind::Linear => Arc::new(LinearDriver { constant: self.constant, y: self.y, z: self.z.clone() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsdeSection {
    pub scheme: BsdeConfig,
    pub driver: DriverSpec,
    pub terminal: FunctionalSpec,
    /// Reference `Y(0)`; with `max_relative_gap` an oracle check.
    pub oracle: Option<f64>,
    pub max_relative_gap: Option<f64>,
}

impl Default for BsdeSection {
    fn default() -> Self {
        Self {
            scheme: BsdeConfig::default(),
            driver: DriverSpec::default(),
            terminal: FunctionalSpec::named("square"),
            oracle: None,
            max_relative_gap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergySection {
    pub bsde: BsdeSection,
    pub energy: EnergyConfig,
    pub perturbations: Vec<Perturbation>,
    /// Oracle gap: every margin and the `Λ` t-test must pass.
    pub require_pass: bool,
}

impl Default for EnergySection {
    fn default() -> Self {
        Self { bsde: BsdeSection::default(), energy: EnergyConfig::default(), perturbations: Perturbation::standard(), require_pass: false }
    }
}

pub fn parse(text: &str) -> std::result::Result<ConfigFile, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

pub fn require(ok: bool, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(message.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.exit_law, ExitLawSection::default());
        assert_eq!(c.solve_bsde, BsdeSection::default());
        assert_eq!(c.energy_check.perturbations.len(), 5);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = toml::to_string(&ConfigFile::default()).unwrap();
        let back = parse(&text).unwrap();
        assert_eq!(back.estimate_generator, GeneratorSection::default());
        assert_eq!(back.solve_stopping, StoppingSection::default());
        assert_eq!(back.convergence_report, ConvergenceSection::default());
    }

    #[test]
    fn nested_tables_and_enums() {
        let c = parse(
            "[solve_stopping.solver]\nmethod = { kind = \"regression_mc\", paths = 500, degree = 2 }\n\
             [estimate_generator]\nconditioning = \"hazard_ratio\"\n\
             [[energy_check.perturbations]]\nkind = \"constant\"\namplitude = 0.2\n",
        )
        .unwrap();
        assert_eq!(c.estimate_generator.conditioning, ConditioningChoice::HazardRatio);
        assert_eq!(c.energy_check.perturbations.len(), 1);
        assert!(format!("{:?}", c.solve_stopping.solver.method).contains("500"));
    }

    #[test]
    fn unknown_keys_and_names_are_rejected() {
        let e = parse("[sample_skeleton]\nmesh = 0.1\nmsh = 2\n").unwrap_err();
        assert!(e.contains("msh") && e.contains("line 3"), "{e}");
        assert!(parse("[nope]\n").is_err());
        assert!(FunctionalSpec::named("missing").build().is_err());
        assert!(FunctionalSpec { coordinate: 0, ..FunctionalSpec::named("square") }.build().is_err());
    }

    #[test]
    fn drivers_by_kind() {
        let spec = DriverSpec { kind: DriverKind::Constant, constant: 2.0, ..DriverSpec::default() };
        assert_eq!(spec.build().eval(0.3, 5.0, &[]), 2.0);
        let spec = DriverSpec { z: vec![1.0], ..DriverSpec::default() };
        assert_eq!(spec.build().eval(0.0, 2.0, &[3.0]), 4.0);
        assert_eq!(DriverSpec { kind: DriverKind::Zero, ..DriverSpec::default() }.build().eval(0.0, 2.0, &[3.0]), 0.0);
    }
}
