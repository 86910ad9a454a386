use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};
use weakcalc::disintegration::MarkConditioning;
use weakcalc::exit_time::ExitLaw;
use weakcalc::functional::eval_at_event;
use weakcalc::limits::{
    derivative_l2_error, final_ratio, monotonicity_violations, run_convergence_study, StudyTargets,
};
use weakcalc::numerics::stats::{ks_critical, ks_statistic, tree_summary, Summary};
use weakcalc::operators::{decompose, derivative_at_events, generator_field, GeneratorConfig, Sampling};
use weakcalc::path::{PathView, SampledPath};
use weakcalc::rng::{child_seed, replicate, stream};
use weakcalc::skeleton::{Skeleton, SkeletonConfig};
use weakcalc::solvers::bsde::{solve_bsde, BsdeSolution};
use weakcalc::solvers::energy::energy_check;
use weakcalc::solvers::stopping::{lattice_oracle, solve_optimal_stopping};
use weakcalc::structures::build_functional_structure;
use weakcalc::{Error, Result};

use crate::config::{
    require, BsdeSection, ConditioningChoice, ConvergenceSection, DerivativeSection, EnergySection, ExitLawSection,
    GeneratorSection, SamplingChoice, SkeletonFormat, SkeletonMode, SkeletonSection, StoppingSection,
};

/// Draws per replication stream of the exit-law sampler.
const EXIT_LAW_CHUNK: usize = 10_000;

/// Files written and oracle gaps found by one run.
pub struct Outcome {
    pub artifacts: Vec<String>,
    pub gaps: Vec<String>,
}

pub struct Sink {
    dir: PathBuf,
    outcome: Outcome,
}

impl Sink {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf(), outcome: Outcome { artifacts: Vec::new(), gaps: Vec::new() } }
    }

    fn file(&mut self, name: &str, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        write(&mut w)?;
        w.flush()?;
        self.outcome.artifacts.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
        self.file(name, |w| Ok(writeln!(w, "{text}")?))
    }

    fn gap(&mut self, ok: bool, message: String) {
        if !ok {
            self.outcome.gaps.push(message);
        }
    }

    pub fn finish(self) -> Outcome {
        self.outcome
    }
}

fn law() -> ExitLaw<f64> {
    ExitLaw::default()
}

fn summary_json(s: &Summary) -> Value {
    json!({ "count": s.count, "mean": s.mean, "stderr": s.stderr() })
}

pub fn exit_law(s: &ExitLawSection, sink: &mut Sink) -> Result<()> {
    require(s.draws >= 2 && s.ks_draws >= 2, "exit_law needs at least two draws and two KS draws")?;
    require(s.table_points >= 1 && s.table_end > 0.0, "exit_law table needs points and a positive end")?;
    let law = law();
    let draw = |seed: u64, total: usize| -> Result<Vec<f64>> {
        let chunks = total.div_ceil(EXIT_LAW_CHUNK);
        let parts = replicate(seed, chunks, |i, rng| {
            let n = EXIT_LAW_CHUNK.min(total - i * EXIT_LAW_CHUNK);
            (0..n).map(|_| law.sample(rng)).collect::<Result<Vec<f64>>>()
        });
        Ok(parts.into_iter().collect::<Result<Vec<_>>>()?.concat())
    };
    let samples = draw(s.seed, s.draws)?;
    let first = tree_summary(&samples);
    let second = tree_summary(&samples.iter().map(|t| t * t).collect::<Vec<_>>());
    let ks_samples = draw(child_seed(s.seed, 1), s.ks_draws)?;
    let ks = ks_statistic(&ks_samples, |t| law.cdf(t));
    let critical = ks_critical(s.ks_alpha, s.ks_draws);
    let mean_z = (first.mean - 1.0) / first.stderr();
    let second_z = (second.mean - 5.0 / 3.0) / second.stderr();
    sink.file("exit_law_cdf.csv", |w| {
        writeln!(w, "t,cdf,survival,density,hazard")?;
        for i in 1..=s.table_points {
            let t = s.table_end * i as f64 / s.table_points as f64;
            writeln!(w, "{},{},{},{},{}", t, law.cdf(t), law.survival(t), law.density(t), law.hazard(t))?;
        }
        Ok(())
    })?;
    sink.json(
        "exit_law.json",
        &json!({
            "draws": s.draws,
            "mean": first.mean,
            "mean_stderr": first.stderr(),
            "mean_z": mean_z,
            "second_moment": second.mean,
            "second_moment_stderr": second.stderr(),
            "second_moment_z": second_z,
            "variance": first.variance(),
            "tail_rate": ExitLaw::<f64>::tail_rate(),
            "ks": { "draws": s.ks_draws, "statistic": ks, "critical": critical, "alpha": s.ks_alpha, "passed": ks <= critical },
        }),
    )?;
    if let Some(max) = s.max_mean_z {
        sink.gap(mean_z.abs() <= max, format!("exit-law mean is {mean_z:.3} standard errors from 1"));
    }
    if let Some(max) = s.max_second_moment_z {
        sink.gap(second_z.abs() <= max, format!("exit-law second moment is {second_z:.3} standard errors from 5/3"));
    }
    if s.require_ks {
        sink.gap(ks <= critical, format!("KS statistic {ks:.5} exceeds {critical:.5}"));
    }
    Ok(())
}

fn skeleton(s: &SkeletonSection) -> Result<Arc<Skeleton<f64>>> {
    require(s.dimension >= 1 && s.mesh > 0.0 && s.horizon > 0.0, "skeleton needs dimension >= 1, mesh > 0 and horizon > 0")?;
    let mut rng = stream(s.seed, 0);
    let skeleton = match s.mode {
        SkeletonMode::Intrinsic => {
            let config = SkeletonConfig::intrinsic(s.dimension, s.mesh, s.horizon).through_horizon_index();
            Skeleton::generate_intrinsic(config, &law(), &mut rng)?
        }
        SkeletonMode::Path => {
            let step = s.mesh * s.mesh / s.grid_ratio;
            let path = Arc::new(SampledPath::brownian(s.dimension, step, s.horizon, &mut rng));
            let horizon = s.horizon.min(path.end());
            Skeleton::extract_with_horizon(path, s.mesh, horizon)?
        }
    };
    Ok(Arc::new(skeleton))
}

pub fn sample_skeleton(s: &SkeletonSection, sink: &mut Sink) -> Result<()> {
    let sk = skeleton(s)?;
    match s.format {
        SkeletonFormat::Csv => sink.file("skeleton.csv", |w| sk.write_csv(w))?,
        SkeletonFormat::Binary => sink.file("skeleton.bin", |w| sk.write_binary(w))?,
    }
    let qv = (0..s.dimension).map(|j| sk.quadratic_variation(j, sk.horizon())).collect::<Result<Vec<_>>>()?;
    sink.json(
        "skeleton.json",
        &json!({
            "events": sk.events().len(),
            "events_in_horizon": sk.events_in_horizon(),
            "max_increment": sk.max_increment(),
            "quadratic_variation": qv,
        }),
    )
}

/// `H_j` on a uniform grid of `[0, T]`, read off the driving path when there is one.
fn reference_grid(spec: &crate::config::FunctionalSpec, sk: &Skeleton<f64>, step: f64) -> Result<Vec<f64>> {
    let h = spec.build()?;
    let n = (sk.horizon() / step).ceil() as usize + 1;
    let view: &dyn PathView<f64> = match sk.driving_path() {
        Some(p) => p.as_ref(),
        None => sk.events(),
    };
    (0..n).map(|i| h.eval((i as f64 * step).min(sk.horizon()), view)).collect()
}

pub fn estimate_derivative(s: &DerivativeSection, sink: &mut Sink) -> Result<()> {
    let f = s.functional.build()?;
    let sk = skeleton(&s.skeleton)?;
    let x = build_functional_structure(f.as_ref(), &sk)?;
    let field = derivative_at_events(&x);
    sink.file("derivative.csv", |w| field.write_csv(w))?;
    let step = s.skeleton.mesh * s.skeleton.mesh / s.skeleton.grid_ratio;
    let errors = if s.reference.is_empty() {
        None
    } else {
        require(s.reference.len() == s.skeleton.dimension, "one derivative reference per coordinate")?;
        Some(
            s.reference
                .iter()
                .enumerate()
                .map(|(j, spec)| Ok(derivative_l2_error(&field, j, &reference_grid(spec, &sk, step)?, step, sk.horizon())))
                .collect::<Result<Vec<f64>>>()?,
        )
    };
    let total = errors.as_ref().map(|e| e.iter().sum::<f64>());
    sink.json(
        "derivative.json",
        &json!({
            "functional": f.name(),
            "events": field.len(),
            "events_in_horizon": sk.events_in_horizon(),
            "l2_error": errors,
            "l2_error_total": total,
        }),
    )?;
    if let (Some(max), Some(total)) = (s.max_l2_error, total) {
        sink.gap(total <= max, format!("derivative L2 error {total:.5} exceeds {max}"));
    }
    Ok(())
}

pub fn estimate_generator(s: &GeneratorSection, sink: &mut Sink) -> Result<()> {
    let f = s.functional.build()?;
    let sk = skeleton(&s.skeleton)?;
    let x = build_functional_structure(f.as_ref(), &sk)?;
    let config = GeneratorConfig {
        sampling: match s.sampling {
            SamplingChoice::Exact => Sampling::Exact,
            SamplingChoice::MonteCarlo => Sampling::MonteCarlo { budget: s.budget },
        },
        conditioning: match s.conditioning {
            ConditioningChoice::Kernel => MarkConditioning::Kernel { bandwidth: s.bandwidth },
            ConditioningChoice::HazardRatio => MarkConditioning::HazardRatio,
        },
        kernel_budget: s.kernel_budget,
        tolerance: None,
    };
    let field = generator_field(f.as_ref(), &x, &config, &law(), child_seed(s.skeleton.seed, 1))?;
    let dec = decompose(&x, &field)?;
    sink.file("generator.csv", |w| field.write_csv(w))?;
    sink.file("decomposition.csv", |w| {
        writeln!(w, "n,time,X,N,N_stderr,M")?;
        for n in 0..=x.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                n,
                sk.events().time(n),
                x.value_at_event(n),
                dec.compensator.value_at_event(n),
                dec.compensator_stderr[n],
                dec.martingale.value_at_event(n)
            )?;
        }
        Ok(())
    })?;
    // Path-driven skeletons stop at the horizon and may fall short of the index.
    let r = sk.config().horizon_index().min(x.len());
    let u: Vec<f64> = (1..=r).filter_map(|n| field.generator(n).map(|g| g.0)).collect();
    let pooled = tree_summary(&u);
    sink.json(
        "generator.json",
        &json!({
            "functional": f.name(),
            "horizon_index": r,
            "pooled_generator": summary_json(&pooled),
            "compensator_at_horizon_index": dec.compensator.value_at_event(r),
            "compensator_stderr_at_horizon_index": dec.compensator_stderr[r],
        }),
    )?;
    if let (Some(mean), Some(max)) = (s.expected_pooled_mean, s.max_pooled_z) {
        let z = (pooled.mean - mean) / pooled.stderr();
        sink.gap(z.abs() <= max, format!("pooled generator is {z:.3} standard errors from {mean}"));
    }
    Ok(())
}

pub fn convergence_report(s: &ConvergenceSection, sink: &mut Sink) -> Result<()> {
    let f = s.functional.build()?;
    let derivative = s.derivative.iter().map(|d| d.build()).collect::<Result<Vec<_>>>()?;
    let drift = s.drift.as_ref().map(|d| d.build()).transpose()?;
    let targets = StudyTargets { functional: f.as_ref(), derivative, drift };
    let report = run_convergence_study(&s.study, &targets, &law())?;
    sink.file("convergence.csv", |w| report.write_csv(w))?;
    let errors = report.derivative_errors();
    let violations = monotonicity_violations(&errors);
    let ratio = final_ratio(&errors);
    sink.json("convergence.json", &json!({ "report": report, "violations": violations, "final_ratio": ratio }))?;
    if let Some(max) = s.max_violations {
        sink.gap(violations <= max, format!("{violations} monotonicity violations, at most {max} allowed"));
    }
    if let Some(max) = s.max_final_ratio {
        sink.gap(ratio <= max, format!("final/initial error ratio {ratio:.4} exceeds {max}"));
    }
    Ok(())
}

pub fn solve_stopping(s: &StoppingSection, sink: &mut Sink) -> Result<()> {
    let reward = s.reward.build()?;
    let sol = solve_optimal_stopping(reward.as_ref(), &s.solver, &law())?;
    let oracle = s.oracle_step.map(|dt| lattice_oracle(reward.as_ref(), s.solver.horizon, dt)).transpose()?;
    let h = sol.value.skeleton().events();
    let d = h.dimension();
    sink.file("stopping_path.csv", |w| {
        let coords: Vec<String> = (1..=d).map(|j| format!("A{j}")).collect();
        writeln!(w, "n,time,{},value,reward,stop", coords.join(","))?;
        for n in 0..=sol.horizon_index {
            let a: Vec<String> = (0..d).map(|j| h.value_at_event(j, n).to_string()).collect();
            let gamma = eval_at_event(reward.as_ref(), h, n)?;
            writeln!(w, "{},{},{},{},{},{}", n, h.time(n), a.join(","), sol.value.value_at_event(n), gamma, u8::from(sol.stop[n]))?;
        }
        Ok(())
    })?;
    let gap = oracle.map(|o| relative_gap(sol.value_at_zero, o));
    sink.json(
        "stopping.json",
        &json!({
            "reward": reward.name(),
            "horizon_index": sol.horizon_index,
            "value_at_zero": sol.value_at_zero,
            "stderr": sol.stderr,
            "policy_value": sol.policy_value,
            "policy_stderr": sol.policy_stderr,
            "dropped_columns": sol.dropped_columns,
            "oracle": oracle,
            "oracle_step": s.oracle_step,
            "relative_gap": gap,
        }),
    )?;
    if let (Some(max), Some(gap)) = (s.max_relative_gap, gap) {
        sink.gap(gap <= max, format!("stopping value gap {gap:.4} exceeds {max}"));
    }
    Ok(())
}

fn relative_gap(value: f64, oracle: f64) -> f64 {
    if oracle == 0.0 {
        value.abs()
    } else {
        ((value - oracle) / oracle).abs()
    }
}

fn bsde_json(s: &BsdeSection, sol: &BsdeSolution<f64>) -> Value {
    let gap = s.oracle.map(|o| relative_gap(sol.y0, o));
    json!({
        "driver": sol.fitted.driver().name(),
        "terminal": sol.fitted.terminal().name(),
        "horizon_index": sol.horizon_index(),
        "y0": sol.y0,
        "y0_stderr": sol.y0_stderr,
        "z0": sol.z0,
        "y0_forward": sol.y0_forward,
        "y0_forward_stderr": sol.y0_forward_stderr,
        "residual": summary_json(&sol.residual),
        "lambda_t_statistic": sol.lambda_t_statistic,
        "max_iterations_used": sol.max_iterations_used,
        "dropped_columns": sol.dropped_columns,
        "oracle": s.oracle,
        "relative_gap": gap,
    })
}

fn solve(s: &BsdeSection) -> Result<BsdeSolution<f64>> {
    solve_bsde(s.driver.build(), s.terminal.build()?, &s.scheme, &law())
}

fn bsde_gap(s: &BsdeSection, sol: &BsdeSolution<f64>, sink: &mut Sink) {
    if let (Some(max), Some(oracle)) = (s.max_relative_gap, s.oracle) {
        let gap = relative_gap(sol.y0, oracle);
        sink.gap(gap <= max, format!("Y(0) gap {gap:.4} exceeds {max}"));
    }
}

pub fn solve_bsde_command(s: &BsdeSection, sink: &mut Sink) -> Result<()> {
    let sol = solve(s)?;
    let h = sol.y.skeleton().events();
    let (d, r) = (h.dimension(), sol.horizon_index());
    sink.file("bsde_path.csv", |w| {
        let coords: Vec<String> = (1..=d).map(|j| format!("A{j}")).collect();
        let zs: Vec<String> = (1..=d).map(|j| format!("Z{j}")).collect();
        writeln!(w, "n,time,{},Y,D,{},residual", coords.join(","), zs.join(","))?;
        for n in 0..=r {
            let a: Vec<String> = (0..d).map(|j| h.value_at_event(j, n).to_string()).collect();
            let jump = if n == 0 { String::new() } else { sol.z.derivative(n).to_string() };
            let z: Vec<String> = (0..d).map(|j| sol.z_regressed.get(n).map(|z| z[j].to_string()).unwrap_or_default()).collect();
            let residual = if n == 0 { String::new() } else { sol.residuals[n - 1].to_string() };
            writeln!(w, "{},{},{},{},{},{},{}", n, h.time(n), a.join(","), sol.y.value_at_event(n), jump, z.join(","), residual)?;
        }
        Ok(())
    })?;
    sink.json("bsde.json", &bsde_json(s, &sol))?;
    bsde_gap(s, &sol, sink);
    Ok(())
}

pub fn energy_check_command(s: &EnergySection, sink: &mut Sink) -> Result<()> {
    let sol = solve(&s.bsde)?;
    let report = energy_check(&sol, &s.perturbations, &s.energy, &law())?;
    sink.json("energy.json", &json!({ "bsde": bsde_json(&s.bsde, &sol), "energy": report, "passed": report.passed() }))?;
    if s.require_pass {
        for p in report.perturbations.iter().filter(|p| !p.passed) {
            sink.gap(false, format!("perturbation {} margin {:.5} ± {:.5}", p.name, p.margin, p.margin_stderr));
        }
        sink.gap(report.lambda_passed, format!("Λ increment t statistic {:.3}", report.lambda_t_statistic));
    }
    Ok(())
}
