//! Imbedded discrete structures: pure-jump processes `X^k` that jump only at the merged
//! events of a skeleton.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::functional::{eval_at_event, PathFunctional};
use crate::numerics::stats::Summary;
use crate::path::{Polyline, SampledPath};
use crate::scalar::Scalar;
use crate::skeleton::{Mark, Skeleton};

/// Rejection sampling accepts a simulated inter-arrival within this many `ε²` of the
/// observed one.
pub const REJECTION_BAND: f64 = 0.1;
/// Proposal paths are simulated with step `ε²/REJECTION_GRID`.
pub const REJECTION_GRID: f64 = 400.0;
pub const MIN_ACCEPTANCES: usize = 30;
/// Longest history the rejection estimator is asked to match.
pub const MAX_REJECTION_EVENTS: usize = 12;

/// A càdlàg process constant on `[T_n, T_{n+1})`, given by its values at `T_0 = 0` and
/// at every merged event of its skeleton.
#[derive(Debug, Clone)]
pub struct StepProcess<S> {
    skeleton: Arc<Skeleton<S>>,
    values: Vec<S>,
}

impl<S: Scalar> StepProcess<S> {
    /// `values[n] = X(T_n)` for `n = 0..=events`.
    pub fn new(skeleton: Arc<Skeleton<S>>, values: Vec<S>) -> Result<Self> {
        if values.len() != skeleton.events().len() + 1 {
            return Err(Error::DegenerateInput(format!(
                "{} values for {} events",
                values.len(),
                skeleton.events().len()
            )));
        }
        Ok(Self { skeleton, values })
    }

    pub fn skeleton(&self) -> &Arc<Skeleton<S>> {
        &self.skeleton
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn initial(&self) -> S {
        self.values[0]
    }

    /// Number of events.
    pub fn len(&self) -> usize {
        self.values.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value_at_event(&self, n: usize) -> S {
        self.values[n]
    }

    /// `X(t)`, the value at the last event at or before `t`.
    pub fn value_at(&self, t: S) -> S {
        self.values[self.skeleton.count_to(t)]
    }

    /// `ΔX(T_n)`.
    pub fn increment(&self, n: usize) -> S {
        self.values[n] - self.values[n - 1]
    }

    /// Rows `n,time,value` for `n = 0..=events`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "n,time,value")?;
        for (n, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{},{}", n, self.skeleton.events().time(n), v)?;
        }
        Ok(())
    }
}

/// `𝐅^k(T_n) = F(T_n, A^k)`, evaluated on the skeleton's own step path.
pub fn build_functional_structure<S: Scalar>(f: &dyn PathFunctional<S>, s: &Arc<Skeleton<S>>) -> Result<StepProcess<S>> {
    let h = s.events();
    let values = (0..=h.len()).map(|n| eval_at_event(f, h, n)).collect::<Result<Vec<_>>>()?;
    StepProcess::new(s.clone(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanonicalEstimator {
    /// `X(T_n)` on the driving path.
    Plugin,
    /// `E[X(T_n) | F^k_{T_n}]` over simulated paths whose skeleton reproduces the observed
    /// history; `budget` bounds the simulated segments per event.
    RejectionMc { budget: usize },
}

#[derive(Debug, Clone)]
pub struct CanonicalStructure<S> {
    pub process: StepProcess<S>,
    /// Monte Carlo standard error per event (zero where the value is exact).
    pub stderr: Vec<S>,
    /// Accepted proposal paths per event.
    pub accepted: Vec<usize>,
}

/// `δ^k X(T_n) ≈ E[X(T_n) | F^k_{T_n}]` for `X = F(B)`.
pub fn build_canonical_structure<S: Scalar, R: Rng + ?Sized>(
    x: &dyn PathFunctional<S>,
    s: &Arc<Skeleton<S>>,
    estimator: CanonicalEstimator,
    rng: &mut R,
) -> Result<CanonicalStructure<S>> {
    let n_events = s.events().len();
    match estimator {
        CanonicalEstimator::Plugin => {
            let path = s
                .driving_path()
                .ok_or_else(|| Error::ModeMismatch("plug-in estimation needs a path-driven skeleton".into()))?;
            let values = (0..=n_events)
                .map(|n| {
                    x.eval(s.events().time(n), path.as_ref())
                        .map_err(|e| Error::Evaluation { event: n, message: e.to_string() })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CanonicalStructure {
                process: StepProcess::new(s.clone(), values)?,
                stderr: vec![S::zero(); n_events + 1],
                accepted: vec![0; n_events + 1],
            })
        }
        CanonicalEstimator::RejectionMc { budget } => {
            if n_events > MAX_REJECTION_EVENTS {
                return Err(Error::DegenerateInput(format!(
                    "rejection sampling matches at most {MAX_REJECTION_EVENTS} events, skeleton has {n_events}"
                )));
            }
            let origin = SampledPath::uniform(S::one(), vec![vec![S::zero(); 2]; s.dimension()]);
            let mut values = vec![x.eval(S::zero(), &origin).map_err(|e| Error::Evaluation { event: 0, message: e.to_string() })?];
            let mut stderr = vec![S::zero()];
            let mut accepted = vec![0];
            for n in 1..=n_events {
                let summary = rejection_estimate(x, s, n, budget, rng)?;
                values.push(S::lit(summary.mean));
                stderr.push(S::lit(summary.stderr()));
                accepted.push(summary.count as usize);
            }
            Ok(CanonicalStructure { process: StepProcess::new(s.clone(), values)?, stderr, accepted })
        }
    }
}

/// Brownian motion from `start` until one coordinate leaves `(centre_j − w_j, centre_j + w_j)`
/// (an infinite `w_j` leaves coordinate `j` free),
/// on a grid of step `h`. Returns the knot times, the knot values per coordinate, and
/// the mark, or `None` past `cap`.
#[allow(clippy::type_complexity)]
pub(crate) fn simulate_segment<S: Scalar, R: Rng + ?Sized>(
    start: &[S],
    centre: &[S],
    widths: &[S],
    h: S,
    cap: S,
    rng: &mut R,
) -> Option<(Vec<S>, Vec<Vec<S>>, Mark)> {
    let d = start.len();
    let sd = h.sqrt();
    let mut times = vec![S::zero()];
    let mut values: Vec<Vec<S>> = start.iter().map(|&x| vec![x]).collect();
    let mut x = start.to_vec();
    let mut t = S::zero();
    while t < cap {
        let next: Vec<S> = x
            .iter()
            .map(|&xi| {
                let z: f64 = StandardNormal.sample(rng);
                xi + sd * S::lit(z)
            })
            .collect();
        let mut hit: Option<(S, usize, i8)> = None;
        for j in 0..d {
            let (up, down) = (centre[j] + widths[j], centre[j] - widths[j]);
            let crossing = if next[j] >= up {
                Some(((up - x[j]) / (next[j] - x[j]), 1))
            } else if next[j] <= down {
                Some(((down - x[j]) / (next[j] - x[j]), -1))
            } else {
                None
            };
            if let Some((w, sign)) = crossing {
                if hit.is_none_or(|(best, _, _)| w < best) {
                    hit = Some((w, j, sign));
                }
            }
        }
        if let Some((w, j, sign)) = hit {
            let w = w.max(S::zero()).min(S::one());
            times.push(t + h * w);
            for i in 0..d {
                let v = if i == j { centre[j] + widths[j] * S::from_i64_lossy(i64::from(sign)) } else { x[i] + (next[i] - x[i]) * w };
                values[i].push(v);
            }
            return Some((times, values, Mark::new(j, sign)));
        }
        t += h;
        times.push(t);
        for i in 0..d {
            values[i].push(next[i]);
        }
        x = next;
    }
    None
}

/// Averages `X(T_n)` over proposal paths matching the first `n` events. In one
/// dimension segments are independent given their start, so each segment is retried on
/// its own; otherwise a mismatch restarts the whole path.
fn rejection_estimate<S: Scalar, R: Rng + ?Sized>(
    x: &dyn PathFunctional<S>,
    s: &Skeleton<S>,
    n: usize,
    budget: usize,
    rng: &mut R,
) -> Result<Summary> {
    let ev = s.events();
    let d = s.dimension();
    let eps = s.mesh();
    let eps2 = eps * eps;
    let h = eps2 / S::lit(REJECTION_GRID);
    let band = S::lit(REJECTION_BAND) * eps2;
    let cap = S::lit(crate::exit_time::BRACKET_HIGH) * eps2;
    let widths = vec![eps; d];
    let mut summary = Summary::default();
    let mut spent = 0usize;
    'paths: while spent < budget {
        let mut times = vec![S::zero()];
        let mut coords: Vec<Vec<S>> = vec![vec![S::zero()]; d];
        let mut centre = vec![S::zero(); d];
        let mut i = 1;
        while i <= n {
            if spent >= budget {
                break 'paths;
            }
            spent += 1;
            let start: Vec<S> = coords.iter().map(|c| *c.last().expect("nonempty")).collect();
            let observed = ev.increment(i);
            let outcome = simulate_segment(&start, &centre, &widths, h, cap, rng);
            let ok = outcome.as_ref().filter(|(t, _, mark)| *mark == ev.mark(i) && (*t.last().expect("knot") - observed).abs() <= band);
            match ok {
                Some((seg_t, seg_x, mark)) => {
                    let stretch = observed / *seg_t.last().expect("knot");
                    let origin = ev.time(i - 1);
                    for k in 1..seg_t.len() {
                        let t = if k + 1 == seg_t.len() { ev.time(i) } else { origin + seg_t[k] * stretch };
                        times.push(t.max(*times.last().expect("nonempty")));
                        for j in 0..d {
                            coords[j].push(seg_x[j][k]);
                        }
                    }
                    centre[mark.coordinate] += eps * mark.sign_scalar::<S>();
                    i += 1;
                }
                None if d == 1 => {}
                None => continue 'paths,
            }
        }
        let path = SampledPath::new(coords.into_iter().map(|c| Polyline::knots(times.clone(), c)).collect());
        let v = x.eval(ev.time(n), &path).map_err(|e| Error::Evaluation { event: n, message: e.to_string() })?;
        summary.push(v.as_f64());
    }
    if (summary.count as usize) < MIN_ACCEPTANCES {
        return Err(Error::RejectionStarvation { accepted: summary.count as usize, budget, required: MIN_ACCEPTANCES });
    }
    Ok(summary)
}
