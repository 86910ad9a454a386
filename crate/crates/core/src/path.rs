//! Càdlàg and piecewise-linear paths that functionals are evaluated on.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Read access to a `d`-dimensional path on `[0, end]`. Queries past the end hold the
/// last value.
pub trait PathView<S: Scalar> {
    fn dim(&self) -> usize;

    /// `x_j(t)`.
    fn value(&self, j: usize, t: S) -> S;

    /// `int_0^t x_j(s) ds`.
    fn integral(&self, j: usize, t: S) -> S;

    /// `sup_{s <= t} x_j(s)`.
    fn running_max(&self, j: usize, t: S) -> S;
}

#[derive(Debug, Clone)]
enum Grid<S> {
    Uniform { origin: S, step: S },
    Knots(Vec<S>),
}

/// Piecewise-linear interpolation of samples on a grid.
#[derive(Debug, Clone)]
pub struct Polyline<S> {
    grid: Grid<S>,
    values: Vec<S>,
    cumulative: OnceLock<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Polyline<S> {
    pub fn uniform(origin: S, step: S, values: Vec<S>) -> Self {
        assert!(!values.is_empty());
        assert!(step > S::zero());
        Self {
            grid: Grid::Uniform { origin, step },
            values,
            cumulative: OnceLock::new(),
        }
    }

    /// Knot times must be nondecreasing.
    pub fn knots(times: Vec<S>, values: Vec<S>) -> Self {
        assert_eq!(times.len(), values.len());
        assert!(!values.is_empty());
        debug_assert!(times.windows(2).all(|w| w[0] <= w[1]));
        Self {
            grid: Grid::Knots(times),
            values,
            cumulative: OnceLock::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn time(&self, i: usize) -> S {
        match &self.grid {
            Grid::Uniform { origin, step } => *origin + *step * S::from_usize_lossy(i),
            Grid::Knots(t) => t[i],
        }
    }

    pub fn start(&self) -> S {
        self.time(0)
    }

    pub fn end(&self) -> S {
        self.time(self.values.len() - 1)
    }

    pub fn uniform_step(&self) -> Option<S> {
        match &self.grid {
            Grid::Uniform { step, .. } => Some(*step),
            Grid::Knots(_) => None,
        }
    }

    /// Index `i` of the segment `[t_i, t_{i+1})` containing `t`, clamped to the grid.
    fn locate(&self, t: S) -> usize {
        let last = self.values.len() - 1;
        match &self.grid {
            Grid::Uniform { origin, step } => {
                let x = ((t - *origin) / *step).floor();
                if x <= S::zero() {
                    0
                } else {
                    x.to_usize().unwrap_or(last).min(last)
                }
            }
            Grid::Knots(times) => times.partition_point(|s| *s <= t).saturating_sub(1).min(last),
        }
    }

    pub fn value_at(&self, t: S) -> S {
        let i = self.locate(t);
        if i + 1 >= self.values.len() || t <= self.time(i) {
            return self.values[i];
        }
        let (t0, t1) = (self.time(i), self.time(i + 1));
        if t1 <= t0 {
            return self.values[i + 1];
        }
        let w = (t - t0) / (t1 - t0);
        self.values[i] + (self.values[i + 1] - self.values[i]) * w
    }

    fn cumulative(&self) -> &(Vec<S>, Vec<S>) {
        self.cumulative.get_or_init(|| {
            let n = self.values.len();
            let mut integral = Vec::with_capacity(n);
            let mut maxima = Vec::with_capacity(n);
            let mut acc = S::zero();
            let mut max = self.values[0];
            integral.push(acc);
            maxima.push(max);
            for i in 1..n {
                let dt = self.time(i) - self.time(i - 1);
                acc += dt * (self.values[i] + self.values[i - 1]) * S::lit(0.5);
                max = max.max(self.values[i]);
                integral.push(acc);
                maxima.push(max);
            }
            (integral, maxima)
        })
    }

    /// Integral from the first knot to `t`.
    pub fn integral_to(&self, t: S) -> S {
        if t <= self.start() {
            return S::zero();
        }
        let i = self.locate(t);
        let (ints, _) = self.cumulative();
        let ti = self.time(i);
        ints[i] + (t - ti) * (self.values[i] + self.value_at(t)) * S::lit(0.5)
    }

    /// Maximum over `[start, t]`.
    pub fn max_to(&self, t: S) -> S {
        let i = self.locate(t);
        let (_, maxima) = self.cumulative();
        maxima[i].max(self.value_at(t))
    }
}

/// A sampled `d`-dimensional path, one polyline per coordinate, starting at time 0.
#[derive(Debug, Clone)]
pub struct SampledPath<S> {
    coords: Vec<Polyline<S>>,
}

impl<S: Scalar> SampledPath<S> {
    pub fn new(coords: Vec<Polyline<S>>) -> Self {
        assert!(!coords.is_empty());
        Self { coords }
    }

    /// Samples on the uniform grid `0, step, 2 step, ...`.
    pub fn uniform(step: S, coords: Vec<Vec<S>>) -> Self {
        Self::new(coords.into_iter().map(|v| Polyline::uniform(S::zero(), step, v)).collect())
    }

    /// Standard Brownian motion from 0 on a uniform grid covering `[0, horizon]`.
    pub fn brownian<R: Rng + ?Sized>(dim: usize, step: S, horizon: S, rng: &mut R) -> Self {
        let n = (horizon / step).ceil().to_usize().expect("grid size");
        let sd = step.sqrt().as_f64();
        let coords = (0..dim)
            .map(|_| {
                let mut v = Vec::with_capacity(n + 1);
                let mut x = 0.0f64;
                v.push(S::zero());
                for _ in 0..n {
                    let z: f64 = StandardNormal.sample(rng);
                    x += sd * z;
                    v.push(S::lit(x));
                }
                v
            })
            .collect();
        Self::uniform(step, coords)
    }

    pub fn coordinate(&self, j: usize) -> &Polyline<S> {
        &self.coords[j]
    }

    pub fn end(&self) -> S {
        self.coords.iter().map(|c| c.end()).fold(S::infinity(), |a, b| a.min(b))
    }

    pub fn uniform_step(&self) -> Option<S> {
        let h = self.coords[0].uniform_step()?;
        self.coords.iter().all(|c| c.uniform_step() == Some(h)).then_some(h)
    }

    /// Keeps every `every`-th sample of a uniform path.
    pub fn subsample(&self, every: usize) -> Result<Self> {
        let h = self
            .uniform_step()
            .ok_or_else(|| Error::DegenerateInput("subsampling needs a uniform grid".into()))?;
        let coords = self
            .coords
            .iter()
            .map(|c| c.values.iter().step_by(every).copied().collect())
            .collect();
        Ok(Self::uniform(h * S::from_usize_lossy(every), coords))
    }
}

impl<S: Scalar> PathView<S> for SampledPath<S> {
    fn dim(&self) -> usize {
        self.coords.len()
    }

    fn value(&self, j: usize, t: S) -> S {
        self.coords[j].value_at(t)
    }

    fn integral(&self, j: usize, t: S) -> S {
        self.coords[j].integral_to(t)
    }

    fn running_max(&self, j: usize, t: S) -> S {
        self.coords[j].max_to(t)
    }
}

/// A prefix path up to `t0` followed by a continuation polyline starting at `t0`.
pub struct ContinuedPath<'a, S> {
    prefix: &'a dyn PathView<S>,
    t0: S,
    tail: &'a [Polyline<S>],
}

impl<'a, S: Scalar> ContinuedPath<'a, S> {
    pub fn new(prefix: &'a dyn PathView<S>, t0: S, tail: &'a [Polyline<S>]) -> Self {
        assert_eq!(prefix.dim(), tail.len());
        Self { prefix, t0, tail }
    }
}

impl<S: Scalar> std::fmt::Debug for ContinuedPath<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContinuedPath").field("t0", &self.t0).field("tail", &self.tail).finish()
    }
}

impl<S: Scalar> PathView<S> for ContinuedPath<'_, S> {
    fn dim(&self) -> usize {
        self.tail.len()
    }

    fn value(&self, j: usize, t: S) -> S {
        if t <= self.t0 {
            self.prefix.value(j, t)
        } else {
            self.tail[j].value_at(t)
        }
    }

    fn integral(&self, j: usize, t: S) -> S {
        if t <= self.t0 {
            self.prefix.integral(j, t)
        } else {
            self.prefix.integral(j, self.t0) + self.tail[j].integral_to(t)
        }
    }

    fn running_max(&self, j: usize, t: S) -> S {
        if t <= self.t0 {
            self.prefix.running_max(j, t)
        } else {
            self.prefix.running_max(j, self.t0).max(self.tail[j].max_to(t))
        }
    }
}
