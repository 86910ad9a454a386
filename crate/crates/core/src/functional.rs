//! Non-anticipative path functionals `F_t(ω_t)` and the name-keyed registry.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::History;
use crate::path::PathView;
use crate::scalar::Scalar;

/// A functional `F(t, ω)` that reads `ω` only on `[0, t]`.
pub trait PathFunctional<S: Scalar>: Send + Sync {
    fn name(&self) -> String;

    fn eval(&self, t: S, path: &dyn PathView<S>) -> Result<S>;

    /// `f(t, x)` when `F(t, ω) = f(t, ω(t))`; `None` for path-dependent functionals.
    fn markov(&self, _t: S, _x: &[S]) -> Option<S> {
        None
    }
}

/// `F^k_n(b) = F(T_n, A^k)` for the history's own step path; `n` indexes the error.
pub fn eval_at_event<S: Scalar>(f: &dyn PathFunctional<S>, h: &History<S>, n: usize) -> Result<S> {
    f.eval(h.time(n), h).map_err(|e| Error::Evaluation { event: n, message: e.to_string() })
}

fn check<S: Scalar>(path: &dyn PathView<S>, j: usize) -> Result<()> {
    if j < path.dim() {
        Ok(())
    } else {
        Err(Error::CoordinateOutOfRange { coordinate: j, dimension: path.dim() })
    }
}

/// `ω^j(t)`.
#[derive(Debug, Clone, Copy)]
pub struct Coordinate(pub usize);

impl<S: Scalar> PathFunctional<S> for Coordinate {
    fn name(&self) -> String {
        format!("coordinate[{}]", self.0 + 1)
    }

    fn eval(&self, t: S, path: &dyn PathView<S>) -> Result<S> {
        check(path, self.0)?;
        Ok(path.value(self.0, t))
    }

    fn markov(&self, _t: S, x: &[S]) -> Option<S> {
        x.get(self.0).copied()
    }
}

/// `ω^j(t)² − t`.
#[derive(Debug, Clone, Copy)]
pub struct SquareMinusTime(pub usize);

impl<S: Scalar> PathFunctional<S> for SquareMinusTime {
    fn name(&self) -> String {
        format!("square_minus_time[{}]", self.0 + 1)
    }

    fn eval(&self, t: S, path: &dyn PathView<S>) -> Result<S> {
        check(path, self.0)?;
        let x = path.value(self.0, t);
        Ok(x * x - t)
    }

    fn markov(&self, t: S, x: &[S]) -> Option<S> {
        x.get(self.0).map(|&x| x * x - t)
    }
}

/// `ω^j(t)²`.
#[derive(Debug, Clone, Copy)]
pub struct Square(pub usize);

impl<S: Scalar> PathFunctional<S> for Square {
    fn name(&self) -> String {
        format!("square[{}]", self.0 + 1)
    }

    fn eval(&self, t: S, path: &dyn PathView<S>) -> Result<S> {
        check(path, self.0)?;
        let x = path.value(self.0, t);
        Ok(x * x)
    }

    fn markov(&self, _t: S, x: &[S]) -> Option<S> {
        x.get(self.0).map(|&x| x * x)
    }
}

/// `∫_0^t ω^j(s) ds`.
#[derive(Debug, Clone, Copy)]
pub struct RunningIntegral(pub usize);

impl<S: Scalar> PathFunctional<S> for RunningIntegral {
    fn name(&self) -> String {
        format!("running_integral[{}]", self.0 + 1)
    }

    fn eval(&self, t: S, path: &dyn PathView<S>) -> Result<S> {
        check(path, self.0)?;
        Ok(path.integral(self.0, t))
    }
}

/// `sup_{s <= t} ω^j(s)`.
#[derive(Debug, Clone, Copy)]
pub struct RunningMax(pub usize);

impl<S: Scalar> PathFunctional<S> for RunningMax {
    fn name(&self) -> String {
        format!("running_max[{}]", self.0 + 1)
    }

    fn eval(&self, t: S, path: &dyn PathView<S>) -> Result<S> {
        check(path, self.0)?;
        Ok(path.running_max(self.0, t))
    }
}

/// `t`.
#[derive(Debug, Clone, Copy)]
pub struct Time;

impl<S: Scalar> PathFunctional<S> for Time {
    fn name(&self) -> String {
        "time".into()
    }

    fn eval(&self, t: S, _path: &dyn PathView<S>) -> Result<S> {
        Ok(t)
    }

    fn markov(&self, t: S, _x: &[S]) -> Option<S> {
        Some(t)
    }
}

/// `c`.
#[derive(Debug, Clone, Copy)]
pub struct Constant<S>(pub S);

impl<S: Scalar> PathFunctional<S> for Constant<S> {
    fn name(&self) -> String {
        format!("constant[{}]", self.0)
    }

    fn eval(&self, _t: S, _path: &dyn PathView<S>) -> Result<S> {
        Ok(self.0)
    }

    fn markov(&self, _t: S, _x: &[S]) -> Option<S> {
        Some(self.0)
    }
}

/// `max(K − |ω^j(t)|, 0)`.
#[derive(Debug, Clone, Copy)]
pub struct Put<S> {
    pub coordinate: usize,
    pub strike: S,
}

impl<S: Scalar> PathFunctional<S> for Put<S> {
    fn name(&self) -> String {
        format!("put[{}; {}]", self.coordinate + 1, self.strike)
    }

    fn eval(&self, t: S, path: &dyn PathView<S>) -> Result<S> {
        check(path, self.coordinate)?;
        Ok((self.strike - path.value(self.coordinate, t).abs()).max(S::zero()))
    }

    fn markov(&self, _t: S, x: &[S]) -> Option<S> {
        x.get(self.coordinate).map(|&x| (self.strike - x.abs()).max(S::zero()))
    }
}

/// `e^{−ρt}(K − x_j)^+`.
pub struct DiscountedPut<S> {
    pub coordinate: usize,
    pub strike: S,
    pub rate: S,
}

impl<S: Scalar> PathFunctional<S> for DiscountedPut<S> {
    fn name(&self) -> String {
        format!("discounted_put[{}; {}; {}]", self.coordinate + 1, self.strike, self.rate)
    }

    fn eval(&self, t: S, path: &dyn PathView<S>) -> Result<S> {
        check(path, self.coordinate)?;
        Ok((-self.rate * t).exp() * (self.strike - path.value(self.coordinate, t)).max(S::zero()))
    }

    fn markov(&self, t: S, x: &[S]) -> Option<S> {
        x.get(self.coordinate).map(|&x| (-self.rate * t).exp() * (self.strike - x).max(S::zero()))
    }
}

/// `F + c`, e.g. to raise a reward uniformly.
pub struct Shifted<S: Scalar> {
    pub inner: Arc<dyn PathFunctional<S>>,
    pub shift: S,
}

impl<S: Scalar> PathFunctional<S> for Shifted<S> {
    fn name(&self) -> String {
        format!("{} + {}", self.inner.name(), self.shift)
    }

    fn eval(&self, t: S, path: &dyn PathView<S>) -> Result<S> {
        Ok(self.inner.eval(t, path)? + self.shift)
    }

    fn markov(&self, t: S, x: &[S]) -> Option<S> {
        self.inner.markov(t, x).map(|v| v + self.shift)
    }
}

/// A functional from closures; the plug-in point for user code.
pub struct FnFunctional<S: Scalar> {
    name: String,
    eval: Box<dyn Fn(S, &dyn PathView<S>) -> Result<S> + Send + Sync>,
    markov: Option<Box<dyn Fn(S, &[S]) -> S + Send + Sync>>,
}

impl<S: Scalar> FnFunctional<S> {
    pub fn new(name: impl Into<String>, eval: impl Fn(S, &dyn PathView<S>) -> Result<S> + Send + Sync + 'static) -> Self {
        Self { name: name.into(), eval: Box::new(eval), markov: None }
    }

    /// A Markov functional `f(t, ω(t))`.
    pub fn markov(name: impl Into<String>, f: impl Fn(S, &[S]) -> S + Send + Sync + Clone + 'static) -> Self {
        let g = f.clone();
        Self {
            name: name.into(),
            eval: Box::new(move |t, path| {
                let x: Vec<S> = (0..path.dim()).map(|j| path.value(j, t)).collect();
                Ok(g(t, &x))
            }),
            markov: Some(Box::new(f)),
        }
    }
}

impl<S: Scalar> PathFunctional<S> for FnFunctional<S> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn eval(&self, t: S, path: &dyn PathView<S>) -> Result<S> {
        (self.eval)(t, path)
    }

    fn markov(&self, t: S, x: &[S]) -> Option<S> {
        self.markov.as_ref().map(|f| f(t, x))
    }
}

/// Parameters shared by registry entries. `coordinate` is 1-based, as in configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionalParams {
    pub coordinate: usize,
    pub value: f64,
    pub strike: f64,
    pub rate: f64,
}

impl Default for FunctionalParams {
    fn default() -> Self {
        Self { coordinate: 1, value: 0.0, strike: 1.0, rate: 0.0 }
    }
}

type Factory<S> = Box<dyn Fn(&FunctionalParams) -> Result<Arc<dyn PathFunctional<S>>> + Send + Sync>;

/// Name-keyed functional constructors.
pub struct Registry<S: Scalar> {
    factories: BTreeMap<String, Factory<S>>,
}

impl<S: Scalar> Default for Registry<S> {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl<S: Scalar> Registry<S> {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    /// `coordinate`, `scaled_coordinate` (`value·ω^j`), `square`, `square_minus_time`,
    /// `running_integral`, `running_max`, `time`, `constant`, `put` and `discounted_put`.
    pub fn with_builtins() -> Self {
        fn j(p: &FunctionalParams) -> Result<usize> {
            p.coordinate.checked_sub(1).ok_or_else(|| Error::Config("coordinates are 1-based".into()))
        }
        let mut r = Self::empty();
        r.register("coordinate", |p| Ok(Arc::new(Coordinate(j(p)?))));
        r.register("scaled_coordinate", |p| {
            let (c, k) = (j(p)?, S::lit(p.value));
            Ok(Arc::new(FnFunctional::markov(format!("{}*coordinate[{}]", p.value, c + 1), move |_, x: &[S]| x.get(c).map_or(S::nan(), |&v| k * v))))
        });
        r.register("square", |p| Ok(Arc::new(Square(j(p)?))));
        r.register("square_minus_time", |p| Ok(Arc::new(SquareMinusTime(j(p)?))));
        r.register("running_integral", |p| Ok(Arc::new(RunningIntegral(j(p)?))));
        r.register("running_max", |p| Ok(Arc::new(RunningMax(j(p)?))));
        r.register("time", |_| Ok(Arc::new(Time)));
        r.register("constant", |p| Ok(Arc::new(Constant(S::lit(p.value)))));
        r.register("put", |p| Ok(Arc::new(Put { coordinate: j(p)?, strike: S::lit(p.strike) })));
        r.register("discounted_put", |p| {
            Ok(Arc::new(DiscountedPut { coordinate: j(p)?, strike: S::lit(p.strike), rate: S::lit(p.rate) }))
        });
        r
    }

    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&FunctionalParams) -> Result<Arc<dyn PathFunctional<S>>> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, params: &FunctionalParams) -> Result<Arc<dyn PathFunctional<S>>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown functional {name:?}; known: {}", self.names().join(", "))))?;
        factory(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::{Polyline, SampledPath};
    use crate::skeleton::Mark;

    fn path() -> SampledPath<f64> {
        SampledPath::uniform(0.25, vec![vec![0.0, 0.5, -0.5, 1.0, 0.0], vec![0.0, 0.0, 0.0, 0.0, 0.0]])
    }

    #[test]
    fn builtins_evaluate_directly() {
        let p = path();
        let reg = Registry::<f64>::with_builtins();
        let get = |name: &str, params: FunctionalParams| reg.build(name, &params).unwrap().eval(0.75, &p).unwrap();
        let d = FunctionalParams::default();
        assert_eq!(get("coordinate", d), 1.0);
        assert_eq!(get("square_minus_time", d), 0.25);
        assert_eq!(get("square", d), 1.0);
        assert_eq!(get("running_integral", d), 0.125);
        assert_eq!(get("running_max", d), 1.0);
        assert_eq!(get("time", d), 0.75);
        assert_eq!(get("constant", FunctionalParams { value: 3.0, ..d }), 3.0);
        assert_eq!(get("put", FunctionalParams { strike: 1.5, ..d }), 0.5);
        assert_eq!(get("coordinate", FunctionalParams { coordinate: 2, ..d }), 0.0);
        assert!(reg.build("nope", &d).is_err());
        assert!(reg.build("coordinate", &FunctionalParams { coordinate: 0, ..d }).is_err());
        let f = reg.build("coordinate", &FunctionalParams { coordinate: 3, ..d }).unwrap();
        assert!(matches!(f.eval(0.5, &p), Err(Error::CoordinateOutOfRange { .. })));
    }

    #[test]
    fn markov_forms_agree_with_path_forms() {
        let p = path();
        let reg = Registry::<f64>::with_builtins();
        for name in ["coordinate", "square", "square_minus_time", "time", "constant", "put"] {
            let f = reg.build(name, &FunctionalParams::default()).unwrap();
            for t in [0.0, 0.3, 0.75, 1.0] {
                let x = [p.value(0, t), p.value(1, t)];
                assert_eq!(f.markov(t, &x), Some(f.eval(t, &p).unwrap()), "{name} at {t}");
            }
        }
        for name in ["running_integral", "running_max"] {
            assert_eq!(reg.build(name, &FunctionalParams::default()).unwrap().markov(0.5, &[0.0, 0.0]), None);
        }
    }

    #[test]
    fn builtins_ignore_the_future() {
        let reg = Registry::<f64>::with_builtins();
        let base = path();
        let t = 0.5;
        // Same path on [0, 0.5], wildly different afterwards.
        let other = SampledPath::new(vec![
            Polyline::knots(vec![0.0, 0.25, 0.5, 0.6, 2.0], vec![0.0, 0.5, -0.5, 40.0, -9.0]),
            Polyline::knots(vec![0.0, 0.5, 0.7], vec![0.0, 0.0, 3.0]),
        ]);
        for name in reg.names() {
            let f = reg.build(name, &FunctionalParams::default()).unwrap();
            assert_eq!(f.eval(t, &base).unwrap(), f.eval(t, &other).unwrap(), "{name}");
        }
    }

    #[test]
    fn plug_in_functionals() {
        let mut reg = Registry::<f64>::with_builtins();
        reg.register("cube", |p| {
            let j = p.coordinate - 1;
            Ok(Arc::new(FnFunctional::markov("cube", move |_t, x: &[f64]| x[j].powi(3))))
        });
        let f = reg.build("cube", &FunctionalParams::default()).unwrap();
        assert_eq!(f.eval(0.75, &path()).unwrap(), 1.0);
        assert_eq!(f.markov(0.0, &[2.0]), Some(8.0));
        let shifted = Shifted { inner: f, shift: 0.5 };
        assert_eq!(shifted.eval(0.75, &path()).unwrap(), 1.5);
    }

    #[test]
    fn evaluation_errors_carry_the_event_index() {
        let h = History::<f64>::from_increments(1, 0.1, &[(0.2, Mark::new(0, 1))]).unwrap();
        let e = eval_at_event(&Coordinate(1), &h, 1).unwrap_err();
        assert!(matches!(e, Error::Evaluation { event: 1, .. }));
    }
}
