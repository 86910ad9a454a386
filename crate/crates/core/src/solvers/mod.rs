//! Backward solvers on the skeleton: optimal stopping and BSDEs, plus the variational
//! energy check for BSDE solutions.

pub mod bsde;
pub mod energy;
pub mod stopping;

use crate::error::{Error, Result};
use crate::exit_time::ExitLaw;
use crate::history::History;
use crate::numerics::lsq::{independent_columns, select_columns, LeastSquares};
use crate::rng::replicate;
use crate::scalar::Scalar;
use crate::skeleton::{Skeleton, SkeletonConfig};

/// Relative tolerance for dropping dependent basis columns.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Intrinsic histories with at least `r = ⌈dT/ε²⌉` events each, one per stream of `seed`.
pub(crate) fn training_histories<S: Scalar>(
    dimension: usize,
    mesh: S,
    horizon: S,
    count: usize,
    law: &ExitLaw<S>,
    seed: u64,
) -> Result<(usize, Vec<History<S>>)> {
    let config = SkeletonConfig::intrinsic(dimension, mesh, horizon).through_horizon_index();
    config.validate()?;
    let r = config.horizon_index();
    let histories = replicate(seed, count, |_, rng| {
        Skeleton::generate_intrinsic(config, law, rng).map(|s| s.events().prefix(r))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((r, histories))
}

/// Regression state at event `n`: `(A^1, ..., A^d, T_n)`.
pub(crate) fn state<S: Scalar>(h: &History<S>, n: usize) -> Vec<S> {
    let mut v: Vec<S> = (0..h.dimension()).map(|j| h.value_at_event(j, n)).collect();
    v.push(h.time(n));
    v
}

/// Exponent vectors of total degree `<= degree` in `vars` variables, by degree, constant first.
pub(crate) fn exponents(vars: usize, degree: usize) -> Vec<Vec<u8>> {
    fn fill(prefix: &mut Vec<u8>, left: usize, remaining: usize, out: &mut Vec<Vec<u8>>) {
        if left == 0 {
            if remaining == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        for k in (0..=remaining).rev() {
            prefix.push(k as u8);
            fill(prefix, left - 1, remaining - k, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=degree {
        if vars == 0 && total > 0 {
            break;
        }
        fill(&mut Vec::with_capacity(vars), vars, total, &mut out);
    }
    out
}

/// Monomials of total degree `<= degree` in standardized state variables, plus extra
/// columns taken verbatim.
#[derive(Debug, Clone)]
struct Basis<S> {
    shift: Vec<S>,
    scale: Vec<S>,
    active: Vec<usize>,
    monomials: Vec<Vec<u8>>,
    extras: Vec<usize>,
}

impl<S: Scalar> Basis<S> {
    fn row(&self, vars: &[S], extras: &[S]) -> Vec<S> {
        let z: Vec<S> = self.active.iter().map(|&c| (vars[c] - self.shift[c]) / self.scale[c]).collect();
        let mut out: Vec<S> = self
            .monomials
            .iter()
            .map(|e| e.iter().zip(&z).fold(S::one(), |acc, (&k, &x)| acc * x.powi(i32::from(k))))
            .collect();
        out.extend(self.extras.iter().map(|&c| extras[c]));
        out
    }
}

/// Least squares on a polynomial basis. Constant variables and dependent columns are
/// dropped before factoring.
#[derive(Debug, Clone)]
pub(crate) struct Regression<S> {
    basis: Basis<S>,
    ls: LeastSquares<S>,
    pub dropped: usize,
}

impl<S: Scalar> Regression<S> {
    /// `vars` is row-major `rows x nv`, `extras` row-major `rows x ne`.
    pub fn fit(vars: &[S], nv: usize, extras: &[S], ne: usize, rows: usize, degree: usize, layer: usize) -> Result<Self> {
        let n = S::from_usize_lossy(rows);
        let mut shift = vec![S::zero(); nv];
        let mut scale = vec![S::one(); nv];
        let mut active = Vec::new();
        for c in 0..nv {
            let mean = (0..rows).map(|r| vars[r * nv + c]).sum::<S>() / n;
            let sd = ((0..rows).map(|r| (vars[r * nv + c] - mean).powi(2)).sum::<S>() / n).sqrt();
            shift[c] = mean;
            if sd > S::lit(1e-10) * (S::one() + mean.abs()) {
                scale[c] = sd;
                active.push(c);
            }
        }
        let monomials = exponents(active.len(), degree);
        let mut basis = Basis { shift, scale, active, monomials, extras: (0..ne).collect() };
        let cols = basis.monomials.len() + ne;
        let mut design = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            design.extend(basis.row(&vars[r * nv..(r + 1) * nv], &extras[r * ne..(r + 1) * ne]));
        }
        let keep = independent_columns(&design, rows, cols, S::lit(RANK_TOLERANCE));
        if keep.is_empty() || keep.len() > rows {
            return Err(Error::Config(format!("layer {layer}: {rows} samples cannot fit {} basis functions", keep.len())));
        }
        let reduced = select_columns(&design, rows, cols, &keep);
        let ls = LeastSquares::fit(&reduced, rows, keep.len(), S::lit(RANK_TOLERANCE * 1e-2))
            .map_err(|p| Error::IllConditioned { layer, pivot: p.as_f64() })?;
        let m = basis.monomials.len();
        basis.extras = keep.iter().filter(|&&c| c >= m).map(|&c| c - m).collect();
        basis.monomials = keep.iter().filter(|&&c| c < m).map(|&c| basis.monomials[c].clone()).collect();
        Ok(Self { basis, ls, dropped: cols - keep.len() })
    }

    pub fn coefficients(&self, target: &[S]) -> Vec<S> {
        self.ls.solve(target)
    }

    pub fn predict(&self, coef: &[S], vars: &[S], extras: &[S]) -> S {
        self.basis.row(vars, extras).iter().zip(coef).map(|(a, b)| *a * *b).sum()
    }
}
