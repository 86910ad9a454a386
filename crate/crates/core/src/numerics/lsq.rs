//! Dense least squares by Householder QR with column equilibration.

use crate::scalar::Scalar;

/// A factored design matrix that can be solved against any number of targets.
#[derive(Debug, Clone)]
pub struct LeastSquares<S> {
    rows: usize,
    cols: usize,
    /// Column-major Householder vectors (below the diagonal) after factorization.
    qr: Vec<S>,
    betas: Vec<S>,
    r_diag: Vec<S>,
    scale: Vec<S>,
}

impl<S: Scalar> LeastSquares<S> {
    /// Factors a row-major `rows x cols` design. Fails with the smallest relative pivot
    /// when the columns are numerically dependent (relative pivot below `rank_tol`).
    pub fn fit(design: &[S], rows: usize, cols: usize, rank_tol: S) -> Result<Self, S> {
        assert_eq!(design.len(), rows * cols);
        assert!(rows >= cols, "underdetermined regression");
        let mut a = vec![S::zero(); rows * cols];
        let mut scale = vec![S::one(); cols];
        for c in 0..cols {
            let norm = (0..rows).map(|r| design[r * cols + c].powi(2)).sum::<S>().sqrt();
            scale[c] = if norm > S::zero() { norm } else { S::one() };
            for r in 0..rows {
                a[c * rows + r] = design[r * cols + c] / scale[c];
            }
        }
        let mut betas = vec![S::zero(); cols];
        let mut r_diag = vec![S::zero(); cols];
        for k in 0..cols {
            let col = &mut a[k * rows..(k + 1) * rows];
            let norm = col[k..].iter().map(|x| x.powi(2)).sum::<S>().sqrt();
            let alpha = if col[k] > S::zero() { -norm } else { norm };
            r_diag[k] = alpha;
            let v0 = col[k] - alpha;
            col[k] = v0;
            let vnorm2 = col[k..].iter().map(|x| x.powi(2)).sum::<S>();
            let beta = if vnorm2 > S::zero() { S::lit(2.0) / vnorm2 } else { S::zero() };
            betas[k] = beta;
            let (head, tail) = a.split_at_mut((k + 1) * rows);
            let v = &head[k * rows + k..(k + 1) * rows];
            for j in 0..(cols - k - 1) {
                let target = &mut tail[j * rows + k..(j + 1) * rows];
                let dot: S = v.iter().zip(target.iter()).map(|(x, y)| *x * *y).sum();
                let f = beta * dot;
                for (t, x) in target.iter_mut().zip(v) {
                    *t -= f * *x;
                }
            }
        }
        let max_pivot = r_diag.iter().fold(S::zero(), |m, x| m.max(x.abs()));
        let min_pivot = r_diag.iter().fold(S::infinity(), |m, x| m.min(x.abs()));
        if max_pivot == S::zero() || min_pivot / max_pivot < rank_tol {
            return Err(if max_pivot == S::zero() { S::zero() } else { min_pivot / max_pivot });
        }
        Ok(Self {
            rows,
            cols,
            qr: a,
            betas,
            r_diag,
            scale,
        })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Coefficients minimizing `|design * beta - target|_2`.
    pub fn solve(&self, target: &[S]) -> Vec<S> {
        assert_eq!(target.len(), self.rows);
        let rows = self.rows;
        let mut y = target.to_vec();
        for k in 0..self.cols {
            let v = &self.qr[k * rows + k..(k + 1) * rows];
            let dot: S = v.iter().zip(&y[k..]).map(|(a, b)| *a * *b).sum();
            let f = self.betas[k] * dot;
            for (yy, x) in y[k..].iter_mut().zip(v) {
                *yy -= f * *x;
            }
        }
        let mut beta = vec![S::zero(); self.cols];
        for k in (0..self.cols).rev() {
            let mut acc = y[k];
            for j in (k + 1)..self.cols {
                acc -= self.qr[j * rows + k] * beta[j];
            }
            beta[k] = acc / self.r_diag[k];
        }
        for (b, s) in beta.iter_mut().zip(&self.scale) {
            *b /= *s;
        }
        beta
    }
}

/// Greedy column selection: keeps column `c` when its component orthogonal to the kept
/// columns has relative norm at least `rank_tol`. Returns the kept indices, in order.
pub fn independent_columns<S: Scalar>(design: &[S], rows: usize, cols: usize, rank_tol: S) -> Vec<usize> {
    let mut basis: Vec<Vec<S>> = Vec::new();
    let mut kept = Vec::new();
    for c in 0..cols {
        let mut v: Vec<S> = (0..rows).map(|r| design[r * cols + c]).collect();
        let norm = v.iter().map(|x| x.powi(2)).sum::<S>().sqrt();
        if norm == S::zero() {
            continue;
        }
        // Two passes of modified Gram-Schmidt keep the residual orthogonal in floating point.
        for _ in 0..2 {
            for q in &basis {
                let dot: S = q.iter().zip(&v).map(|(a, b)| *a * *b).sum();
                for (x, qq) in v.iter_mut().zip(q) {
                    *x -= dot * *qq;
                }
            }
        }
        let rest = v.iter().map(|x| x.powi(2)).sum::<S>().sqrt();
        if rest >= rank_tol * norm {
            v.iter_mut().for_each(|x| *x /= rest);
            basis.push(v);
            kept.push(c);
        }
    }
    kept
}

/// Copies the listed columns of a row-major design.
pub fn select_columns<S: Scalar>(design: &[S], rows: usize, cols: usize, keep: &[usize]) -> Vec<S> {
    let mut out = Vec::with_capacity(rows * keep.len());
    for r in 0..rows {
        out.extend(keep.iter().map(|&c| design[r * cols + c]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_polynomial() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 10.0 - 2.0).collect();
        let mut design = Vec::new();
        let mut y = Vec::new();
        for &x in &xs {
            design.extend_from_slice(&[1.0, x, x * x, x * x * x]);
            y.push(0.5 - 2.0 * x + 0.25 * x * x * x);
        }
        let ls = LeastSquares::fit(&design, xs.len(), 4, 1e-12).unwrap();
        let beta = ls.solve(&y);
        for (b, want) in beta.iter().zip([0.5, -2.0, 0.0, 0.25]) {
            assert!((b - want).abs() < 1e-10, "{beta:?}");
        }
    }

    #[test]
    fn least_squares_residual_is_orthogonal() {
        let design = [1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0];
        let y = [1.0, 3.0, 2.0, 5.0];
        let ls = LeastSquares::<f64>::fit(&design, 4, 2, 1e-12).unwrap();
        let b = ls.solve(&y);
        let mut g = [0.0; 2];
        for r in 0..4 {
            let res = y[r] - design[2 * r] * b[0] - design[2 * r + 1] * b[1];
            g[0] += res * design[2 * r];
            g[1] += res * design[2 * r + 1];
        }
        assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
    }

    #[test]
    fn greedy_selection_drops_dependent_columns() {
        // Columns: 1, x, 2x, x².
        let xs = [-1.0, 0.0, 1.0, 2.0];
        let design: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x, 2.0 * x, x * x]).collect();
        let keep = independent_columns(&design, 4, 4, 1e-10);
        assert_eq!(keep, vec![0, 1, 3]);
        let reduced = select_columns(&design, 4, 4, &keep);
        assert!(LeastSquares::fit(&reduced, 4, 3, 1e-12).is_ok());
    }

    #[test]
    fn dependent_columns_are_rejected() {
        let design = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        assert!(LeastSquares::<f64>::fit(&design, 3, 2, 1e-10).is_err());
    }
}
