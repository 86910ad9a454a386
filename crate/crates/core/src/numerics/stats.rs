//! Running moments, order-fixed reductions and the goodness-of-fit statistics used by
//! the diagnostics and the test suites.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Welford accumulator for mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Summary {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Chan's pairwise combination.
    pub fn merge(&self, other: &Summary) -> Summary {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        Summary {
            count: self.count + other.count,
            mean: self.mean + delta * other.count as f64 / n,
            m2: self.m2 + other.m2 + delta * delta * self.count as f64 * other.count as f64 / n,
        }
    }

    pub fn from_slice<S: Scalar>(xs: &[S]) -> Summary {
        let mut s = Summary::default();
        for x in xs {
            s.push(x.as_f64());
        }
        s
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            f64::INFINITY
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }

    /// `(mean - target) / stderr`; zero when both the gap and the error vanish.
    pub fn z_score(&self, target: f64) -> f64 {
        let gap = self.mean - target;
        let se = self.stderr();
        if se == 0.0 {
            if gap == 0.0 {
                0.0
            } else {
                gap.signum() * f64::INFINITY
            }
        } else {
            gap / se
        }
    }
}

/// Reduces a slice with a fixed balanced binary tree, independent of how the elements
/// were produced. Returns `None` for an empty slice.
pub fn tree_reduce<T: Clone, F: Fn(&T, &T) -> T + Copy>(items: &[T], f: F) -> Option<T> {
    match items.len() {
        0 => None,
        1 => Some(items[0].clone()),
        n => {
            let (l, r) = items.split_at(n / 2);
            let a = tree_reduce(l, f)?;
            let b = tree_reduce(r, f)?;
            Some(f(&a, &b))
        }
    }
}

pub fn tree_sum(items: &[f64]) -> f64 {
    tree_reduce(items, |a, b| a + b).unwrap_or(0.0)
}

/// Summary of `xs` merged in fixed tree order.
pub fn tree_summary(xs: &[f64]) -> Summary {
    let leaves: Vec<Summary> = xs
        .iter()
        .map(|&x| {
            let mut s = Summary::default();
            s.push(x);
            s
        })
        .collect();
    tree_reduce(&leaves, |a, b| a.merge(b)).unwrap_or_default()
}

/// One-sample Kolmogorov–Smirnov distance of `samples` against a continuous CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("NaN sample"));
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let f = cdf(*x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    d
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.partial_cmp(q).expect("NaN sample"));
    xb.sort_by(|p, q| p.partial_cmp(q).expect("NaN sample"));
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic Kolmogorov critical coefficient `c(alpha)`, i.e. the reject threshold is
/// `c(alpha) * sqrt(1/n)` (one sample) or `c(alpha) * sqrt((n+m)/(n m))` (two samples).
pub fn ks_coefficient(alpha: f64) -> f64 {
    (-0.5 * (alpha / 2.0).ln()).sqrt()
}

pub fn ks_critical(alpha: f64, n: usize) -> f64 {
    ks_coefficient(alpha) / (n as f64).sqrt()
}

pub fn ks_critical_two_sample(alpha: f64, n: usize, m: usize) -> f64 {
    ks_coefficient(alpha) * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}
