//! Finite Gaussian mixtures on the line and their quantile functions.

use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

/// Bisection/Newton stopping tolerance on the quantile abscissa.
pub const QUANTILE_TOL: f64 = 1e-12;
pub const MIN_QUAD_POINTS: usize = 64;
pub const DEFAULT_QUAD_POINTS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub variance: f64,
}

impl Gaussian {
    pub fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureLaw1D {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl MixtureLaw1D {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::Domain(
                "mixture needs matching, nonempty weights and components".into(),
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Domain("mixture weights must be >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("mixture weights sum to {total}, not 1")));
        }
        if components.iter().any(|g| !(g.variance > 0.0) || !g.mean.is_finite()) {
            return Err(Error::Domain("mixture variances must be > 0".into()));
        }
        Ok(Self { weights, components })
    }

    pub fn single(g: Gaussian) -> Result<Self> {
        Self::new(vec![1.0], vec![g])
    }

    /// Equal-weight mixture.
    pub fn uniform(components: Vec<Gaussian>) -> Result<Self> {
        let w = 1.0 / components.len().max(1) as f64;
        let weights = vec![w; components.len()];
        // guard against rounding in the weight sum
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|x| x / total).collect();
        Self::new(weights, components)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    /// Merge bitwise-identical components. Does not change the law.
    pub fn collapsed(&self) -> Self {
        let mut weights: Vec<f64> = Vec::new();
        let mut comps: Vec<Gaussian> = Vec::new();
        for (&w, g) in self.weights.iter().zip(&self.components) {
            match comps.iter().position(|c| c == g) {
                Some(k) => weights[k] += w,
                None => {
                    weights.push(w);
                    comps.push(*g);
                }
            }
        }
        Self {
            weights,
            components: comps,
        }
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, g)| w * g.mean)
            .sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, g)| w * std_normal_cdf((x - g.mean) / g.sd()))
            .sum()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, g)| w * std_normal_pdf((x - g.mean) / g.sd()) / g.sd())
            .sum()
    }

    /// `F^{-1}(q)` by safeguarded Newton inside a shrinking bisection bracket.
    pub fn quantile(&self, q: f64) -> f64 {
        let (mut lo, mut hi) = self.components.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), g| (lo.min(g.mean - 40.0 * g.sd()), hi.max(g.mean + 40.0 * g.sd())),
        );
        let mut x = self.mean().clamp(lo, hi);
        for _ in 0..400 {
            let fx = self.cdf(x) - q;
            if fx == 0.0 {
                return x;
            }
            if fx < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            if hi - lo <= QUANTILE_TOL {
                break;
            }
            let dens = self.pdf(x);
            let newton = x - fx / dens;
            let next = if dens > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - x).abs() <= 0.25 * QUANTILE_TOL {
                x = next;
                break;
            }
            x = next;
        }
        x
    }

    /// Quantiles at the midpoint nodes `(k + 1/2) / Q`.
    pub fn quantile_table(&self, quad_points: usize) -> Result<QuantileTable> {
        if quad_points < MIN_QUAD_POINTS {
            return Err(Error::config(
                "quad_points",
                format!("need at least {MIN_QUAD_POINTS} quadrature nodes, got {quad_points}"),
            ));
        }
        let law = self.collapsed();
        let values = (0..quad_points)
            .map(|k| law.quantile((k as f64 + 0.5) / quad_points as f64))
            .collect();
        Ok(QuantileTable { values })
    }
}

/// Quantile function sampled at midpoint nodes; reusable across many
/// empirical measures compared against the same law.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileTable {
    values: Vec<f64>,
}

impl QuantileTable {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(∫_0^1 |F^{-1}_a(q) - F^{-1}_b(q)|^p dq)^{1/p}` by the midpoint rule,
    /// with `F^{-1}_a` the quantile function of the sorted sample.
    pub fn wp_to_sorted(&self, sorted: &[f64], p: u32) -> f64 {
        let n = sorted.len();
        let q_count = self.values.len();
        let mut acc = 0.0;
        for (k, &y) in self.values.iter().enumerate() {
            let q = (k as f64 + 0.5) / q_count as f64;
            let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
            let diff = (sorted[idx] - y).abs();
            acc += if p == 1 { diff } else { diff.powi(p as i32) };
        }
        let mean = acc / q_count as f64;
        if p == 1 {
            mean
        } else {
            mean.powf(1.0 / p as f64)
        }
    }

    /// Same quadrature between two tabulated laws of equal resolution.
    pub fn wp_to_table(&self, other: &QuantileTable, p: u32) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Domain("quantile tables differ in resolution".into()));
        }
        let mean = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs().powi(p as i32))
            .sum::<f64>()
            / self.len() as f64;
        Ok(mean.powf(1.0 / p as f64))
    }
}
