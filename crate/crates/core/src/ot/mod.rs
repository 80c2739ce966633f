//! Wasserstein distances between empirical measures and reference laws.

pub mod assignment;
pub mod mixture;

pub use mixture::{Gaussian, MixtureLaw1D, QuantileTable, DEFAULT_QUAD_POINTS};

use crate::error::{Error, Result};

/// Largest point count accepted by [`wp_assignment`] by default.
pub const DEFAULT_ASSIGNMENT_CAP: usize = 4096;

/// Equally weighted point cloud in `R^d`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::Domain(
                "empirical measure needs a nonempty point list of consistent dimension".into(),
            ));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("empirical measure has non-finite points".into()));
        }
        Ok(Self { dim, points })
    }

    pub fn from_1d(points: Vec<f64>) -> Result<Self> {
        Self::new(1, points)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn translated(&self, shift: &[f64]) -> Self {
        let mut points = self.points.clone();
        for p in points.chunks_exact_mut(self.dim) {
            p.iter_mut().zip(shift).for_each(|(x, s)| *x += s);
        }
        Self { dim: self.dim, points }
    }

    /// Sorted coordinates of a one-dimensional measure.
    pub fn sorted_1d(&self) -> Result<Vec<f64>> {
        self.require_1d()?;
        let mut v = self.points.clone();
        v.sort_by(f64::total_cmp);
        Ok(v)
    }

    fn require_1d(&self) -> Result<()> {
        if self.dim != 1 {
            return Err(Error::Domain(format!(
                "operation needs d = 1, measure has d = {}",
                self.dim
            )));
        }
        Ok(())
    }
}

fn check_order(p: u32) -> Result<()> {
    if p == 1 || p == 2 {
        Ok(())
    } else {
        Err(Error::Domain(format!("W_p supports p in {{1, 2}}, got {p}")))
    }
}

/// Exact `W_1` on the line. Equal sizes pair order statistics; unequal
/// sizes fall back to [`wp_quantile_1d`].
pub fn w1_sorted_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    mu.require_1d()?;
    nu.require_1d()?;
    if mu.len() != nu.len() {
        return wp_quantile_1d(mu, nu, 1);
    }
    let (a, b) = (mu.sorted_1d()?, nu.sorted_1d()?);
    Ok(w1_presorted(&a, &b))
}

/// `W_1` between equal-size sorted samples.
pub fn w1_presorted(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Exact `W_p` on the line for arbitrary sizes: integrates the difference of
/// the two step quantile functions over the merged breakpoints.
pub fn wp_quantile_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: u32) -> Result<f64> {
    check_order(p)?;
    Ok(wp_presorted(&mu.sorted_1d()?, &nu.sorted_1d()?, p))
}

/// [`wp_quantile_1d`] on already sorted, nonempty samples.
pub fn wp_presorted(a: &[f64], b: &[f64], p: u32) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut q = 0.0f64;
    let mut acc = 0.0;
    while i < n && j < m {
        // next breakpoints (i + 1)/n and (j + 1)/m compared exactly
        let (ni, mj) = ((i + 1) * m, (j + 1) * n);
        let next = if ni <= mj { (i + 1) as f64 / n as f64 } else { (j + 1) as f64 / m as f64 };
        acc += (next - q) * (a[i] - b[j]).abs().powi(p as i32);
        q = next;
        if ni <= mj {
            i += 1;
        }
        if mj <= ni {
            j += 1;
        }
    }
    acc.powf(1.0 / p as f64)
}

/// Exact `W_p` between equal-size measures in any dimension via a minimum
/// cost perfect matching on `|x_i - y_j|^p`.
pub fn wp_assignment(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: u32) -> Result<f64> {
    wp_assignment_capped(mu, nu, p, DEFAULT_ASSIGNMENT_CAP)
}

pub fn wp_assignment_capped(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    p: u32,
    cap: usize,
) -> Result<f64> {
    check_order(p)?;
    if mu.len() != nu.len() || mu.dim() != nu.dim() {
        return Err(Error::Domain(format!(
            "assignment needs equal sizes and dimensions, got {}x{} and {}x{}",
            mu.len(),
            mu.dim(),
            nu.len(),
            nu.dim()
        )));
    }
    let n = mu.len();
    if n > cap {
        return Err(Error::Domain(format!("n = {n} exceeds the assignment cap {cap}")));
    }
    let cost = |i: usize, j: usize| {
        let d2: f64 = mu
            .point(i)
            .iter()
            .zip(nu.point(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        if p == 2 {
            d2
        } else {
            d2.sqrt()
        }
    };
    let (_, total) = assignment::solve(n, cost);
    Ok((total.max(0.0) / n as f64).powf(1.0 / p as f64))
}

/// `W_p(mu, law)` by midpoint quadrature over `quad_points` quantile nodes.
pub fn wp_vs_mixture_1d(
    mu: &EmpiricalMeasure,
    law: &MixtureLaw1D,
    p: u32,
    quad_points: usize,
) -> Result<f64> {
    check_order(p)?;
    let sorted = mu.sorted_1d()?;
    let table = law.quantile_table(quad_points)?;
    Ok(table.wp_to_sorted(&sorted, p))
}

pub fn w1_vs_mixture_1d(mu: &EmpiricalMeasure, law: &MixtureLaw1D, quad_points: usize) -> Result<f64> {
    wp_vs_mixture_1d(mu, law, 1, quad_points)
}

/// Closed-form `W_2` between one-dimensional Gaussians.
pub fn w2_gaussian_1d(g1: &Gaussian, g2: &Gaussian) -> Result<f64> {
    if !(g1.variance > 0.0 && g2.variance > 0.0) {
        return Err(Error::Domain("Gaussian variances must be > 0".into()));
    }
    let dm = g1.mean - g2.mean;
    let ds = g1.sd() - g2.sd();
    Ok((dm * dm + ds * ds).sqrt())
}

/// `W_p` between two mixtures: closed form when both are single Gaussians
/// and `p = 2`, otherwise quantile quadrature.
pub fn wp_between_mixtures(a: &MixtureLaw1D, b: &MixtureLaw1D, p: u32, quad_points: usize) -> Result<f64> {
    check_order(p)?;
    let (ca, cb) = (a.collapsed(), b.collapsed());
    if p == 2 && ca.components().len() == 1 && cb.components().len() == 1 {
        return w2_gaussian_1d(&ca.components()[0], &cb.components()[0]);
    }
    ca.quantile_table(quad_points)?
        .wp_to_table(&cb.quantile_table(quad_points)?, p)
}
