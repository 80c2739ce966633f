//! Moment generating function checks: the sub-Gaussian lemma for centered
//! scalar laws, and Hoeffding's lemma for rows of a sampled graphon.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphon::{sample_interaction, Graphon, SamplingMode};
use crate::rng;

/// Built-in centered laws on the line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarLaw {
    /// Uniform on `{-1, +1}`.
    Rademacher,
    Uniform { half_width: f64 },
    /// `N(0, sigma^2)` conditioned on `[-bound, bound]`.
    TruncatedGaussian { sigma: f64, bound: f64 },
    PointMass0,
}

const PANELS: usize = 64;
const ORDER: usize = 20;

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on
/// the Legendre polynomial.
pub fn gauss_legendre(k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; k];
    let mut weights = vec![0.0; k];
    for i in 0..k.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (k as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=k {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = k as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[k - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[k - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre integral of `f` over `[a, b]`.
fn integrate(f: &impl Fn(f64) -> f64, a: f64, b: f64, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let h = (b - a) / PANELS as f64;
    let mut total = 0.0;
    for p in 0..PANELS {
        let mid = a + (p as f64 + 0.5) * h;
        total += rule
            .0
            .iter()
            .zip(&rule.1)
            .map(|(x, w)| w * f(mid + 0.5 * h * x))
            .sum::<f64>()
            * 0.5
            * h;
    }
    total
}

impl ScalarLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ScalarLaw::Uniform { half_width } if !(half_width > 0.0) => {
                Err(Error::config("law.half_width", "must be > 0"))
            }
            ScalarLaw::TruncatedGaussian { sigma, bound } if !(sigma > 0.0 && bound > 0.0) => {
                Err(Error::config("law", "sigma and bound must be > 0"))
            }
            _ => Ok(()),
        }
    }

    /// `E g(Y)` exactly for atoms and by quadrature for densities.
    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        let rule = gauss_legendre(ORDER);
        match *self {
            ScalarLaw::Rademacher => 0.5 * (g(-1.0) + g(1.0)),
            ScalarLaw::PointMass0 => g(0.0),
            ScalarLaw::Uniform { half_width: h } => integrate(&g, -h, h, &rule) / (2.0 * h),
            ScalarLaw::TruncatedGaussian { sigma, bound } => {
                let dens = |y: f64| (-0.5 * (y / sigma) * (y / sigma)).exp();
                let z = integrate(&dens, -bound, bound, &rule);
                integrate(&|y| g(y) * dens(y), -bound, bound, &rule) / z
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubGaussianReport {
    pub a: f64,
    /// `E exp(|Y|^2 / a)`, required to be at most 2.
    pub precondition_value: f64,
    pub lambdas: Vec<f64>,
    /// `log E e^{λY} - (5a/2) λ^2` per grid point.
    pub margins: Vec<f64>,
    pub max_margin: f64,
    /// Margin at the grid point of largest `|λ|`.
    pub margin_at_lambda_max: f64,
}

/// Checks `E e^{λY} <= exp((5a/2) λ^2)` on a grid of `λ` for a centered law
/// with `E e^{|Y|^2/a} <= 2`.
pub fn subgaussian_bound_check(law: &ScalarLaw, a: f64, lambdas: &[f64]) -> Result<SubGaussianReport> {
    law.validate()?;
    if !(a > 0.0) {
        return Err(Error::Domain(format!("a = {a} must be > 0")));
    }
    if lambdas.is_empty() {
        return Err(Error::Domain("lambda grid is empty".into()));
    }
    let mean = law.expect(|y| y);
    if mean.abs() > 1e-12 {
        return Err(Error::Precondition(format!("law is not centered (mean {mean})")));
    }
    let pre = law.expect(|y| (y * y / a).exp());
    if !(pre <= 2.0 * (1.0 + 1e-12)) {
        return Err(Error::Precondition(format!(
            "E exp(|Y|^2 / a) = {pre} exceeds 2 for a = {a}"
        )));
    }
    let margins: Vec<f64> = lambdas
        .iter()
        .map(|&l| law.expect(|y| (l * y).exp()).ln() - 2.5 * a * l * l)
        .collect();
    let max_margin = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (idx, _) = lambdas
        .iter()
        .enumerate()
        .fold((0, -1.0), |best, (i, l)| if l.abs() > best.1 { (i, l.abs()) } else { best });
    Ok(SubGaussianReport {
        a,
        precondition_value: pre,
        lambdas: lambdas.to_vec(),
        margin_at_lambda_max: margins[idx],
        margins,
        max_margin,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingReport {
    pub n: usize,
    pub row: usize,
    pub replications: usize,
    pub thetas: Vec<f64>,
    /// Monte Carlo `E exp(±(θ/n) Σ_j (ξ_ij - G_ij))`, sign `+` then `-`.
    pub lhs: Vec<[f64; 2]>,
    pub standard_errors: Vec<[f64; 2]>,
    pub rhs: Vec<f64>,
    /// Worst of `lhs - rhs - 3 SE` over both signs, per `θ`.
    pub margins: Vec<f64>,
    pub max_margin: f64,
}

/// Monte Carlo check of `E exp(±(θ/n) Σ_j (ξ_ij - G_ij)) <= exp(θ^2 / 8n)`
/// over `replications` independent Bernoulli matrices.
pub fn hoeffding_mgf_check(
    g: &Graphon,
    n: usize,
    row: usize,
    thetas: &[f64],
    replications: usize,
    seed: u64,
) -> Result<HoeffdingReport> {
    if row >= n {
        return Err(Error::Domain(format!("row {row} is out of range for n = {n}")));
    }
    if replications < 2 {
        return Err(Error::config("replications", "need at least 2"));
    }
    let centered: Vec<f64> = (0..replications as u64)
        .into_par_iter()
        .map(|r| {
            let xi = sample_interaction(g, n, SamplingMode::Bernoulli, rng::child(seed, rng::tag::MGF, r))?;
            Ok((0..n).map(|j| xi.get(row, j) - xi.mean_entry(row, j)).sum::<f64>() / n as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let rf = replications as f64;
    let mut report = HoeffdingReport {
        n,
        row,
        replications,
        thetas: thetas.to_vec(),
        lhs: Vec::new(),
        standard_errors: Vec::new(),
        rhs: Vec::new(),
        margins: Vec::new(),
        max_margin: f64::NEG_INFINITY,
    };
    for &theta in thetas {
        let rhs = (theta * theta / (8.0 * n as f64)).exp();
        let mut lhs = [0.0; 2];
        let mut se = [0.0; 2];
        for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
            let vals: Vec<f64> = centered.iter().map(|s| (sign * theta * s).exp()).collect();
            let mean = vals.iter().sum::<f64>() / rf;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (rf - 1.0);
            lhs[k] = mean;
            se[k] = (var / rf).sqrt();
        }
        let margin = (0..2).map(|k| lhs[k] - rhs - 3.0 * se[k]).fold(f64::NEG_INFINITY, f64::max);
        report.lhs.push(lhs);
        report.standard_errors.push(se);
        report.rhs.push(rhs);
        report.margins.push(margin);
        report.max_margin = report.max_margin.max(margin);
    }
    Ok(report)
}
