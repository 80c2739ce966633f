//! Monte Carlo estimates of exceedance probabilities `P(W_1 > ε)` and the
//! moment-generating-function checks used by the concentration bounds.

pub mod mgf;
pub mod tails;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mgf::{hoeffding_mgf_check, subgaussian_bound_check, HoeffdingReport, ScalarLaw, SubGaussianReport};
pub use tails::{
    estimate_tail_marginal, estimate_tail_sup, indep_empirical_tail, invariant_experiment, IndepFamily,
    InvariantReport, ParticleSetup, Reference, TailOptions,
};

/// Two-sided 95% normal quantile.
pub const WILSON_Z: f64 = 1.959963984540054;

/// Wilson score interval for `k` successes in `r` trials.
pub fn wilson_interval(k: usize, r: usize, z: f64) -> (f64, f64) {
    if r == 0 {
        return (0.0, 1.0);
    }
    let (rf, p) = (r as f64, k as f64 / r as f64);
    let z2 = z * z;
    let denom = 1.0 + z2 / rf;
    let center = (p + z2 / (2.0 * rf)) / denom;
    let half = z * (p * (1.0 - p) / rf + z2 / (4.0 * rf * rf)).sqrt() / denom;
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k == r { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub n: usize,
    pub epsilon: f64,
    /// `None` for a supremum over the saved times.
    pub t: Option<f64>,
    pub replications: usize,
    pub exceed_count: usize,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `p_hat < 5 / R`: only the upper confidence limit is informative.
    pub censored: bool,
}

impl TailPoint {
    pub fn from_counts(n: usize, epsilon: f64, t: Option<f64>, exceed_count: usize, replications: usize) -> Self {
        let p_hat = exceed_count as f64 / replications as f64;
        let (ci_low, ci_high) = wilson_interval(exceed_count, replications, WILSON_Z);
        Self {
            n,
            epsilon,
            t,
            replications,
            exceed_count,
            p_hat,
            ci_low,
            ci_high,
            censored: p_hat < 5.0 / replications as f64,
        }
    }

    /// Counts exceedances `stat > epsilon`.
    pub fn from_statistics(n: usize, epsilon: f64, t: Option<f64>, stats: &[f64]) -> Self {
        let k = stats.iter().filter(|&&s| s > epsilon).count();
        Self::from_counts(n, epsilon, t, k, stats.len())
    }

    pub fn neg_log_p(&self) -> f64 {
        -self.p_hat.ln()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope_n_eps2: f64,
    pub intercept_n_eps2: f64,
    pub r2_n_eps2: f64,
    pub slope_sqrtn_eps: f64,
    pub intercept_sqrtn_eps: f64,
    pub r2_sqrtn_eps: f64,
    pub points_used: usize,
    /// Neither rate variable shows a positive slope.
    pub non_decaying: bool,
}

/// Weighted least squares `y = a + b x`; returns `(b, a, R²)`.
fn wls(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for ((xi, yi), wi) in x.iter().zip(y).zip(w) {
        sxx += wi * (xi - mx) * (xi - mx);
        sxy += wi * (xi - mx) * (yi - my);
        syy += wi * (yi - my) * (yi - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    // a constant response has nothing to explain
    let r2 = if syy > 1e-12 * (1.0 + my * my) * sw {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (slope, intercept, r2)
}

/// Regresses `-log p̂` on `n ε²` and on `√n ε` with weights `R p̂ / (1 - p̂)`,
/// the inverse delta-method variance of `log p̂`. Uses points with
/// `p̂ ∈ (0, 1)` only.
pub fn rate_fit(points: &[TailPoint]) -> Result<RateFit> {
    let usable: Vec<&TailPoint> = points.iter().filter(|p| p.p_hat > 0.0 && p.p_hat < 1.0).collect();
    if usable.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "rate fit needs at least 3 points with 0 < p_hat < 1, got {}",
            usable.len()
        )));
    }
    let y: Vec<f64> = usable.iter().map(|p| p.neg_log_p()).collect();
    let w: Vec<f64> = usable
        .iter()
        .map(|p| p.replications as f64 * p.p_hat / (1.0 - p.p_hat))
        .collect();
    let x1: Vec<f64> = usable.iter().map(|p| p.n as f64 * p.epsilon * p.epsilon).collect();
    let x2: Vec<f64> = usable.iter().map(|p| (p.n as f64).sqrt() * p.epsilon).collect();
    let (s1, a1, r1) = wls(&x1, &y, &w);
    let (s2, a2, r2) = wls(&x2, &y, &w);
    Ok(RateFit {
        slope_n_eps2: s1,
        intercept_n_eps2: a1,
        r2_n_eps2: r1,
        slope_sqrtn_eps: s2,
        intercept_sqrtn_eps: a2,
        r2_sqrtn_eps: r2,
        points_used: usable.len(),
        non_decaying: !(s1 > 1e-12 || s2 > 1e-12),
    })
}

/// Summary of the time profile of marginal exceedance probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalTrend {
    pub n: usize,
    pub max_p_hat: f64,
    pub first_p_hat: f64,
    /// Largest `p̂(t)` over the later half of the time list.
    pub max_late_p_hat: f64,
    /// OLS slope of `p̂` against `t`.
    pub slope: f64,
    /// `max_late <= 1.5 max(p̂(first), 5 / R)`.
    pub stable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub kind: String,
    pub epsilon: f64,
    pub mode: Option<crate::graphon::SamplingMode>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    /// Exponent `d'` of the sample-size threshold `n >= N_0 max(ε^{-(d'+2)}, 1)`;
    /// recorded, not certified.
    pub d_prime: usize,
    pub points: Vec<TailPoint>,
    pub rate_fit: Option<RateFit>,
    pub trends: Vec<MarginalTrend>,
    /// Reference rate coefficient, when the theory supplies one.
    pub reference_coefficient: Option<f64>,
    /// Whether `b(., 0)` is bounded (the `n ε²` regime applies).
    pub b_at_zero_bounded: Option<bool>,
    pub flags: Vec<String>,
}

impl TailEstimate {
    pub fn new(kind: &str, epsilon: f64, d_prime: usize, points: Vec<TailPoint>) -> Self {
        let mut est = Self {
            kind: kind.to_string(),
            epsilon,
            mode: None,
            dt: None,
            horizon: None,
            d_prime,
            points,
            rate_fit: None,
            trends: Vec::new(),
            reference_coefficient: None,
            b_at_zero_bounded: None,
            flags: Vec::new(),
        };
        est.refresh();
        est
    }

    /// Recomputes the rate fit and flags from the points.
    pub fn refresh(&mut self) {
        self.flags.clear();
        if self.points.iter().all(|p| p.exceed_count == 0) {
            self.flags.push("inconclusive: p_hat = 0 everywhere (epsilon too large)".into());
        } else if self.points.iter().all(|p| p.exceed_count == p.replications) {
            self.flags.push("p_hat = 1 everywhere (epsilon too small)".into());
        }
        let mut ns: Vec<usize> = self.points.iter().map(|p| p.n).collect();
        ns.sort_unstable();
        ns.dedup();
        self.rate_fit = if ns.len() == self.points.len() {
            match rate_fit(&self.points) {
                Ok(fit) => {
                    if fit.non_decaying {
                        self.flags.push("non-decaying: no positive rate slope".into());
                    }
                    Some(fit)
                }
                Err(_) => None,
            }
        } else {
            None
        };
    }

    /// Every point is censored, so no decay can be read off.
    pub fn is_inconclusive(&self) -> bool {
        self.points.iter().all(|p| p.censored)
    }

    pub fn point(&self, n: usize) -> Option<&TailPoint> {
        self.points.iter().find(|p| p.n == n)
    }
}

pub const TAIL_CSV_HEADER: &str = "n,epsilon,t_or_sup,replications,exceed_count,p_hat,ci_low,ci_high";

pub fn write_tail_rows<W: Write>(out: &mut W, points: &[TailPoint]) -> Result<()> {
    for p in points {
        let t = p.t.map_or_else(|| "sup".to_string(), |t| t.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.n, p.epsilon, t, p.replications, p.exceed_count, p.p_hat, p.ci_low, p.ci_high
        )?;
    }
    Ok(())
}

/// Threshold whose empirical exceedance frequency in `stats` is closest to
/// `target` from below: the empirical `(1 - target)` quantile.
pub fn calibrate_epsilon(stats: &[f64], target: f64) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::InsufficientData("no pilot statistics".into()));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Domain(format!("target exceedance {target} is outside (0, 1)")));
    }
    let mut s = stats.to_vec();
    s.sort_by(f64::total_cmp);
    let k = (((1.0 - target) * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
    Ok(s[k])
}

/// `-log p̂` strictly increases along the points and consecutive Wilson
/// intervals are disjoint. Censored zero counts read as `+∞`.
pub fn ci_separated_decreasing(points: &[TailPoint]) -> bool {
    points.windows(2).all(|w| w[1].ci_high < w[0].ci_low && w[1].p_hat < w[0].p_hat)
}
