//! Replicated particle simulations and the exceedance estimators built on
//! them.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MarginalTrend, TailEstimate, TailPoint};
use crate::dynamics::{kappa_of, DriftSpec, InitialLaw};
use crate::error::{Error, Result};
use crate::graphon::{Graphon, SamplingMode};
use crate::limitlaw::{grid_index, HatMu, LimitLaw};
use crate::ot::{w1_presorted, wp_between_mixtures, wp_presorted, Gaussian, MixtureLaw1D, QuantileTable};
use crate::rng;
use crate::simulate::{run_finite, SimOptions};

/// Everything needed to simulate the finite system.
#[derive(Clone, Debug)]
pub struct ParticleSetup {
    pub graphon: Graphon,
    pub drift: DriftSpec,
    pub init: InitialLaw,
    pub mode: SamplingMode,
    pub dt: f64,
    pub undirected: bool,
}

#[derive(Clone, Debug)]
pub struct TailOptions {
    pub n_values: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    pub quad_points: usize,
    pub d_prime: usize,
}

impl TailOptions {
    fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return Err(Error::config("n_values", "need at least one n >= 1"));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::config("epsilons", "need at least one epsilon >= 0"));
        }
        if self.replications == 0 {
            return Err(Error::config("replications", "must be >= 1"));
        }
        Ok(())
    }
}

/// A one-dimensional reference law for `W_1` comparisons.
#[derive(Clone, Debug)]
pub enum Reference {
    Table(QuantileTable),
    Sorted(Vec<f64>),
}

impl Reference {
    pub fn from_hat_mu(h: HatMu, quad_points: usize) -> Result<Self> {
        Ok(match h {
            HatMu::Mixture(m) => Reference::Table(m.quantile_table(quad_points)?),
            HatMu::Pooled(e) => Reference::Sorted(e.sorted_1d()?),
        })
    }

    pub fn from_mixture(m: &MixtureLaw1D, quad_points: usize) -> Result<Self> {
        Ok(Reference::Table(m.quantile_table(quad_points)?))
    }

    /// `W_1` to a sorted sample.
    pub fn w1(&self, sorted: &[f64]) -> f64 {
        match self {
            Reference::Table(t) => t.wp_to_sorted(sorted, 1),
            Reference::Sorted(s) => wp_presorted(sorted, s, 1),
        }
    }

    /// `W_1` between two references.
    pub fn w1_to(&self, other: &Reference) -> f64 {
        match (self, other) {
            (Reference::Table(a), Reference::Table(b)) if a.len() == b.len() => w1_presorted(a.values(), b.values()),
            _ => wp_presorted(self.as_sorted(), other.as_sorted(), 1),
        }
    }

    fn as_sorted(&self) -> &[f64] {
        match self {
            Reference::Table(t) => t.values(),
            Reference::Sorted(s) => s,
        }
    }
}

pub fn replication_seed(seed: u64, n: usize, r: usize) -> u64 {
    rng::hash(seed, &[rng::tag::REPLICATION, n as u64, r as u64])
}

/// `W_1(ν^n_t, ref_t)` at each of `times`, for every replication:
/// `out[r][k]`.
pub fn marginal_statistics(
    setup: &ParticleSetup,
    n: usize,
    times: &[f64],
    refs: &[Reference],
    replications: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if setup.drift.dim() != 1 {
        return Err(Error::Unsupported("tail estimates are implemented for d = 1".into()));
    }
    if times.is_empty() || times.len() != refs.len() {
        return Err(Error::Domain("need one reference law per time".into()));
    }
    let horizon = times.iter().copied().fold(0.0, f64::max);
    (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut opts = SimOptions::new(n, setup.mode, setup.dt, horizon, times.to_vec(), replication_seed(seed, n, r));
            opts.undirected = setup.undirected;
            let snaps = run_finite(&setup.graphon, &setup.drift, &setup.init, &opts)?;
            // snapshots come back sorted by time; map them onto the caller's order
            times
                .iter()
                .zip(refs)
                .map(|(&t, reference)| {
                    let k = snaps
                        .times
                        .iter()
                        .position(|&s| (s - t).abs() <= 1e-9 * t.max(setup.dt))
                        .ok_or_else(|| Error::Domain(format!("no snapshot at t = {t}")))?;
                    Ok(reference.w1(&snaps.states[k].sorted_1d()?))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

fn limit_references(limit: &LimitLaw, times: &[f64], quad_points: usize) -> Result<Vec<Reference>> {
    times
        .par_iter()
        .map(|&t| Reference::from_hat_mu(limit.hat_mu(t)?, quad_points))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TailRun {
    pub estimates: Vec<TailEstimate>,
    pub times: Vec<f64>,
    /// `stats[n_index][replication][time_index]`.
    pub stats: Vec<Vec<Vec<f64>>>,
    /// Fitted `C` in `W_1(μ̂_t, μ̂_s) <= C |t - s|^{1/2}` on the save grid.
    pub time_regularity: Option<f64>,
}

fn annotate(est: &mut TailEstimate, setup: &ParticleSetup, horizon: f64) {
    est.mode = Some(setup.mode);
    est.dt = Some(setup.dt);
    est.horizon = Some(horizon);
    est.b_at_zero_bounded = Some(setup.drift.b_at_zero_bounded());
}

/// `P(sup_{t <= T} W_1(ν^n_t, μ̂_t) > ε)` with the supremum taken over the
/// save grid `k · save_every · dt`.
pub fn estimate_tail_sup(
    setup: &ParticleSetup,
    limit: &LimitLaw,
    horizon: f64,
    save_every: usize,
    opts: &TailOptions,
) -> Result<TailRun> {
    opts.validate()?;
    let steps = grid_index(horizon, setup.dt).map_err(|_| Error::config("T", "horizon must be a multiple of dt"))?;
    let stride = save_every.max(1);
    let times: Vec<f64> = (0..=steps).step_by(stride).map(|s| s as f64 * setup.dt).collect();
    let refs = limit_references(limit, &times, opts.quad_points)?;

    // regularity of the averaged limit law on the save grid
    let mut c_reg: f64 = 0.0;
    for a in 0..refs.len() {
        for b in a + 1..refs.len().min(a + 5) {
            let gap = times[b] - times[a];
            c_reg = c_reg.max(refs[a].w1_to(&refs[b]) / gap.sqrt());
        }
    }
    let h = stride as f64 * setup.dt;

    let stats = opts
        .n_values
        .iter()
        .map(|&n| marginal_statistics(setup, n, &times, &refs, opts.replications, opts.seed))
        .collect::<Result<Vec<_>>>()?;
    let sups: Vec<Vec<f64>> = stats
        .iter()
        .map(|per_n| per_n.iter().map(|row| row.iter().copied().fold(0.0, f64::max)).collect())
        .collect();
    let estimates = opts
        .epsilons
        .iter()
        .map(|&eps| {
            let points = opts
                .n_values
                .iter()
                .zip(&sups)
                .map(|(&n, s)| TailPoint::from_statistics(n, eps, None, s))
                .collect();
            let mut est = TailEstimate::new("sup", eps, opts.d_prime, points);
            annotate(&mut est, setup, horizon);
            if c_reg * h.sqrt() > eps / 10.0 {
                est.flags.push(format!(
                    "save grid too coarse: C sqrt(h) = {} exceeds epsilon / 10",
                    c_reg * h.sqrt()
                ));
            }
            est
        })
        .collect();
    Ok(TailRun {
        estimates,
        times,
        stats,
        time_regularity: Some(c_reg),
    })
}

fn trend(n: usize, times: &[f64], points: &[TailPoint]) -> MarginalTrend {
    let p: Vec<f64> = points.iter().map(|q| q.p_hat).collect();
    let r = points.first().map_or(1, |q| q.replications);
    let half = times.len() / 2;
    let max_late = p[half..].iter().copied().fold(0.0, f64::max);
    let tm = times.iter().sum::<f64>() / times.len() as f64;
    let pm = p.iter().sum::<f64>() / p.len() as f64;
    let sxx: f64 = times.iter().map(|t| (t - tm) * (t - tm)).sum();
    let sxy: f64 = times.iter().zip(&p).map(|(t, q)| (t - tm) * (q - pm)).sum();
    MarginalTrend {
        n,
        max_p_hat: p.iter().copied().fold(0.0, f64::max),
        first_p_hat: p[0],
        max_late_p_hat: max_late,
        slope: if sxx > 0.0 { sxy / sxx } else { 0.0 },
        stable: max_late <= 1.5 * p[0].max(5.0 / r as f64),
    }
}

/// `P(W_1(ν^n_t, μ̂_t) > ε)` for each `t` in `times`.
pub fn estimate_tail_marginal(
    setup: &ParticleSetup,
    limit: &LimitLaw,
    times: &[f64],
    opts: &TailOptions,
) -> Result<TailRun> {
    opts.validate()?;
    let refs = limit_references(limit, times, opts.quad_points)?;
    let stats = opts
        .n_values
        .iter()
        .map(|&n| marginal_statistics(setup, n, times, &refs, opts.replications, opts.seed))
        .collect::<Result<Vec<_>>>()?;
    let horizon = times.iter().copied().fold(0.0, f64::max);
    let estimates = opts
        .epsilons
        .iter()
        .map(|&eps| {
            let mut points = Vec::new();
            let mut trends = Vec::new();
            for (&n, per_n) in opts.n_values.iter().zip(&stats) {
                let per_t: Vec<TailPoint> = times
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| {
                        let col: Vec<f64> = per_n.iter().map(|row| row[k]).collect();
                        TailPoint::from_statistics(n, eps, Some(t), &col)
                    })
                    .collect();
                trends.push(trend(n, times, &per_t));
                points.extend(per_t);
            }
            let mut est = TailEstimate::new("marginal", eps, opts.d_prime, points);
            annotate(&mut est, setup, horizon);
            if trends.iter().any(|t| !t.stable) {
                est.flags.push("upward drift in p_hat(t)".into());
            }
            est.trends = trends;
            est
        })
        .collect();
    Ok(TailRun {
        estimates,
        times: times.to_vec(),
        stats,
        time_regularity: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub kappa: f64,
    pub decay_times: Vec<f64>,
    /// `W_2(μ̂_t, μ̂_∞)` on `decay_times`.
    pub w2_curve: Vec<f64>,
    /// `-slope` of the least-squares line through `log W_2`.
    pub decay_rate: f64,
    pub decay_r2: f64,
    /// `max_t W_2(μ̂_t, μ̂_∞) e^{κ t / 2}`.
    pub c_hat: f64,
    pub eps0_hat: f64,
    pub t0_hat: f64,
    /// `T̂_0 log(ε̂_0 / ε)` rounded up to the time grid (0 when `ε >= ε̂_0`).
    pub t_star: f64,
    /// Exceedance of `W_1(ν^n_t, μ̂_∞)` at `t = 1` and at `t_star`.
    pub estimate: TailEstimate,
}

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

/// Decay of `W_2(μ̂_t, μ̂_∞)` and the exceedance probability of
/// `W_1(ν^n_t, μ̂_∞)` after the fitted burn-in time.
#[allow(clippy::too_many_arguments)]
pub fn invariant_experiment(
    setup: &ParticleSetup,
    limit: &LimitLaw,
    n: usize,
    epsilon: f64,
    fit_horizon: f64,
    fit_stride: usize,
    replications: usize,
    seed: u64,
    quad_points: usize,
) -> Result<InvariantReport> {
    let kappa = kappa_of(&setup.drift);
    if !(kappa > 0.0) {
        return Err(Error::Precondition(format!(
            "invariant experiment needs a dissipative drift (kappa = {kappa})"
        )));
    }
    let stationary = limit.hat_mu_stationary()?;
    let last = limit.step_of(fit_horizon)?;
    let decay_steps: Vec<usize> = (0..=last).step_by(fit_stride.max(1)).collect();
    let decay_times: Vec<f64> = decay_steps.iter().map(|&s| s as f64 * limit.dt()).collect();
    let w2_curve = decay_times
        .par_iter()
        .map(|&t| wp_between_mixtures(&limit.hat_mu_mixture(t)?, &stationary, 2, quad_points))
        .collect::<Result<Vec<f64>>>()?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = decay_times
        .iter()
        .zip(&w2_curve)
        .filter(|(_, w)| **w > 1e-300)
        .map(|(t, w)| (*t, w.ln()))
        .unzip();
    if xs.len() < 3 {
        return Err(Error::InsufficientData("decay curve vanishes too early to fit".into()));
    }
    let (slope, decay_r2) = linear_fit(&xs, &ys);
    let c_hat = decay_times
        .iter()
        .zip(&w2_curve)
        .map(|(t, w)| w * (0.5 * kappa * t).exp())
        .fold(0.0, f64::max);
    let eps0_hat = 2.0 * c_hat;
    let t0_hat = 2.0 / kappa;
    let raw = if epsilon > 0.0 { t0_hat * (eps0_hat / epsilon).ln().max(0.0) } else { f64::INFINITY };
    if !raw.is_finite() {
        return Err(Error::Domain("epsilon must be > 0".into()));
    }
    let t_star = (raw / setup.dt - 1e-9).ceil().max(0.0) * setup.dt;

    let reference = Reference::from_mixture(&stationary, quad_points)?;
    let times = vec![1.0, t_star];
    let stats = marginal_statistics(setup, n, &times, &[reference.clone(), reference], replications, seed)?;
    let points = times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let col: Vec<f64> = stats.iter().map(|row| row[k]).collect();
            TailPoint::from_statistics(n, epsilon, Some(t), &col)
        })
        .collect();
    let mut estimate = TailEstimate::new("invariant", epsilon, 0, points);
    annotate(&mut estimate, setup, t_star.max(1.0));
    Ok(InvariantReport {
        kappa,
        decay_times,
        w2_curve,
        decay_rate: -slope,
        decay_r2,
        c_hat,
        eps0_hat,
        t0_hat,
        t_star,
        estimate,
    })
}

/// Independent, not necessarily identical laws `μ_i`, `i = 1..n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IndepFamily {
    /// `μ_i = N(intercept + slope · i/n, variance)`.
    Gaussian { intercept: f64, slope: f64, variance: f64 },
    PointMass { location: f64 },
}

impl IndepFamily {
    fn mixture(&self, n: usize) -> Result<Option<MixtureLaw1D>> {
        match *self {
            IndepFamily::Gaussian {
                intercept,
                slope,
                variance,
            } => {
                let comps = (1..=n)
                    .map(|i| Gaussian::new(intercept + slope * i as f64 / n as f64, variance))
                    .collect();
                Ok(Some(MixtureLaw1D::uniform(comps)?.collapsed()))
            }
            IndepFamily::PointMass { .. } => Ok(None),
        }
    }

    fn draw(&self, n: usize, seed: u64) -> Vec<f64> {
        match *self {
            IndepFamily::Gaussian {
                intercept,
                slope,
                variance,
            } => {
                let mut r = rng::stream(seed, &[rng::tag::SAMPLE]);
                let sd = variance.sqrt();
                (1..=n)
                    .map(|i| intercept + slope * i as f64 / n as f64 + sd * r.sample::<f64, _>(StandardNormal))
                    .collect()
            }
            IndepFamily::PointMass { location } => vec![location; n],
        }
    }
}

/// `P(W_p(μ̂^n, μ^n) > ε)` where `μ̂^n` is the empirical measure of
/// independent `X_i ~ μ_i` and `μ^n = (1/n) Σ μ_i`.
pub fn indep_empirical_tail(
    family: &IndepFamily,
    p_order: u32,
    opts: &TailOptions,
) -> Result<(Vec<TailEstimate>, Vec<Vec<f64>>)> {
    opts.validate()?;
    if p_order != 1 && p_order != 2 {
        return Err(Error::config("p_order", "must be 1 or 2"));
    }
    if let IndepFamily::Gaussian { variance, .. } = family {
        if !(*variance > 0.0) {
            return Err(Error::config("family.variance", "must be > 0"));
        }
    }
    let stats = opts
        .n_values
        .iter()
        .map(|&n| {
            let table = match family.mixture(n)? {
                Some(m) => Some(m.quantile_table(opts.quad_points)?),
                None => None,
            };
            Ok((0..opts.replications)
                .into_par_iter()
                .map(|r| {
                    let mut x = family.draw(n, replication_seed(opts.seed, n, r));
                    x.sort_by(f64::total_cmp);
                    // a point-mass family matches its sample exactly
                    table.as_ref().map_or(0.0, |t| t.wp_to_sorted(&x, p_order))
                })
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let estimates = opts
        .epsilons
        .iter()
        .map(|&eps| {
            let points = opts
                .n_values
                .iter()
                .zip(&stats)
                .map(|(&n, s)| TailPoint::from_statistics(n, eps, None, s))
                .collect();
            let mut est = TailEstimate::new(&format!("indep_w{p_order}"), eps, opts.d_prime, points);
            if p_order == 2 {
                est.reference_coefficient = Some(3.0 - 2.0 * 2f64.sqrt());
            }
            est
        })
        .collect();
    Ok((estimates, stats))
}
