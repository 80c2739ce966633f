//! A desk-scale self-check suite: small versions of the invariant and oracle
//! checks, each reporting a measured value against a threshold.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::concentration::mgf::{hoeffding_mgf_check, subgaussian_bound_check};
use crate::concentration::tails::marginal_statistics;
use crate::concentration::{estimate_tail_sup, invariant_experiment, ParticleSetup, Reference, TailOptions};
use crate::config::ExperimentConfig;
use crate::dynamics::{check_constants, kappa_of, DriftSpec, InitialLaw};
use crate::error::Result;
use crate::graphon::{Graphon, SamplingMode};
use crate::limitlaw::{solve_linear_gaussian, solve_picard, PicardOptions};
use crate::ot::{w1_sorted_1d, wp_assignment, EmpiricalMeasure};
use crate::rng;
use crate::simulate::{run_coupled, run_finite, CoupledOptions, SimOptions};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Measured quantity; the check passes when it is `<= threshold`.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn le(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }
}

pub const CHECKS_CSV_HEADER: &str = "check,passed,value,threshold";

fn random_cloud<R: Rng>(r: &mut R, n: usize, d: usize) -> EmpiricalMeasure {
    EmpiricalMeasure::new(d, (0..n * d).map(|_| r.random_range(-3.0..3.0)).collect()).expect("valid cloud")
}

fn brute_force(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: u32) -> f64 {
    let n = mu.len();
    let cost = |i: usize, j: usize| {
        let d: f64 = mu.point(i).iter().zip(nu.point(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        d.sqrt().powi(p as i32)
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm
    let mut c = vec![0usize; n];
    best = best.min((0..n).map(|i| cost(i, perm[i])).sum());
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min((0..n).map(|k| cost(k, perm[k])).sum());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best / n as f64).powf(1.0 / p as f64)
}

fn ot_exactness(seed: u64) -> Result<CheckResult> {
    let mut r = rng::stream(seed, &[rng::tag::CHECK, 10]);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = r.random_range(1..=6);
        let d = r.random_range(1..=3);
        let p = if r.random_bool(0.5) { 1 } else { 2 };
        let (a, b) = (random_cloud(&mut r, n, d), random_cloud(&mut r, n, d));
        worst = worst.max((wp_assignment(&a, &b, p)? - brute_force(&a, &b, p)).abs());
    }
    Ok(CheckResult::le("ot_assignment_vs_brute_force", worst, 1e-9, "20 random pairs, n <= 6"))
}

fn sorted_consistency(seed: u64) -> Result<CheckResult> {
    let mut r = rng::stream(seed, &[rng::tag::CHECK, 11]);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = r.random_range(1..=128);
        let (a, b) = (random_cloud(&mut r, n, 1), random_cloud(&mut r, n, 1));
        worst = worst.max((w1_sorted_1d(&a, &b)? - wp_assignment(&a, &b, 1)?).abs());
    }
    Ok(CheckResult::le("w1_sorted_vs_assignment", worst, 1e-9, "20 random pairs, n <= 128"))
}

fn two_block() -> Graphon {
    Graphon::block_constant(vec![0.0, 0.5, 1.0], vec![vec![0.9, 0.3], vec![0.3, 0.7]]).expect("valid graphon")
}

fn picard_vs_gaussian(seed: u64) -> Result<CheckResult> {
    let (g, spec, init) = (two_block(), DriftSpec::linear(2.0, 0.5), InitialLaw::gaussian(1.0, 1.0));
    let (m, particles, horizon) = (16, 500, 0.5);
    let exact = solve_linear_gaussian(&g, &spec, &init, m, 0.01, horizon)?;
    let opts = PicardOptions {
        m,
        particles,
        max_iterations: 20,
        dt: 0.01,
        horizon,
        tol: 1e-3,
        save_every: 50,
        seed,
    };
    let picard = solve_picard(&g, &spec, &init, &opts)?;
    let step = exact.steps();
    let mut worst = f64::NEG_INFINITY;
    for k in 0..m {
        let gauss = exact.node_gaussian(step, k, 0)?;
        let cloud = picard.node_cloud(step, k)?;
        let mean = cloud.iter().sum::<f64>() / cloud.len() as f64;
        let tol = 3.0 * (gauss.variance / particles as f64).sqrt() + 0.02;
        worst = worst.max((mean - gauss.mean).abs() - tol);
    }
    Ok(CheckResult::le(
        "picard_vs_gaussian_flow",
        worst,
        0.0,
        "max over nodes of |mean error| - (3 sqrt(v/M) + 0.02), m = 16, M = 500",
    ))
}

fn particle_means(seed: u64) -> Result<CheckResult> {
    let (g, spec, init) = (two_block(), DriftSpec::linear(2.0, 0.5), InitialLaw::gaussian(1.0, 1.0));
    let (n, reps, dt, horizon) = (400, 10, 0.01, 1.0);
    let exact = solve_linear_gaussian(&g, &spec, &init, 64, dt, horizon)?;
    let grid = exact.grid().clone();
    let step = exact.steps();
    let block_means: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let opts = SimOptions::new(n, SamplingMode::Deterministic, dt, horizon, vec![horizon], rng::child(seed, rng::tag::CHECK, r));
            let s = run_finite(&g, &spec, &init, &opts)?;
            let x = s.states[0].points();
            let mut sums = [0.0; 2];
            let mut counts = [0usize; 2];
            for (i, v) in x.iter().enumerate() {
                let b = g.block_of((i + 1) as f64 / n as f64);
                sums[b] += v;
                counts[b] += 1;
            }
            Ok(vec![sums[0] / counts[0] as f64, sums[1] / counts[1] as f64])
        })
        .collect::<Result<_>>()?;
    let mut worst = f64::NEG_INFINITY;
    for b in 0..2 {
        let range = grid.block_range(0.25 + 0.5 * b as f64);
        let wsum: f64 = grid.weights()[range.clone()].iter().sum();
        let target = range
            .clone()
            .map(|k| Ok(grid.weights()[k] * exact.node_gaussian(step, k, 0)?.mean))
            .sum::<Result<f64>>()?
            / wsum;
        let vals: Vec<f64> = block_means.iter().map(|v| v[b]).collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let se = sd / (reps as f64).sqrt();
        worst = worst.max((mean - target).abs() - (3.0 * se + 0.02));
    }
    Ok(CheckResult::le(
        "particle_block_means",
        worst,
        0.0,
        "max over blocks of |mean error| - (3 SE + 0.02), n = 400, 10 replications",
    ))
}

fn zero_threshold(cfg: &ExperimentConfig) -> Result<CheckResult> {
    let setup = ParticleSetup {
        graphon: Graphon::constant(1.0)?,
        drift: DriftSpec::linear(2.0, 0.5),
        init: InitialLaw::gaussian(1.0, 1.0),
        mode: SamplingMode::Deterministic,
        dt: 0.01,
        undirected: false,
    };
    let limit = solve_linear_gaussian(&setup.graphon, &setup.drift, &setup.init, 16, 0.01, 0.5)?;
    let opts = TailOptions {
        n_values: vec![16],
        epsilons: vec![0.0],
        replications: 20,
        seed: cfg.seed,
        quad_points: 1024,
        d_prime: 2,
    };
    let run = estimate_tail_sup(&setup, &limit, 0.5, 10, &opts)?;
    Ok(CheckResult::le(
        "tail_zero_threshold",
        1.0 - run.estimates[0].points[0].p_hat,
        0.0,
        "epsilon = 0 gives p_hat = 1",
    ))
}

fn subgaussian(cfg: &ExperimentConfig) -> Result<CheckResult> {
    let m = &cfg.mgf;
    let lambdas = lambda_grid(m.lambda_max, m.lambda_points);
    let mut worst = f64::NEG_INFINITY;
    for l in &m.laws {
        match subgaussian_bound_check(&l.law, l.a, &lambdas) {
            Ok(rep) => worst = worst.max(rep.max_margin),
            Err(crate::Error::Precondition(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(CheckResult::le("subgaussian_margin", worst, 0.0, "laws passing the precondition"))
}

pub fn lambda_grid(lambda_max: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|k| -lambda_max + 2.0 * lambda_max * k as f64 / (points - 1) as f64)
        .collect()
}

fn hoeffding(seed: u64) -> Result<CheckResult> {
    let g = Graphon::constant(0.5)?;
    let rep = hoeffding_mgf_check(&g, 64, 0, &[1.0, 4.0, 16.0], 20_000, seed)?;
    Ok(CheckResult::le("hoeffding_mgf_margin", rep.max_margin, 0.0, "G = 0.5, n = 64, R = 20000"))
}

fn diagnostics_identity(cfg: &ExperimentConfig) -> Result<Vec<CheckResult>> {
    let g = two_block();
    let spec = DriftSpec::linear(2.0, 0.5);
    let init = InitialLaw::gaussian(1.0, 1.0);
    let limit = solve_linear_gaussian(&g, &spec, &init, 32, 0.01, 0.5)?;
    let mut out = Vec::new();
    for (mode, name) in [(SamplingMode::Deterministic, "deterministic"), (SamplingMode::Bernoulli, "bernoulli")] {
        let opts = CoupledOptions {
            sim: SimOptions::new(40, mode, 0.01, 0.5, vec![0.0, 0.25, 0.5], cfg.seed),
            diagnostics: true,
            integral_stride: 5,
        };
        let frames = run_coupled(&g, &spec, &init, &limit, &opts)?;
        let mut residual: f64 = 0.0;
        let mut tilde: f64 = 0.0;
        for f in &frames {
            let d = f.diagnostics.as_ref().expect("diagnostics requested");
            residual = residual.max(d.identity_residual());
            tilde = tilde.max(d.t_tilde.iter().fold(0.0, |a: f64, v| a.max(v.abs())));
        }
        out.push(CheckResult::le(
            &format!("diagnostics_identity_{name}"),
            residual,
            1e-12,
            "max |R - (Ttilde + T)| over frames",
        ));
        if mode == SamplingMode::Deterministic {
            out.push(CheckResult::le("diagnostics_ttilde_zero", tilde, 0.0, "deterministic sampling"));
        }
    }
    Ok(out)
}

fn lipschitz_in_u() -> Result<CheckResult> {
    let g = two_block();
    let spec = DriftSpec::linear(2.0, 0.5);
    let init = InitialLaw::GaussianPerBlock {
        boundaries: vec![0.0, 0.5, 1.0],
        blocks: vec![
            crate::dynamics::AffineMean { intercept: vec![1.0], slope: vec![1.0] },
            crate::dynamics::AffineMean { intercept: vec![-1.0], slope: vec![2.0] },
        ],
        variance: 1.0,
        theta0: 0.25,
    };
    let limit = solve_linear_gaussian(&g, &spec, &init, 32, 0.01, 20.0)?;
    let profile = limit.lipschitz_in_u_profile()?;
    let early = profile[..=500].iter().copied().fold(0.0, f64::max);
    let all = profile.iter().copied().fold(0.0, f64::max);
    Ok(CheckResult::le(
        "lipschitz_in_u_bounded",
        all / early,
        1.05,
        "max ratio over [0, 20] / max over [0, 5]",
    ))
}

fn invariant_decay(cfg: &ExperimentConfig) -> Result<Vec<CheckResult>> {
    let setup = ParticleSetup {
        graphon: Graphon::constant(1.0)?,
        drift: DriftSpec::linear(2.0, 0.5),
        init: InitialLaw::gaussian(1.0, 1.0),
        mode: SamplingMode::Deterministic,
        dt: 0.01,
        undirected: false,
    };
    let limit = solve_linear_gaussian(&setup.graphon, &setup.drift, &setup.init, 8, 0.01, 5.0)?;
    let rep = invariant_experiment(&setup, &limit, 32, 0.2, 5.0, 10, 50, cfg.seed, 1024)?;
    let kappa = kappa_of(&setup.drift);
    Ok(vec![
        CheckResult::le("invariant_decay_rate", 0.5 * kappa - rep.decay_rate, 0.0, "kappa / 2 - fitted rate"),
        CheckResult::le("invariant_decay_fit", 0.99 - rep.decay_r2, 0.0, "0.99 - R^2"),
    ])
}

fn declared_constants(cfg: &ExperimentConfig) -> CheckResult {
    let c = check_constants(&cfg.drift, 2000, 5.0, cfg.seed);
    let ok = c.consistent_with(&cfg.drift, 1e-9);
    CheckResult {
        name: "declared_drift_constants".into(),
        passed: ok,
        value: if ok { 0.0 } else { 1.0 },
        threshold: 0.0,
        detail: format!(
            "observed K_f <= {}, K_b <= {}, c0 >= {}",
            c.max_f_ratio, c.max_b_ratio, c.min_monotone_ratio
        ),
    }
}

fn thread_independence(cfg: &ExperimentConfig) -> Result<CheckResult> {
    let setup = ParticleSetup {
        graphon: two_block(),
        drift: DriftSpec::linear(2.0, 0.5),
        init: InitialLaw::gaussian(1.0, 1.0),
        mode: SamplingMode::Bernoulli,
        dt: 0.01,
        undirected: false,
    };
    let limit = solve_linear_gaussian(&setup.graphon, &setup.drift, &setup.init, 16, 0.01, 0.5)?;
    let refs = vec![Reference::from_hat_mu(limit.hat_mu(0.5)?, 1024)?];
    let run = |threads: usize| -> Result<Vec<Vec<f64>>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| crate::Error::Numerical(e.to_string()))?;
        pool.install(|| marginal_statistics(&setup, 24, &[0.5], &refs, 8, cfg.seed))
    };
    let (a, b) = (run(1)?, run(3)?);
    let same = a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok(CheckResult {
        name: "thread_count_independence".into(),
        passed: same,
        value: if same { 0.0 } else { 1.0 },
        threshold: 0.0,
        detail: "bitwise equal statistics at 1 and 3 threads".into(),
    })
}

/// Runs every check. Errors inside a check are reported as failures.
pub fn run_suite(cfg: &ExperimentConfig) -> Vec<CheckResult> {
    let seed = cfg.seed;
    let failed = |name: &str, e: crate::Error| CheckResult {
        name: name.into(),
        passed: false,
        value: f64::NAN,
        threshold: 0.0,
        detail: format!("error: {e}"),
    };
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<Vec<CheckResult>>| match r {
        Ok(v) => out.extend(v),
        Err(e) => out.push(failed(name, e)),
    };
    push("ot_assignment_vs_brute_force", ot_exactness(seed).map(|c| vec![c]));
    push("w1_sorted_vs_assignment", sorted_consistency(seed).map(|c| vec![c]));
    push("picard_vs_gaussian_flow", picard_vs_gaussian(seed).map(|c| vec![c]));
    push("particle_block_means", particle_means(seed).map(|c| vec![c]));
    push("tail_zero_threshold", zero_threshold(cfg).map(|c| vec![c]));
    push("subgaussian_margin", subgaussian(cfg).map(|c| vec![c]));
    push("hoeffding_mgf_margin", hoeffding(seed).map(|c| vec![c]));
    push("diagnostics_identity", diagnostics_identity(cfg));
    push("lipschitz_in_u_bounded", lipschitz_in_u().map(|c| vec![c]));
    push("invariant_decay", invariant_decay(cfg));
    push("declared_drift_constants", Ok(vec![declared_constants(cfg)]));
    push("thread_count_independence", thread_independence(cfg).map(|c| vec![c]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_matches_hand_computation() {
        let a = EmpiricalMeasure::from_1d(vec![0.0, 1.0]).unwrap();
        let b = EmpiricalMeasure::from_1d(vec![1.0, 0.0]).unwrap();
        assert_eq!(brute_force(&a, &b, 1), 0.0);
        let c = EmpiricalMeasure::from_1d(vec![2.0, 3.0]).unwrap();
        assert!((brute_force(&a, &c, 2) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_grid_is_symmetric() {
        let g = lambda_grid(10.0, 201);
        assert_eq!(g.len(), 201);
        assert_eq!(g[0], -10.0);
        assert_eq!(g[100], 0.0);
        assert_eq!(g[200], 10.0);
    }
}
