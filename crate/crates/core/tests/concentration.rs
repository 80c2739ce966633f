use gpconc::concentration::tails::marginal_statistics;
use gpconc::concentration::{
    estimate_tail_marginal, estimate_tail_sup, indep_empirical_tail, IndepFamily, ParticleSetup, Reference, TailOptions,
};
use gpconc::dynamics::{DriftSpec, InitialLaw};
use gpconc::graphon::{Graphon, SamplingMode};
use gpconc::limitlaw::solve_linear_gaussian;
use proptest::prelude::*;

fn options(n_values: Vec<usize>, epsilons: Vec<f64>, replications: usize, seed: u64) -> TailOptions {
    TailOptions {
        n_values,
        epsilons,
        replications,
        seed,
        quad_points: 2048,
        d_prime: 2,
    }
}

/// With `b = 0` and `f = -x` the particles are independent
/// Ornstein-Uhlenbeck processes, so the marginal tail must agree with the
/// independent-sample harness for the same Gaussian marginal.
#[test]
fn uncoupled_marginal_matches_independent_samples() {
    let setup = ParticleSetup {
        graphon: Graphon::constant(1.0).unwrap(),
        drift: DriftSpec::uncoupled(1.0, 0.0),
        init: InitialLaw::gaussian(1.0, 1.0),
        mode: SamplingMode::Deterministic,
        dt: 0.005,
        undirected: false,
    };
    let t = 1.0;
    let limit = solve_linear_gaussian(&setup.graphon, &setup.drift, &setup.init, 4, setup.dt, t).unwrap();
    let (n, eps, r) = (64, 0.12, 3000);
    let run = estimate_tail_marginal(&setup, &limit, &[t], &options(vec![n], vec![eps], r, 21)).unwrap();

    // Euler-Maruyama moments on the same grid: m_k = (1 - dt)^k, v_k = (1 - dt)^{2k} + dt Σ (1 - dt)^{2j}
    let steps = (t / setup.dt).round() as i32;
    let a = 1.0 - setup.dt;
    let mean = a.powi(steps);
    let var = a.powi(2 * steps) + setup.dt * (0..steps).map(|j| a.powi(2 * j)).sum::<f64>();
    let family = IndepFamily::Gaussian {
        intercept: mean,
        slope: 0.0,
        variance: var,
    };
    let (indep, _) = indep_empirical_tail(&family, 1, &options(vec![n], vec![eps], r, 22)).unwrap();
    let (p, q) = (&run.estimates[0].points[0], &indep[0].points[0]);
    assert!(p.p_hat > 0.05 && p.p_hat < 0.95, "{}", p.p_hat);
    assert!(p.ci_low <= q.ci_high && q.ci_low <= p.ci_high, "{p:?} vs {q:?}");
}

#[test]
fn sup_tail_dominates_marginal_tail_on_shared_replications() {
    let setup = ParticleSetup {
        graphon: Graphon::min(),
        drift: DriftSpec::linear(2.0, 0.5),
        init: InitialLaw::gaussian(0.0, 1.0),
        mode: SamplingMode::Bernoulli,
        dt: 0.01,
        undirected: false,
    };
    let limit = solve_linear_gaussian(&setup.graphon, &setup.drift, &setup.init, 16, 0.01, 1.0).unwrap();
    let opts = options(vec![16, 32], vec![0.1, 0.2, 0.3], 80, 23);
    let sup = estimate_tail_sup(&setup, &limit, 1.0, 10, &opts).unwrap();
    let marg = estimate_tail_marginal(&setup, &limit, &sup.times, &opts).unwrap();
    for (s, m) in sup.estimates.iter().zip(&marg.estimates) {
        for q in &m.points {
            assert!(s.point(q.n).unwrap().exceed_count >= q.exceed_count);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Exceedance counts are non-increasing in epsilon on one replication set.
    #[test]
    fn exceedance_is_monotone_in_epsilon(seed in any::<u64>(), e1 in 0.0f64..0.5, gap in 0.0f64..0.5) {
        let setup = ParticleSetup {
            graphon: Graphon::constant(0.7).unwrap(),
            drift: DriftSpec::linear(2.0, 0.5),
            init: InitialLaw::gaussian(1.0, 1.0),
            mode: SamplingMode::Bernoulli,
            dt: 0.02,
            undirected: false,
        };
        let limit = solve_linear_gaussian(&setup.graphon, &setup.drift, &setup.init, 4, 0.02, 0.4).unwrap();
        let run = estimate_tail_marginal(&setup, &limit, &[0.4], &options(vec![12], vec![e1, e1 + gap], 30, seed)).unwrap();
        let (a, b) = (&run.estimates[0].points[0], &run.estimates[1].points[0]);
        prop_assert!(a.p_hat >= b.p_hat);
        prop_assert!(a.ci_low <= a.p_hat && a.p_hat <= a.ci_high);
    }

    /// Replications are exchangeable: statistics do not depend on how many
    /// are requested.
    #[test]
    fn replication_prefix_is_stable(seed in any::<u64>(), r in 2usize..10) {
        let setup = ParticleSetup {
            graphon: Graphon::constant(1.0).unwrap(),
            drift: DriftSpec::linear(2.0, 0.5),
            init: InitialLaw::gaussian(1.0, 1.0),
            mode: SamplingMode::Deterministic,
            dt: 0.05,
            undirected: false,
        };
        let limit = solve_linear_gaussian(&setup.graphon, &setup.drift, &setup.init, 4, 0.05, 0.5).unwrap();
        let refs = [Reference::from_hat_mu(limit.hat_mu(0.5).unwrap(), 256).unwrap()];
        let short = marginal_statistics(&setup, 8, &[0.5], &refs, r, seed).unwrap();
        let long = marginal_statistics(&setup, 8, &[0.5], &refs, r + 3, seed).unwrap();
        prop_assert_eq!(&long[..r], &short[..]);
    }
}
