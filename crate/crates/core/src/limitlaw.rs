//! Reference approximations of the limit marginals `μ̄_{u,t}`.
//!
//! Two representations are produced on a grid of types `u`: an exact
//! Gaussian flow for linear drifts, and per-node particle clouds from a law
//! iteration for general drifts. Both store, for every time step, the mean
//! of `φ` under each node's marginal, which is all the interaction term of
//! the closed-form drift family needs.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dynamics::{is_dissipative, DriftCoeffs, DriftSpec, InitialLaw};
use crate::error::{Error, Result};
use crate::graphon::{block_of, Graphon};
use crate::ot::{w1_presorted, EmpiricalMeasure, Gaussian, MixtureLaw1D};
use crate::rng;

pub const DEFAULT_GRID_SIZE: usize = 256;

/// Grid of types that never straddles a block boundary. Inside a block of
/// width `w` holding `k` nodes, node `j` sits at `a + (j + 1) w / k` and
/// carries quadrature weight `w / k`.
#[derive(Clone, Debug, PartialEq)]
pub struct UGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    boundaries: Vec<f64>,
    block_start: Vec<usize>,
}

impl UGrid {
    /// `m` nodes spread over the union of the given boundary sets, with node
    /// counts proportional to block width (at least one per block).
    pub fn new(m: usize, boundary_sets: &[&[f64]]) -> Result<Self> {
        let mut boundaries: Vec<f64> = boundary_sets.iter().flat_map(|b| b.iter().copied()).collect();
        boundaries.push(0.0);
        boundaries.push(1.0);
        boundaries.sort_by(f64::total_cmp);
        boundaries.dedup();
        let blocks = boundaries.len() - 1;
        if m < blocks.max(2) {
            return Err(Error::config(
                "m",
                format!("grid needs at least max(2, {blocks}) nodes, got {m}"),
            ));
        }
        let widths: Vec<f64> = boundaries.windows(2).map(|w| w[1] - w[0]).collect();
        // largest-remainder allocation with a floor of one node per block
        let mut counts: Vec<usize> = widths.iter().map(|w| ((w * m as f64).floor() as usize).max(1)).collect();
        let mut order: Vec<usize> = (0..blocks).collect();
        order.sort_by(|&a, &b| {
            let ra = widths[a] * m as f64 - counts[a] as f64;
            let rb = widths[b] * m as f64 - counts[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut total: usize = counts.iter().sum();
        let mut k = 0;
        while total < m {
            counts[order[k % blocks]] += 1;
            total += 1;
            k += 1;
        }
        while total > m {
            let big = (0..blocks).filter(|&b| counts[b] > 1).max_by_key(|&b| counts[b]).unwrap();
            counts[big] -= 1;
            total -= 1;
        }
        let mut nodes = Vec::with_capacity(m);
        let mut weights = Vec::with_capacity(m);
        let mut block_start = Vec::with_capacity(blocks + 1);
        for b in 0..blocks {
            block_start.push(nodes.len());
            let (lo, hi, k) = (boundaries[b], boundaries[b + 1], counts[b] as f64);
            let step = widths[b] / k;
            for j in 0..counts[b] {
                let r = (j + 1) as f64;
                nodes.push((lo * (k - r) + hi * r) / k);
                weights.push(step);
            }
        }
        block_start.push(nodes.len());
        Ok(Self {
            nodes,
            weights,
            boundaries,
            block_start,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Node index range of the block containing `u`.
    pub fn block_range(&self, u: f64) -> std::ops::Range<usize> {
        let b = block_of(&self.boundaries, u);
        self.block_start[b]..self.block_start[b + 1]
    }

    pub fn num_blocks(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn block_of_node(&self, k: usize) -> usize {
        self.block_start[1..].partition_point(|&s| s <= k)
    }

    /// Node of the same block closest to `u`.
    pub fn nearest_node(&self, u: f64) -> usize {
        let r = self.block_range(u);
        let pos = self.nodes[r.clone()].partition_point(|&x| x < u);
        let hi = (r.start + pos).min(r.end - 1);
        if hi > r.start && (u - self.nodes[hi - 1]).abs() <= (self.nodes[hi] - u).abs() {
            hi - 1
        } else {
            hi
        }
    }

    /// Neighbouring nodes of the same block bracketing `u` and the linear
    /// interpolation weight of the right one. Outside the node span the
    /// nearest node is used.
    pub fn bracket(&self, u: f64) -> (usize, usize, f64) {
        let r = self.block_range(u);
        let pos = self.nodes[r.clone()].partition_point(|&x| x < u);
        if pos == 0 {
            return (r.start, r.start, 0.0);
        }
        if r.start + pos >= r.end {
            return (r.end - 1, r.end - 1, 0.0);
        }
        let (lo, hi) = (r.start + pos - 1, r.start + pos);
        let lam = (u - self.nodes[lo]) / (self.nodes[hi] - self.nodes[lo]);
        (lo, hi, lam)
    }
}

/// Per-node interaction weights `w_l G(u_k, u_l)`, aggregated by block when
/// the graphon is piecewise constant.
#[derive(Clone, Debug)]
enum Coupling {
    Blocks { node_block: Vec<usize>, table: Vec<Vec<f64>>, graphon_block_of_grid_block: Vec<usize> },
    Dense(Vec<f64>),
}

impl Coupling {
    fn new(g: &Graphon, grid: &UGrid) -> Self {
        let m = grid.len();
        if let Some(table) = g.block_values() {
            let node_block = (0..m).map(|k| grid.block_of_node(k)).collect();
            let graphon_block_of_grid_block = (0..grid.num_blocks())
                .map(|b| g.block_of(grid.nodes()[grid.block_start[b]]))
                .collect();
            return Coupling::Blocks {
                node_block,
                table,
                graphon_block_of_grid_block,
            };
        }
        let mut w = vec![0.0; m * m];
        for k in 0..m {
            for l in 0..m {
                w[k * m + l] = grid.weights()[l] * g.eval_unchecked(grid.nodes()[k], grid.nodes()[l]);
            }
        }
        Coupling::Dense(w)
    }

    /// `out[k] = Σ_l w_l G(u_k, u_l) x[l]` for one scalar field `x`.
    fn apply(&self, grid: &UGrid, x: &[f64], out: &mut [f64]) {
        let m = grid.len();
        match self {
            Coupling::Blocks {
                node_block,
                table,
                graphon_block_of_grid_block: gb,
            } => {
                let nb = grid.num_blocks();
                let mut sums = vec![0.0; nb];
                for l in 0..m {
                    sums[node_block[l]] += grid.weights()[l] * x[l];
                }
                for k in 0..m {
                    let row = &table[gb[node_block[k]]];
                    out[k] = (0..nb).map(|b| row[gb[b]] * sums[b]).sum();
                }
            }
            Coupling::Dense(w) => {
                for k in 0..m {
                    out[k] = w[k * m..(k + 1) * m].iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StationaryGaussian {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LimitKind {
    /// Mean `[step][node][component]` and isotropic variance `[step][node]`
    /// at every time step.
    GaussianFlow { means: Vec<f64>, variances: Vec<f64> },
    /// Sorted particle clouds per node at the saved steps, from law iteration.
    SampleCloud {
        particles: usize,
        saved_steps: Vec<usize>,
        clouds: Vec<Vec<f64>>,
        report: PicardReport,
    },
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PicardReport {
    pub iterations: usize,
    pub gap: f64,
    pub converged: bool,
}

/// A reference approximation of the limit marginals on a time grid
/// `t_k = k dt`, `k = 0..=steps`.
#[derive(Clone, Debug)]
pub struct LimitLaw {
    grid: UGrid,
    dim: usize,
    dt: f64,
    steps: usize,
    drift: DriftSpec,
    graphon: Graphon,
    /// Mean of `φ` under each node's marginal, `[step][node][component]`.
    phi_means: Vec<f64>,
    kind: LimitKind,
    pub stationary: Option<StationaryGaussian>,
}

/// The `u`-averaged law `μ̂_t`.
#[derive(Clone, Debug)]
pub enum HatMu {
    Mixture(MixtureLaw1D),
    Pooled(EmpiricalMeasure),
}

fn step_count(dt: f64, horizon: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::config("dt", "must be > 0"));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::config("T", "must be >= 0"));
    }
    let k = (horizon / dt).round();
    if (k * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::config("T", format!("horizon {horizon} is not a multiple of dt = {dt}")));
    }
    Ok(k as usize)
}

/// Index of `t` on the grid `k dt`, or an error when `t` is off the grid.
pub fn grid_index(t: f64, dt: f64) -> Result<usize> {
    let k = (t / dt).round();
    if !(t >= 0.0) || (k * dt - t).abs() > 1e-9 * t.abs().max(dt) {
        return Err(Error::Domain(format!("t = {t} is not on the time grid of step {dt}")));
    }
    Ok(k as usize)
}

fn phi_means_gaussian(c: &DriftCoeffs, means: &[f64], variances: &[f64], dim: usize, out: &mut [f64]) {
    for (k, v) in variances.iter().enumerate() {
        for a in 0..dim {
            out[k * dim + a] = DriftSpec::phi_gaussian_mean(c, means[k * dim + a], *v);
        }
    }
}

/// Gaussian flow of a linear drift with Gaussian initial law, by RK4 on the
/// grid `m`. The interaction integral uses the grid quadrature and the
/// self term `b_self x deg(u)` the exact degree.
pub fn solve_linear_gaussian(
    g: &Graphon,
    spec: &DriftSpec,
    init: &InitialLaw,
    m: usize,
    dt: f64,
    horizon: f64,
) -> Result<LimitLaw> {
    if !spec.is_linear() {
        return Err(Error::Unsupported("Gaussian flow needs a linear drift".into()));
    }
    if !init.is_gaussian() {
        return Err(Error::Unsupported("Gaussian flow needs a Gaussian initial law".into()));
    }
    spec.validate()?;
    let dim = spec.dim();
    init.validate(dim)?;
    let steps = step_count(dt, horizon)?;
    let grid = UGrid::new(m, &[g.boundaries(), init.boundaries()])?;
    let m = grid.len();
    let c = spec.coeffs();
    let coupling = Coupling::new(g, &grid);
    let rate: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&u| -c.f_rate + c.b_self * g.degree_unchecked(u))
        .collect();

    let mut mean: Vec<f64> = grid.nodes().iter().flat_map(|&u| init.mean_vec(u)).collect();
    let mut var = vec![init.variance(); m];
    let mut means = Vec::with_capacity((steps + 1) * m * dim);
    let mut variances = Vec::with_capacity((steps + 1) * m);
    means.extend_from_slice(&mean);
    variances.extend_from_slice(&var);

    let mut col = vec![0.0; m];
    let mut coupled = vec![0.0; m];
    let mean_rhs = |x: &[f64], out: &mut [f64], col: &mut [f64], coupled: &mut [f64]| {
        for a in 0..dim {
            for k in 0..m {
                col[k] = x[k * dim + a];
            }
            coupling.apply(&grid, col, coupled);
            for k in 0..m {
                out[k * dim + a] = rate[k] * x[k * dim + a] + c.b_other * coupled[k];
            }
        }
    };
    let var_rhs = |v: &[f64], out: &mut [f64]| {
        for k in 0..m {
            out[k] = 2.0 * rate[k] * v[k] + 1.0;
        }
    };

    let md = m * dim;
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; md], vec![0.0; md], vec![0.0; md], vec![0.0; md], vec![0.0; md]);
    let (mut l1, mut l2, mut l3, mut l4, mut vtmp) =
        (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for step in 0..steps {
        mean_rhs(&mean, &mut k1, &mut col, &mut coupled);
        axpy_into(&mean, &k1, 0.5 * dt, &mut tmp);
        mean_rhs(&tmp, &mut k2, &mut col, &mut coupled);
        axpy_into(&mean, &k2, 0.5 * dt, &mut tmp);
        mean_rhs(&tmp, &mut k3, &mut col, &mut coupled);
        axpy_into(&mean, &k3, dt, &mut tmp);
        mean_rhs(&tmp, &mut k4, &mut col, &mut coupled);
        for i in 0..md {
            mean[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }

        var_rhs(&var, &mut l1);
        axpy_into(&var, &l1, 0.5 * dt, &mut vtmp);
        var_rhs(&vtmp, &mut l2);
        axpy_into(&var, &l2, 0.5 * dt, &mut vtmp);
        var_rhs(&vtmp, &mut l3);
        axpy_into(&var, &l3, dt, &mut vtmp);
        var_rhs(&vtmp, &mut l4);
        for k in 0..m {
            var[k] += dt / 6.0 * (l1[k] + 2.0 * l2[k] + 2.0 * l3[k] + l4[k]);
        }
        if mean.iter().chain(&var).any(|x| !x.is_finite()) || var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Diverged {
                step: step + 1,
                time: (step + 1) as f64 * dt,
            });
        }
        means.extend_from_slice(&mean);
        variances.extend_from_slice(&var);
    }

    let mut phi_means = vec![0.0; means.len()];
    for s in 0..=steps {
        phi_means_gaussian(
            &c,
            &means[s * md..(s + 1) * md],
            &variances[s * m..(s + 1) * m],
            dim,
            &mut phi_means[s * md..(s + 1) * md],
        );
    }
    let stationary = if is_dissipative(spec) {
        Some(stationary_on_grid(g, spec, &grid)?)
    } else {
        None
    };
    Ok(LimitLaw {
        grid,
        dim,
        dt,
        steps,
        drift: spec.clone(),
        graphon: g.clone(),
        phi_means,
        kind: LimitKind::GaussianFlow { means, variances },
        stationary,
    })
}

fn axpy_into(x: &[f64], k: &[f64], h: f64, out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(x).zip(k) {
        *o = a + h * b;
    }
}

/// Fixed point of the linear Gaussian flow on a grid of `m` types.
pub fn stationary_linear_gaussian(g: &Graphon, spec: &DriftSpec, m: usize) -> Result<(UGrid, StationaryGaussian)> {
    if !spec.is_linear() {
        return Err(Error::Unsupported("stationary Gaussian law needs a linear drift".into()));
    }
    if !is_dissipative(spec) {
        return Err(Error::Precondition("stationary law needs a dissipative drift".into()));
    }
    let grid = UGrid::new(m, &[g.boundaries()])?;
    let st = stationary_on_grid(g, spec, &grid)?;
    Ok((grid, st))
}

fn stationary_on_grid(g: &Graphon, spec: &DriftSpec, grid: &UGrid) -> Result<StationaryGaussian> {
    let c = spec.coeffs();
    let m = grid.len();
    let dim = spec.dim();
    let mut a = DMatrix::<f64>::zeros(m, m);
    for k in 0..m {
        let uk = grid.nodes()[k];
        a[(k, k)] += -c.f_rate + c.b_self * g.degree_unchecked(uk);
        for l in 0..m {
            a[(k, l)] += c.b_other * grid.weights()[l] * g.eval_unchecked(uk, grid.nodes()[l]);
        }
    }
    // the family has no constant drift term, so the right-hand side is zero
    let rhs = DVector::<f64>::zeros(m);
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("stationary mean system is singular".into()))?;
    let means = (0..m).flat_map(|k| std::iter::repeat_n(sol[k], dim)).collect();
    let mut variances = Vec::with_capacity(m);
    for &u in grid.nodes() {
        let denom = 2.0 * (c.f_rate - c.b_self * g.degree_unchecked(u));
        if !(denom > 0.0) {
            return Err(Error::Numerical(format!("no stationary variance at u = {u}")));
        }
        variances.push(1.0 / denom);
    }
    Ok(StationaryGaussian { means, variances })
}

#[derive(Clone, Debug)]
pub struct PicardOptions {
    pub m: usize,
    pub particles: usize,
    pub max_iterations: usize,
    pub dt: f64,
    pub horizon: f64,
    pub tol: f64,
    /// Clouds are kept every `save_every` steps (the final step is always kept).
    pub save_every: usize,
    pub seed: u64,
}

/// Law iteration with common random numbers, for one-dimensional drifts.
///
/// Iterate 0 freezes the initial law in time. Iterate `k + 1` simulates
/// `particles` paths per node by Euler–Maruyama with the interaction term
/// evaluated against iterate `k`. Iteration stops once the largest per-node
/// `W_1` between successive iterates at saved steps drops below `tol`.
pub fn solve_picard(g: &Graphon, spec: &DriftSpec, init: &InitialLaw, opts: &PicardOptions) -> Result<LimitLaw> {
    spec.validate()?;
    if spec.dim() != 1 {
        return Err(Error::Unsupported("law iteration is implemented for d = 1".into()));
    }
    init.validate(1)?;
    if opts.particles < 100 {
        return Err(Error::config("M", "law iteration needs at least 100 particles per node"));
    }
    if opts.max_iterations < 1 {
        return Err(Error::config("K", "need at least one iteration"));
    }
    if opts.save_every == 0 {
        return Err(Error::config("save_every", "must be >= 1"));
    }
    let steps = step_count(opts.dt, opts.horizon)?;
    let grid = UGrid::new(opts.m, &[g.boundaries(), init.boundaries()])?;
    let m = grid.len();
    let c = spec.coeffs();
    let coupling = Coupling::new(g, &grid);
    let degree: Vec<f64> = grid.nodes().iter().map(|&u| g.degree_unchecked(u)).collect();
    let mut saved_steps: Vec<usize> = (0..=steps).step_by(opts.save_every).collect();
    if *saved_steps.last().unwrap() != steps {
        saved_steps.push(steps);
    }

    // iterate 0: initial law frozen in time
    let phi0: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&u| {
            let mean = init.mean_vec(u)[0];
            DriftSpec::phi_gaussian_mean(&c, mean, init.variance())
        })
        .collect();
    let mut phi = phi0.repeat(steps + 1);
    let mut previous: Option<Vec<Vec<f64>>> = None;
    let mut best: Option<(f64, Vec<f64>, Vec<Vec<f64>>, usize)> = None;
    let mut iterations = 0;
    let law_independent = spec.is_law_independent();

    for it in 1..=opts.max_iterations {
        iterations = it;
        let mut interaction = vec![0.0; (steps + 1) * m];
        for s in 0..=steps {
            coupling.apply(&grid, &phi[s * m..(s + 1) * m], &mut interaction[s * m..(s + 1) * m]);
        }
        let per_node: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..m)
            .into_par_iter()
            .map(|k| {
                simulate_node(
                    spec, &c, init, grid.nodes()[k], k, degree[k], &interaction, m, steps, opts, &saved_steps,
                )
            })
            .collect();
        let mut new_phi = vec![0.0; (steps + 1) * m];
        let mut clouds = vec![Vec::with_capacity(m * opts.particles); saved_steps.len()];
        for (k, r) in per_node.into_iter().enumerate() {
            let (node_phi, node_clouds) = r?;
            for s in 0..=steps {
                new_phi[s * m + k] = node_phi[s];
            }
            for (a, cloud) in clouds.iter_mut().enumerate() {
                cloud.extend_from_slice(&node_clouds[a * opts.particles..(a + 1) * opts.particles]);
            }
        }
        let gap = match &previous {
            Some(prev) => max_node_gap(prev, &clouds, m, opts.particles),
            None if law_independent => 0.0,
            None => f64::INFINITY,
        };
        let improves = best.as_ref().is_none_or(|b| gap <= b.0);
        phi = new_phi;
        if improves {
            best = Some((gap, phi.clone(), clouds.clone(), it));
        }
        if gap < opts.tol || law_independent {
            break;
        }
        previous = Some(clouds);
    }
    let (gap, phi_means, clouds, _) = best.expect("at least one iteration ran");
    let converged = gap < opts.tol || law_independent;
    if !converged {
        log::warn!("law iteration stopped after {iterations} iterations with gap {gap}");
    }
    Ok(LimitLaw {
        grid,
        dim: 1,
        dt: opts.dt,
        steps,
        drift: spec.clone(),
        graphon: g.clone(),
        phi_means,
        kind: LimitKind::SampleCloud {
            particles: opts.particles,
            saved_steps,
            clouds,
            report: PicardReport {
                iterations,
                gap,
                converged,
            },
        },
        stationary: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate_node(
    spec: &DriftSpec,
    c: &DriftCoeffs,
    init: &InitialLaw,
    u: f64,
    node: usize,
    degree: f64,
    interaction: &[f64],
    m: usize,
    steps: usize,
    opts: &PicardOptions,
    saved_steps: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mm = opts.particles;
    let sqrt_dt = opts.dt.sqrt();
    let mut phi_sum = vec![0.0; steps + 1];
    let mut clouds = vec![0.0; saved_steps.len() * mm];
    for p in 0..mm {
        let mut r = rng::stream(opts.seed, &[rng::tag::PICARD, node as u64, p as u64]);
        let mut x = [0.0];
        init.draw_into(u, &mut r, &mut x);
        let mut x = x[0];
        let mut save = 0;
        for s in 0..=steps {
            phi_sum[s] += DriftSpec::phi_component(c, x);
            if saved_steps.get(save) == Some(&s) {
                clouds[save * mm + p] = x;
                save += 1;
            }
            if s == steps {
                break;
            }
            let drift = spec.f_component(c, x) + c.b_self * x * degree + interaction[s * m + node];
            let z: f64 = r.sample(StandardNormal);
            x += drift * opts.dt + sqrt_dt * z;
            if !x.is_finite() {
                return Err(Error::Diverged {
                    step: s + 1,
                    time: (s + 1) as f64 * opts.dt,
                });
            }
        }
    }
    for s in phi_sum.iter_mut() {
        *s /= mm as f64;
    }
    for chunk in clouds.chunks_exact_mut(mm) {
        chunk.sort_by(f64::total_cmp);
    }
    Ok((phi_sum, clouds))
}

fn max_node_gap(prev: &[Vec<f64>], next: &[Vec<f64>], m: usize, mm: usize) -> f64 {
    let mut gap: f64 = 0.0;
    for (a, b) in prev.iter().zip(next) {
        for k in 0..m {
            gap = gap.max(w1_presorted(&a[k * mm..(k + 1) * mm], &b[k * mm..(k + 1) * mm]));
        }
    }
    gap
}

impl LimitLaw {
    pub fn grid(&self) -> &UGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn drift(&self) -> &DriftSpec {
        &self.drift
    }

    pub fn graphon(&self) -> &Graphon {
        &self.graphon
    }

    pub fn kind(&self) -> &LimitKind {
        &self.kind
    }

    pub fn picard_report(&self) -> Option<&PicardReport> {
        match &self.kind {
            LimitKind::SampleCloud { report, .. } => Some(report),
            LimitKind::GaussianFlow { .. } => None,
        }
    }

    /// Steps at which full marginals are available.
    pub fn saved_steps(&self) -> Vec<usize> {
        match &self.kind {
            LimitKind::GaussianFlow { .. } => (0..=self.steps).collect(),
            LimitKind::SampleCloud { saved_steps, .. } => saved_steps.clone(),
        }
    }

    pub fn step_of(&self, t: f64) -> Result<usize> {
        let s = grid_index(t, self.dt)?;
        if s > self.steps {
            return Err(Error::Domain(format!("t = {t} is beyond the horizon {}", self.horizon())));
        }
        Ok(s)
    }

    fn saved_index(&self, step: usize) -> Result<usize> {
        match &self.kind {
            LimitKind::GaussianFlow { .. } => Ok(step),
            LimitKind::SampleCloud { saved_steps, .. } => saved_steps.binary_search(&step).map_err(|_| {
                Error::Domain(format!("step {step} is not a saved step of the sample clouds"))
            }),
        }
    }

    /// Mean and variance of node `k` at `step` (component `a`).
    pub fn node_gaussian(&self, step: usize, k: usize, a: usize) -> Result<Gaussian> {
        match &self.kind {
            LimitKind::GaussianFlow { means, variances } => {
                let m = self.grid.len();
                Ok(Gaussian::new(
                    means[(step * m + k) * self.dim + a],
                    variances[step * m + k],
                ))
            }
            LimitKind::SampleCloud { .. } => Err(Error::Unsupported("sample clouds are not Gaussian".into())),
        }
    }

    /// Sorted cloud of node `k` at a saved step.
    pub fn node_cloud(&self, step: usize, k: usize) -> Result<&[f64]> {
        let a = self.saved_index(step)?;
        match &self.kind {
            LimitKind::SampleCloud { particles, clouds, .. } => Ok(&clouds[a][k * particles..(k + 1) * particles]),
            LimitKind::GaussianFlow { .. } => Err(Error::Unsupported("Gaussian flows have no clouds".into())),
        }
    }

    /// Mean of `φ` under node `k`'s marginal at `step`.
    pub fn phi_mean_node(&self, step: usize, k: usize) -> &[f64] {
        let m = self.grid.len();
        let start = (step * m + k) * self.dim;
        &self.phi_means[start..start + self.dim]
    }

    /// Mean of `φ` under `μ̄_{u, step dt}`: interpolated inside the block for
    /// Gaussian flows, from the nearest node for sample clouds.
    pub fn phi_mean_at(&self, step: usize, u: f64, out: &mut [f64]) {
        match &self.kind {
            LimitKind::GaussianFlow { means, variances } => {
                let m = self.grid.len();
                let (lo, hi, lam) = self.grid.bracket(u);
                let v = (1.0 - lam) * variances[step * m + lo] + lam * variances[step * m + hi];
                let c = self.drift.coeffs();
                for (a, o) in out.iter_mut().enumerate() {
                    let mean = (1.0 - lam) * means[(step * m + lo) * self.dim + a]
                        + lam * means[(step * m + hi) * self.dim + a];
                    *o = DriftSpec::phi_gaussian_mean(&c, mean, v);
                }
            }
            LimitKind::SampleCloud { .. } => {
                let k = self.grid.nearest_node(u);
                out.copy_from_slice(self.phi_mean_node(step, k));
            }
        }
    }

    /// The averaged law `μ̂_t = ∫ μ̄_{u,t} du` at a saved time.
    pub fn hat_mu(&self, t: f64) -> Result<HatMu> {
        let step = self.step_of(t)?;
        let a = self.saved_index(step)?;
        match &self.kind {
            LimitKind::GaussianFlow { .. } => {
                if self.dim != 1 {
                    return Err(Error::Unsupported("mixture laws are one-dimensional".into()));
                }
                let comps = (0..self.grid.len())
                    .map(|k| self.node_gaussian(step, k, 0))
                    .collect::<Result<Vec<_>>>()?;
                Ok(HatMu::Mixture(
                    MixtureLaw1D::new(self.grid.weights().to_vec(), comps)?.collapsed(),
                ))
            }
            LimitKind::SampleCloud { clouds, .. } => Ok(HatMu::Pooled(EmpiricalMeasure::from_1d(clouds[a].clone())?)),
        }
    }

    /// Mixture form of `μ̂_t`; errors for sample clouds.
    pub fn hat_mu_mixture(&self, t: f64) -> Result<MixtureLaw1D> {
        match self.hat_mu(t)? {
            HatMu::Mixture(m) => Ok(m),
            HatMu::Pooled(_) => Err(Error::Unsupported("limit law is a sample cloud".into())),
        }
    }

    /// Averaged stationary law, when known.
    pub fn hat_mu_stationary(&self) -> Result<MixtureLaw1D> {
        let st = self
            .stationary
            .as_ref()
            .ok_or_else(|| Error::Precondition("no stationary law (drift not dissipative)".into()))?;
        if self.dim != 1 {
            return Err(Error::Unsupported("mixture laws are one-dimensional".into()));
        }
        let comps = st
            .means
            .iter()
            .zip(&st.variances)
            .map(|(&m, &v)| Gaussian::new(m, v))
            .collect();
        Ok(MixtureLaw1D::new(self.grid.weights().to_vec(), comps)?.collapsed())
    }

    /// Largest `W_2(μ̄_{u_k,t}, μ̄_{u_{k+1},t}) / |u_k - u_{k+1}|` over
    /// neighbouring nodes of the same block, per time step.
    pub fn lipschitz_in_u_profile(&self) -> Result<Vec<f64>> {
        let LimitKind::GaussianFlow { means, variances } = &self.kind else {
            return Err(Error::Unsupported("needs a Gaussian flow".into()));
        };
        let m = self.grid.len();
        let d = self.dim;
        let pairs: Vec<usize> = (0..m.saturating_sub(1))
            .filter(|&k| self.grid.block_of_node(k) == self.grid.block_of_node(k + 1))
            .collect();
        Ok((0..=self.steps)
            .map(|s| {
                pairs
                    .iter()
                    .map(|&k| {
                        let dm2: f64 = (0..d)
                            .map(|a| {
                                let x = means[(s * m + k) * d + a] - means[(s * m + k + 1) * d + a];
                                x * x
                            })
                            .sum();
                        let ds = variances[s * m + k].sqrt() - variances[s * m + k + 1].sqrt();
                        (dm2 + d as f64 * ds * ds).sqrt() / (self.grid.nodes()[k + 1] - self.grid.nodes()[k])
                    })
                    .fold(0.0, f64::max)
            })
            .collect())
    }

    /// Fitted constant `C` with `W_1(μ̂_t, μ̂_s) <= C |t - s|^{1/2}` over all
    /// pairs of the given steps whose gap is at most `max_lag` entries.
    pub fn time_regularity_constant(&self, steps: &[usize], max_lag: usize, quad_points: usize) -> Result<f64> {
        let tables = steps
            .iter()
            .map(|&s| match self.hat_mu(s as f64 * self.dt)? {
                HatMu::Mixture(mix) => mix.quantile_table(quad_points).map(|t| t.values().to_vec()),
                HatMu::Pooled(e) => Ok(e.sorted_1d()?),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut c: f64 = 0.0;
        for a in 0..steps.len() {
            for b in a + 1..steps.len().min(a + 1 + max_lag) {
                let dt = (steps[b] as f64 - steps[a] as f64).abs() * self.dt;
                if dt > 0.0 {
                    c = c.max(w1_presorted(&tables[a], &tables[b]) / dt.sqrt());
                }
            }
        }
        Ok(c)
    }

    /// CSV snapshot every `stride` steps: `(u, t, mean.., variance)` for
    /// Gaussian flows, `(u, t, sample)` for sample clouds.
    pub fn write_csv<W: Write>(&self, out: &mut W, stride: usize) -> Result<()> {
        let stride = stride.max(1);
        let m = self.grid.len();
        match &self.kind {
            LimitKind::GaussianFlow { means, variances } => {
                let cols: Vec<String> = (0..self.dim).map(|a| format!("mean_{a}")).collect();
                writeln!(out, "u,t,{},variance", cols.join(","))?;
                for s in (0..=self.steps).step_by(stride) {
                    for k in 0..m {
                        write!(out, "{},{}", self.grid.nodes()[k], s as f64 * self.dt)?;
                        for a in 0..self.dim {
                            write!(out, ",{}", means[(s * m + k) * self.dim + a])?;
                        }
                        writeln!(out, ",{}", variances[s * m + k])?;
                    }
                }
            }
            LimitKind::SampleCloud { saved_steps, particles, clouds, .. } => {
                writeln!(out, "u,t,sample")?;
                for (a, &s) in saved_steps.iter().enumerate().step_by(stride) {
                    for k in 0..m {
                        for x in &clouds[a][k * particles..(k + 1) * particles] {
                            writeln!(out, "{},{},{}", self.grid.nodes()[k], s as f64 * self.dt, x)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::AffineMean;

    fn two_block() -> Graphon {
        Graphon::block_constant(vec![0.0, 0.5, 1.0], vec![vec![0.9, 0.3], vec![0.3, 0.7]]).unwrap()
    }

    /// Adaptive-free reference: RK4 on a scalar ODE at a much finer step.
    fn scalar_ode(f: impl Fn(f64) -> f64, x0: f64, horizon: f64, steps: usize) -> f64 {
        let h = horizon / steps as f64;
        let mut x = x0;
        for _ in 0..steps {
            let k1 = f(x);
            let k2 = f(x + 0.5 * h * k1);
            let k3 = f(x + 0.5 * h * k2);
            let k4 = f(x + h * k3);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        x
    }

    #[test]
    fn grid_is_block_respecting() {
        let grid = UGrid::new(10, &[&[0.0, 0.3, 1.0]]).unwrap();
        assert_eq!(grid.len(), 10);
        for (a, b) in grid.nodes()[..3].iter().zip([0.1, 0.2, 0.3]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((grid.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for k in 0..grid.len() {
            let b = grid.block_of_node(k);
            assert_eq!(block_of(grid.boundaries(), grid.nodes()[k]), b);
        }
        let uniform = UGrid::new(4, &[]).unwrap();
        assert_eq!(uniform.nodes(), &[0.25, 0.5, 0.75, 1.0]);
        assert!(UGrid::new(1, &[]).is_err());
        assert!(UGrid::new(2, &[&[0.0, 0.2, 0.4, 1.0]]).is_err());
    }

    #[test]
    fn bracket_and_nearest_stay_in_block() {
        let grid = UGrid::new(8, &[&[0.0, 0.5, 1.0]]).unwrap();
        // u = 0.55 lies before the first node (0.625) of the right block
        assert_eq!(grid.bracket(0.55), (4, 4, 0.0));
        assert_eq!(grid.nearest_node(0.55), 4);
        let (lo, hi, lam) = grid.bracket(0.3);
        assert_eq!((lo, hi), (1, 2));
        assert!((lam - 0.4).abs() < 1e-12);
        assert_eq!(grid.nearest_node(0.5), 3);
    }

    #[test]
    fn constant_graphon_mean_and_variance() {
        let g = Graphon::constant(1.0).unwrap();
        let law = solve_linear_gaussian(&g, &DriftSpec::linear(2.0, 0.5), &InitialLaw::gaussian(1.0, 1.0), 16, 0.01, 1.0)
            .unwrap();
        let s = law.step_of(1.0).unwrap();
        // drift -(c1 + c2) x + c2 (x + m) gives m' = -(c1 - c2) m
        let oracle_m = scalar_ode(|m| -1.5 * m, 1.0, 1.0, 100_000);
        let oracle_v = scalar_ode(|v| -4.0 * v + 1.0, 1.0, 1.0, 100_000);
        for k in 0..16 {
            let gk = law.node_gaussian(s, k, 0).unwrap();
            assert!((gk.mean - oracle_m).abs() < 1e-9, "{} vs {oracle_m}", gk.mean);
            assert!((gk.mean - (-1.5f64).exp()).abs() < 1e-9);
            assert!((gk.variance - oracle_v).abs() < 1e-8, "{} vs {oracle_v}", gk.variance);
        }
        let st = law.stationary.as_ref().unwrap();
        assert!(st.variances.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(st.means.iter().all(|m| m.abs() < 1e-15));
    }

    #[test]
    fn uncoupled_is_ornstein_uhlenbeck() {
        let g = two_block();
        let c1 = 1.5;
        let law =
            solve_linear_gaussian(&g, &DriftSpec::linear(c1, 0.0), &InitialLaw::gaussian(0.7, 2.0), 8, 0.01, 2.0).unwrap();
        let t = 2.0;
        let s = law.step_of(t).unwrap();
        let m = 0.7 * (-c1 * t).exp();
        let v = (1.0 - (-2.0 * c1 * t).exp()) / (2.0 * c1) + 2.0 * (-2.0 * c1 * t).exp();
        for k in 0..8 {
            let gk = law.node_gaussian(s, k, 0).unwrap();
            assert!((gk.mean - m).abs() < 1e-9);
            assert!((gk.variance - v).abs() < 1e-9);
        }
    }

    #[test]
    fn two_block_stationary_variances() {
        let (grid, st) = stationary_linear_gaussian(&two_block(), &DriftSpec::linear(2.0, 0.5), 8).unwrap();
        for (k, &u) in grid.nodes().iter().enumerate() {
            let deg = if u <= 0.5 { 0.6 } else { 0.5 };
            assert!((st.variances[k] - 1.0 / (2.0 * (2.5 - 0.5 * deg))).abs() < 1e-14);
            assert!(st.means[k].abs() < 1e-14);
        }
        assert!(stationary_linear_gaussian(&two_block(), &DriftSpec::linear(0.5, 1.0), 8).is_err());
    }

    #[test]
    fn flow_approaches_stationary_law() {
        let g = two_block();
        let law = solve_linear_gaussian(&g, &DriftSpec::linear(2.0, 0.5), &InitialLaw::gaussian(1.0, 1.0), 8, 0.01, 10.0)
            .unwrap();
        let st = law.stationary.clone().unwrap();
        let s = law.steps();
        for k in 0..8 {
            let gk = law.node_gaussian(s, k, 0).unwrap();
            assert!((gk.mean - st.means[k]).abs() < 1e-6);
            assert!((gk.variance - st.variances[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_unsupported_inputs() {
        let g = Graphon::constant(1.0).unwrap();
        let nonlinear = DriftSpec::uncoupled(1.0, 0.2);
        assert!(matches!(
            solve_linear_gaussian(&g, &nonlinear, &InitialLaw::gaussian(0.0, 1.0), 4, 0.1, 1.0),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            solve_linear_gaussian(&g, &DriftSpec::linear(1.0, 0.0), &InitialLaw::point_mass(0.0), 4, 0.1, 1.0),
            Err(Error::Unsupported(_))
        ));
        assert!(solve_linear_gaussian(&g, &DriftSpec::linear(1.0, 0.0), &InitialLaw::gaussian(0.0, 1.0), 4, 0.3, 1.0).is_err());
    }

    #[test]
    fn hat_mu_bookkeeping() {
        let g = two_block();
        let init = InitialLaw::GaussianPerBlock {
            boundaries: vec![0.0, 0.5, 1.0],
            blocks: vec![
                AffineMean { intercept: vec![-1.0], slope: vec![0.0] },
                AffineMean { intercept: vec![1.0], slope: vec![0.0] },
            ],
            variance: 1.0,
            theta0: 0.1,
        };
        let law = solve_linear_gaussian(&g, &DriftSpec::linear(1.0, 0.0), &init, 2, 0.1, 1.0).unwrap();
        let mix = law.hat_mu_mixture(0.0).unwrap();
        assert_eq!(mix.components().len(), 2);
        assert_eq!(mix.mean(), 0.0);
        assert!(law.hat_mu(0.05).is_err());
        assert!(law.hat_mu(1.1).is_err());

        let one = solve_linear_gaussian(&Graphon::constant(0.5).unwrap(), &DriftSpec::linear(1.0, 0.2), &InitialLaw::gaussian(0.3, 0.5), 2, 0.1, 0.5)
            .unwrap();
        let m = one.hat_mu_mixture(0.5).unwrap();
        assert_eq!(m.components().len(), 1);
        assert_eq!(m.components()[0], one.node_gaussian(5, 0, 0).unwrap());
    }

    fn picard_opts(m: usize, particles: usize, seed: u64) -> PicardOptions {
        PicardOptions {
            m,
            particles,
            max_iterations: 10,
            dt: 0.01,
            horizon: 0.5,
            tol: 1e-3,
            save_every: 10,
            seed,
        }
    }

    #[test]
    fn picard_uncoupled_stops_after_one_iteration() {
        let g = two_block();
        let law = solve_picard(&g, &DriftSpec::linear(1.0, 0.0), &InitialLaw::gaussian(0.0, 1.0), &picard_opts(4, 100, 3))
            .unwrap();
        let rep = law.picard_report().unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        match law.hat_mu(0.5).unwrap() {
            HatMu::Pooled(e) => assert_eq!(e.len(), 4 * 100),
            HatMu::Mixture(_) => panic!("expected pooled cloud"),
        }
    }

    #[test]
    fn picard_is_deterministic_and_converges() {
        let g = two_block();
        let spec = DriftSpec::linear(2.0, 0.5);
        let init = InitialLaw::gaussian(1.0, 1.0);
        let a = solve_picard(&g, &spec, &init, &picard_opts(4, 200, 11)).unwrap();
        let b = solve_picard(&g, &spec, &init, &picard_opts(4, 200, 11)).unwrap();
        assert_eq!(a.node_cloud(50, 2).unwrap(), b.node_cloud(50, 2).unwrap());
        assert!(a.picard_report().unwrap().converged);
        assert!(a.picard_report().unwrap().iterations >= 2);
    }

    #[test]
    fn picard_nonlinear_runs() {
        let spec = DriftSpec::Custom {
            dim: 1,
            f_rate: 2.0,
            f_sine: 0.3,
            b_self: 0.0,
            b_other: 0.2,
            b_sine: 0.3,
            k_f: 2.3,
            k_b: 0.5,
            c0: 1.7,
        };
        let law = solve_picard(&Graphon::min(), &spec, &InitialLaw::gaussian(0.5, 0.5), &picard_opts(4, 200, 2)).unwrap();
        assert!(law.picard_report().unwrap().converged);
    }

    #[test]
    fn lipschitz_profile_is_zero_for_flat_init() {
        let law = solve_linear_gaussian(&two_block(), &DriftSpec::linear(2.0, 0.5), &InitialLaw::gaussian(1.0, 1.0), 8, 0.1, 2.0)
            .unwrap();
        assert!(law.lipschitz_in_u_profile().unwrap().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn square_exponential_moment_variance_bound() {
        let spec = DriftSpec::linear(2.0, 0.5);
        let init = InitialLaw::gaussian(1.0, 1.0);
        let law = solve_linear_gaussian(&two_block(), &spec, &init, 8, 0.01, 5.0).unwrap();
        let kappa = crate::dynamics::kappa_of(&spec);
        let theta = 0.99 * kappa.min(init.theta0()) / 4.0;
        let LimitKind::GaussianFlow { variances, .. } = law.kind() else { unreachable!() };
        assert!(variances.iter().all(|&v| v > 0.0 && v < 1.0 / (2.0 * theta)));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let law = solve_linear_gaussian(&Graphon::constant(1.0).unwrap(), &DriftSpec::linear(1.0, 0.5), &InitialLaw::gaussian(0.0, 1.0), 2, 0.5, 1.0)
            .unwrap();
        let mut buf = Vec::new();
        law.write_csv(&mut buf, 1).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("u,t,mean_0,variance\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 2);
    }
}
