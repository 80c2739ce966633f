//! Euler–Maruyama simulation of the finite particle system and of the
//! coupled limit particles, with the pathwise remainder diagnostics.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dynamics::{kappa_of, DriftCoeffs, DriftSpec, InitialLaw};
use crate::error::{Error, Result};
use crate::graphon::{sample_interaction, Graphon, InteractionMatrix, SamplingMode};
use crate::limitlaw::{grid_index, LimitLaw};
use crate::ot::EmpiricalMeasure;
use crate::rng;

/// Largest `n` for which the interaction matrix is materialized.
pub const DENSE_CAP: usize = 8192;

/// States beyond this magnitude count as divergence.
const BLOWUP: f64 = 1e100;

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub n: usize,
    pub mode: SamplingMode,
    pub dt: f64,
    pub horizon: f64,
    pub save_times: Vec<f64>,
    pub seed: u64,
    pub undirected: bool,
    /// Skip the block-aggregated path even when it applies.
    pub force_general: bool,
}

impl SimOptions {
    pub fn new(n: usize, mode: SamplingMode, dt: f64, horizon: f64, save_times: Vec<f64>, seed: u64) -> Self {
        Self {
            n,
            mode,
            dt,
            horizon,
            save_times,
            seed,
            undirected: false,
            force_general: false,
        }
    }

    fn steps(&self) -> Result<usize> {
        if self.n == 0 {
            return Err(Error::config("n", "must be >= 1"));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("dt", "must be > 0"));
        }
        grid_index(self.horizon, self.dt).map_err(|_| Error::config("T", "horizon must be a multiple of dt"))
    }

    /// Save steps, sorted and deduplicated.
    fn save_steps(&self, steps: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.save_times.len());
        for &t in &self.save_times {
            let s = grid_index(t, self.dt).map_err(|_| {
                Error::config("save_times", format!("t = {t} is not on the dt = {} grid", self.dt))
            })?;
            if s > steps {
                return Err(Error::config("save_times", format!("t = {t} is beyond the horizon")));
            }
            out.push(s);
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// Particle positions at the saved times.
#[derive(Clone, Debug)]
pub struct Snapshots {
    pub times: Vec<f64>,
    pub states: Vec<EmpiricalMeasure>,
}

impl Snapshots {
    /// CSV rows `(replication, t, i, x_0, ..)`; the header is written by the caller.
    pub fn write_rows<W: Write>(&self, out: &mut W, replication: usize) -> Result<()> {
        for (t, m) in self.times.iter().zip(&self.states) {
            for i in 0..m.len() {
                write!(out, "{replication},{t},{i}")?;
                for x in m.point(i) {
                    write!(out, ",{x}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

pub fn trajectory_header(dim: usize) -> String {
    let cols: Vec<String> = (0..dim).map(|a| format!("x_{a}")).collect();
    format!("replication,t,i,{}", cols.join(","))
}

/// Computes `(1/n) Σ_j ξ_ij b(x_i, x_j)` for all `i`.
enum Engine {
    /// Deterministic sampling of a piecewise-constant graphon: per-block
    /// sums of `φ` give an `O(n + B^2)` evaluation.
    Blocks {
        block: Vec<usize>,
        table: Vec<Vec<f64>>,
        row_mass: Vec<f64>,
    },
    Dense { xi: Vec<f64>, row_mass: Vec<f64> },
    Lazy { xi: InteractionMatrix },
}

impl Engine {
    fn new(xi: InteractionMatrix, force_general: bool) -> Self {
        let n = xi.n();
        if !force_general {
            if let Some((block, table)) = xi.block_structure() {
                let nb = table.len();
                let mut counts = vec![0usize; nb];
                block.iter().for_each(|&b| counts[b] += 1);
                let row_mass = (0..n)
                    .map(|i| {
                        (0..nb)
                            .map(|b| table[block[i]][b] * counts[b] as f64)
                            .sum::<f64>()
                            / n as f64
                    })
                    .collect();
                return Engine::Blocks { block, table, row_mass };
            }
        }
        if n <= DENSE_CAP {
            let dense = xi.to_dense();
            let row_mass = dense.chunks_exact(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
            Engine::Dense { xi: dense, row_mass }
        } else {
            Engine::Lazy { xi }
        }
    }

    /// Adds the interaction drift of every particle to `out` (`n × d`).
    fn add_interaction(&self, c: &DriftCoeffs, x: &[f64], dim: usize, phi: &mut [f64], out: &mut [f64]) {
        for (p, &v) in phi.iter_mut().zip(x) {
            *p = DriftSpec::phi_component(c, v);
        }
        let n = x.len() / dim;
        match self {
            Engine::Blocks { block, table, row_mass } => {
                let nb = table.len();
                let mut sums = vec![0.0; nb * dim];
                for j in 0..n {
                    for a in 0..dim {
                        sums[block[j] * dim + a] += phi[j * dim + a];
                    }
                }
                sums.iter_mut().for_each(|s| *s /= n as f64);
                for i in 0..n {
                    let row = &table[block[i]];
                    for a in 0..dim {
                        let agg: f64 = (0..nb).map(|b| row[b] * sums[b * dim + a]).sum();
                        out[i * dim + a] += c.b_self * x[i * dim + a] * row_mass[i] + agg;
                    }
                }
            }
            Engine::Dense { xi, row_mass } => {
                let phi = &*phi;
                out.par_chunks_exact_mut(dim).enumerate().for_each(|(i, o)| {
                    let row = &xi[i * n..(i + 1) * n];
                    for a in 0..dim {
                        let mut acc = 0.0;
                        for (j, &w) in row.iter().enumerate() {
                            if w != 0.0 {
                                acc += w * phi[j * dim + a];
                            }
                        }
                        o[a] += c.b_self * x[i * dim + a] * row_mass[i] + acc / n as f64;
                    }
                });
            }
            Engine::Lazy { xi } => {
                let phi = &*phi;
                out.par_chunks_exact_mut(dim).enumerate().for_each(|(i, o)| {
                    let row = xi.row(i);
                    let mass = row.iter().sum::<f64>() / n as f64;
                    for a in 0..dim {
                        let acc: f64 = row.iter().enumerate().map(|(j, &w)| w * phi[j * dim + a]).sum();
                        o[a] += c.b_self * x[i * dim + a] * mass + acc / n as f64;
                    }
                });
            }
        }
    }
}

fn initial_states(init: &InitialLaw, n: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut x = vec![0.0; n * dim];
    for (i, chunk) in x.chunks_exact_mut(dim).enumerate() {
        let mut r = rng::stream(seed, &[rng::tag::INIT, i as u64]);
        init.draw_into((i + 1) as f64 / n as f64, &mut r, chunk);
    }
    x
}

fn noise_streams(n: usize, seed: u64) -> Vec<ChaCha8Rng> {
    (0..n).map(|i| rng::stream(seed, &[rng::tag::NOISE, i as u64])).collect()
}

fn draw_noise(streams: &mut [ChaCha8Rng], dim: usize, sqrt_dt: f64, out: &mut [f64]) {
    for (r, o) in streams.iter_mut().zip(out.chunks_exact_mut(dim)) {
        for z in o.iter_mut() {
            *z = sqrt_dt * r.sample::<f64, _>(StandardNormal);
        }
    }
}

fn check_finite(x: &[f64], step: usize, dt: f64) -> Result<()> {
    if x.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
        return Err(Error::Diverged {
            step,
            time: step as f64 * dt,
        });
    }
    Ok(())
}

fn validate_inputs(spec: &DriftSpec, init: &InitialLaw) -> Result<usize> {
    spec.validate()?;
    let dim = spec.dim();
    init.validate(dim)?;
    Ok(dim)
}

/// Simulates the finite system and returns `ν^n_t` at the saved times.
pub fn run_finite(g: &Graphon, spec: &DriftSpec, init: &InitialLaw, opts: &SimOptions) -> Result<Snapshots> {
    let dim = validate_inputs(spec, init)?;
    let steps = opts.steps()?;
    let save = opts.save_steps(steps)?;
    let n = opts.n;
    let c = spec.coeffs();
    let xi = sample_interaction(g, n, opts.mode, opts.seed)?.with_undirected(opts.undirected);
    let engine = Engine::new(xi, opts.force_general);
    let sqrt_dt = opts.dt.sqrt();

    let mut x = initial_states(init, n, dim, opts.seed);
    let mut streams = noise_streams(n, opts.seed);
    let mut drift = vec![0.0; n * dim];
    let mut phi = vec![0.0; n * dim];
    let mut noise = vec![0.0; n * dim];
    let mut snaps = Snapshots {
        times: Vec::with_capacity(save.len()),
        states: Vec::with_capacity(save.len()),
    };
    let mut next = 0;
    for s in 0..=steps {
        if save.get(next) == Some(&s) {
            snaps.times.push(s as f64 * opts.dt);
            snaps.states.push(EmpiricalMeasure::new(dim, x.clone())?);
            next += 1;
        }
        if s == steps {
            break;
        }
        for (d, &v) in drift.iter_mut().zip(&x) {
            *d = spec.f_component(&c, v);
        }
        engine.add_interaction(&c, &x, dim, &mut phi, &mut drift);
        draw_noise(&mut streams, dim, sqrt_dt, &mut noise);
        for ((v, d), z) in x.iter_mut().zip(&drift).zip(&noise) {
            *v += d * opts.dt + z;
        }
        check_finite(&x, s + 1, opts.dt)?;
    }
    Ok(snaps)
}

/// Remainder terms at one time, each stored as `n × d` vectors.
#[derive(Clone, Debug)]
pub struct DiagnosticsFrame {
    pub t: f64,
    pub r: Vec<f64>,
    pub t_tilde: Vec<f64>,
    pub t_term: Vec<f64>,
    pub p_integrand: f64,
    /// Trapezoid approximation of `∫_0^t e^{-κ(t-s)} p(s) ds` on the
    /// diagnostic grid.
    pub discounted_integral: f64,
    pub dim: usize,
}

fn norms(v: &[f64], dim: usize) -> Vec<f64> {
    v.chunks_exact(dim).map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

fn rms(v: &[f64], dim: usize) -> f64 {
    let n = v.len() / dim;
    (v.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt()
}

impl DiagnosticsFrame {
    pub fn r_norms(&self) -> Vec<f64> {
        norms(&self.r, self.dim)
    }

    pub fn t_tilde_norms(&self) -> Vec<f64> {
        norms(&self.t_tilde, self.dim)
    }

    pub fn t_term_norms(&self) -> Vec<f64> {
        norms(&self.t_term, self.dim)
    }

    /// Largest componentwise `|R - (T̃ + T)|`.
    pub fn identity_residual(&self) -> f64 {
        self.r
            .iter()
            .zip(&self.t_tilde)
            .zip(&self.t_term)
            .map(|((r, a), b)| (r - (a + b)).abs())
            .fold(0.0, f64::max)
    }

    pub fn r_rms(&self) -> f64 {
        rms(&self.r, self.dim)
    }

    pub fn t_tilde_rms(&self) -> f64 {
        rms(&self.t_tilde, self.dim)
    }

    pub fn t_term_rms(&self) -> f64 {
        rms(&self.t_term, self.dim)
    }
}

#[derive(Clone, Debug)]
pub struct CoupledFrame {
    pub t: f64,
    pub finite: EmpiricalMeasure,
    pub limit: EmpiricalMeasure,
    pub diagnostics: Option<DiagnosticsFrame>,
}

#[derive(Clone, Debug)]
pub struct CoupledOptions {
    pub sim: SimOptions,
    /// Compute remainder diagnostics (O(n^2) per evaluation).
    pub diagnostics: bool,
    /// Diagnostics are also evaluated every `integral_stride` steps to
    /// refine the discounted integral.
    pub integral_stride: usize,
}

/// Per-particle weights `w_l G(u_i, u_l)` of the limit interaction sum.
enum LimitWeights {
    Blocks { particle_block: Vec<usize>, node_block: Vec<usize>, table: Vec<Vec<f64>> },
    Dense(Vec<f64>),
}

impl LimitWeights {
    fn new(g: &Graphon, limit: &LimitLaw, n: usize) -> Self {
        let grid = limit.grid();
        let m = grid.len();
        if let Some(table) = g.block_values() {
            return LimitWeights::Blocks {
                particle_block: (0..n).map(|i| g.block_of((i + 1) as f64 / n as f64)).collect(),
                node_block: grid.nodes().iter().map(|&u| g.block_of(u)).collect(),
                table,
            };
        }
        let mut w = vec![0.0; n * m];
        for i in 0..n {
            let u = (i + 1) as f64 / n as f64;
            for l in 0..m {
                w[i * m + l] = grid.weights()[l] * g.eval_unchecked(u, grid.nodes()[l]);
            }
        }
        LimitWeights::Dense(w)
    }

    /// `out[i][a] = Σ_l w_l G(u_i, u_l) E_l[φ_a](step)`.
    fn apply(&self, limit: &LimitLaw, step: usize, n: usize, dim: usize, out: &mut [f64]) {
        let grid = limit.grid();
        let m = grid.len();
        match self {
            LimitWeights::Blocks {
                particle_block,
                node_block,
                table,
            } => {
                let nb = table.len();
                let mut sums = vec![0.0; nb * dim];
                for l in 0..m {
                    let phi = limit.phi_mean_node(step, l);
                    for a in 0..dim {
                        sums[node_block[l] * dim + a] += grid.weights()[l] * phi[a];
                    }
                }
                for i in 0..n {
                    let row = &table[particle_block[i]];
                    for a in 0..dim {
                        out[i * dim + a] = (0..nb).map(|b| row[b] * sums[b * dim + a]).sum();
                    }
                }
            }
            LimitWeights::Dense(w) => {
                for i in 0..n {
                    for a in 0..dim {
                        out[i * dim + a] = (0..m).map(|l| w[i * m + l] * limit.phi_mean_node(step, l)[a]).sum();
                    }
                }
            }
        }
    }
}

/// Advances the finite system and the limit particles `X̄_{i/n}` with the
/// same initial draws and the same Brownian increments.
pub fn run_coupled(
    g: &Graphon,
    spec: &DriftSpec,
    init: &InitialLaw,
    limit: &LimitLaw,
    opts: &CoupledOptions,
) -> Result<Vec<CoupledFrame>> {
    let dim = validate_inputs(spec, init)?;
    let sim = &opts.sim;
    let steps = sim.steps()?;
    let save = sim.save_steps(steps)?;
    if limit.dim() != dim {
        return Err(Error::config("limit", "limit law dimension differs from the drift"));
    }
    let ratio = (sim.dt / limit.dt()).round();
    if ratio < 1.0 || (ratio * limit.dt() - sim.dt).abs() > 1e-9 * sim.dt {
        return Err(Error::config("dt", "must be a multiple of the limit law's time step"));
    }
    let ratio = ratio as usize;
    if steps * ratio > limit.steps() {
        return Err(Error::config("T", "horizon exceeds the limit law's horizon"));
    }
    let n = sim.n;
    let c = spec.coeffs();
    let xi = sample_interaction(g, n, sim.mode, sim.seed)?.with_undirected(sim.undirected);
    let engine = Engine::new(xi.clone(), sim.force_general);
    let weights = LimitWeights::new(g, limit, n);
    let degree: Vec<f64> = (0..n).map(|i| g.degree_unchecked((i + 1) as f64 / n as f64)).collect();
    let kappa = kappa_of(spec);
    let stride = opts.integral_stride.max(1);
    let sqrt_dt = sim.dt.sqrt();

    let mut x = initial_states(init, n, dim, sim.seed);
    let mut xbar = x.clone();
    let mut streams = noise_streams(n, sim.seed);
    let (mut drift, mut drift_bar, mut phi, mut noise, mut psi) = (
        vec![0.0; n * dim],
        vec![0.0; n * dim],
        vec![0.0; n * dim],
        vec![0.0; n * dim],
        vec![0.0; n * dim],
    );
    let mut frames = Vec::with_capacity(save.len());
    let mut next = 0;
    let mut integral = 0.0;
    let mut last_diag: Option<(usize, f64)> = None;

    for s in 0..=steps {
        let saving = save.get(next) == Some(&s);
        let diag_now = opts.diagnostics && (saving || s % stride == 0 || s == steps);
        let mut frame_diag = None;
        if diag_now {
            let mut d = diagnostics(&c, &xi, limit, s * ratio, &xbar, dim, s as f64 * sim.dt);
            integral = match last_diag {
                None => 0.0,
                Some((s0, p0)) => {
                    let h = (s - s0) as f64 * sim.dt;
                    let decay = (-kappa * h).exp();
                    decay * integral + 0.5 * h * (decay * p0 + d.p_integrand)
                }
            };
            d.discounted_integral = integral;
            last_diag = Some((s, d.p_integrand));
            frame_diag = Some(d);
        }
        if saving {
            frames.push(CoupledFrame {
                t: s as f64 * sim.dt,
                finite: EmpiricalMeasure::new(dim, x.clone())?,
                limit: EmpiricalMeasure::new(dim, xbar.clone())?,
                diagnostics: frame_diag,
            });
            next += 1;
        }
        if s == steps {
            break;
        }
        for (d, &v) in drift.iter_mut().zip(&x) {
            *d = spec.f_component(&c, v);
        }
        engine.add_interaction(&c, &x, dim, &mut phi, &mut drift);
        weights.apply(limit, s * ratio, n, dim, &mut psi);
        for i in 0..n {
            for a in 0..dim {
                let k = i * dim + a;
                let v = xbar[k];
                drift_bar[k] = spec.f_component(&c, v) + c.b_self * v * degree[i] + psi[k];
            }
        }
        draw_noise(&mut streams, dim, sqrt_dt, &mut noise);
        for k in 0..n * dim {
            x[k] += drift[k] * sim.dt + noise[k];
            xbar[k] += drift_bar[k] * sim.dt + noise[k];
        }
        check_finite(&x, s + 1, sim.dt)?;
        check_finite(&xbar, s + 1, sim.dt)?;
    }
    Ok(frames)
}

/// Literal `O(n^2)` evaluation of the remainder terms at one time.
fn diagnostics(
    c: &DriftCoeffs,
    xi: &InteractionMatrix,
    limit: &LimitLaw,
    limit_step: usize,
    xbar: &[f64],
    dim: usize,
    t: f64,
) -> DiagnosticsFrame {
    let n = xi.n();
    let mut phi_law = vec![0.0; n * dim];
    for (j, chunk) in phi_law.chunks_exact_mut(dim).enumerate() {
        limit.phi_mean_at(limit_step, (j + 1) as f64 / n as f64, chunk);
    }
    let b = |x: f64, y: f64| c.b_self * x + DriftSpec::phi_component(c, y);
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut r, mut tt, mut tm) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
            for j in 0..n {
                let w = xi.get(i, j);
                let g = xi.mean_entry(i, j);
                for a in 0..dim {
                    let xa = xbar[i * dim + a];
                    let b_ij = b(xa, xbar[j * dim + a]);
                    let b_i0 = b(xa, 0.0);
                    let b_law = c.b_self * xa + phi_law[j * dim + a];
                    r[a] += w * b_ij - g * b_law;
                    tt[a] += (w - g) * b_i0;
                    tm[a] += (w - g) * (b_ij - b_i0) + g * (b_ij - b_law);
                }
            }
            for v in r.iter_mut().chain(tt.iter_mut()).chain(tm.iter_mut()) {
                *v /= n as f64;
            }
            (r, tt, tm)
        })
        .collect();
    let mut frame = DiagnosticsFrame {
        t,
        r: Vec::with_capacity(n * dim),
        t_tilde: Vec::with_capacity(n * dim),
        t_term: Vec::with_capacity(n * dim),
        p_integrand: 0.0,
        discounted_integral: 0.0,
        dim,
    };
    for (r, tt, tm) in rows {
        frame.r.extend(r);
        frame.t_tilde.extend(tt);
        frame.t_term.extend(tm);
    }
    let r_norms = frame.r_norms();
    let xbar_norms = norms(xbar, dim);
    frame.p_integrand = r_norms
        .iter()
        .zip(&xbar_norms)
        .map(|(r, x)| {
            let v = r + (1.0 + x) / n as f64;
            v * v
        })
        .sum::<f64>()
        / n as f64;
    frame
}

/// Root-mean-square distance `(1/n Σ |X_i - X̄_{i/n}|^2)^{1/2}` per frame.
pub fn coupling_gap(frames: &[CoupledFrame]) -> Vec<f64> {
    frames
        .iter()
        .map(|f| {
            let n = f.finite.len();
            let s: f64 = f
                .finite
                .points()
                .iter()
                .zip(f.limit.points())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (s / n as f64).sqrt()
        })
        .collect()
}

pub const DIAGNOSTICS_HEADER: &str = "replication,t,R_rms,Ttilde_rms,T_rms,p_integrand,discounted_integral";

pub fn write_diagnostics_rows<W: Write>(out: &mut W, replication: usize, frames: &[CoupledFrame]) -> Result<()> {
    for f in frames {
        if let Some(d) = &f.diagnostics {
            writeln!(
                out,
                "{replication},{},{},{},{},{},{}",
                f.t,
                d.r_rms(),
                d.t_tilde_rms(),
                d.t_term_rms(),
                d.p_integrand,
                d.discounted_integral
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limitlaw::solve_linear_gaussian;

    fn zero_drift() -> DriftSpec {
        DriftSpec::Custom {
            dim: 1,
            f_rate: 0.0,
            f_sine: 0.0,
            b_self: 0.0,
            b_other: 0.0,
            b_sine: 0.0,
            k_f: 0.0,
            k_b: 0.0,
            c0: 0.0,
        }
    }

    fn two_block() -> Graphon {
        Graphon::block_constant(vec![0.0, 0.5, 1.0], vec![vec![0.9, 0.3], vec![0.3, 0.7]]).unwrap()
    }

    #[test]
    fn brownian_motion_is_reproducible() {
        let g = Graphon::constant(0.5).unwrap();
        let opts = SimOptions::new(50, SamplingMode::Deterministic, 0.1, 1.0, vec![0.0, 0.5, 1.0], 7);
        let a = run_finite(&g, &zero_drift(), &InitialLaw::gaussian(0.0, 1.0), &opts).unwrap();
        let b = run_finite(&g, &zero_drift(), &InitialLaw::gaussian(0.0, 1.0), &opts).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.times, vec![0.0, 0.5, 1.0]);
        // X(t) - X(0) has variance t
        let incr: Vec<f64> = a.states[2].points().iter().zip(a.states[0].points()).map(|(x, y)| x - y).collect();
        assert!(incr.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ou_sample_variance() {
        let g = Graphon::constant(0.0).unwrap();
        let spec = DriftSpec::uncoupled(1.0, 0.0);
        let n = 10_000;
        let opts = SimOptions::new(n, SamplingMode::Deterministic, 0.01, 2.0, vec![2.0], 3);
        let snap = run_finite(&g, &spec, &InitialLaw::point_mass(0.0), &opts).unwrap();
        let x = snap.states[0].points();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let exact = (1.0 - (-4.0f64).exp()) / 2.0;
        // the scheme's own variance recursion v <- (1 - dt)^2 v + dt
        let a2 = (1.0f64 - 0.01).powi(2);
        let scheme = 0.01 * (1.0 - a2.powi(200)) / (1.0 - a2);
        assert!((scheme - exact).abs() < 0.01);
        let se = scheme * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - scheme).abs() < 3.0 * se, "{var} vs {scheme}");
    }

    #[test]
    fn fast_path_matches_general_path() {
        let spec = DriftSpec::Custom {
            dim: 2,
            f_rate: 2.0,
            f_sine: 0.3,
            b_self: 0.4,
            b_other: 0.2,
            b_sine: 0.5,
            k_f: 2.3,
            k_b: 0.7,
            c0: 1.7,
        };
        let init = InitialLaw::GaussianPerBlock {
            boundaries: vec![0.0, 1.0],
            blocks: vec![crate::dynamics::AffineMean { intercept: vec![1.0, -1.0], slope: vec![0.5, 0.0] }],
            variance: 0.5,
            theta0: 0.1,
        };
        let mut opts = SimOptions::new(37, SamplingMode::Deterministic, 0.01, 1.0, vec![0.5, 1.0], 5);
        let fast = run_finite(&two_block(), &spec, &init, &opts).unwrap();
        opts.force_general = true;
        let slow = run_finite(&two_block(), &spec, &init, &opts).unwrap();
        for (a, b) in fast.states.iter().zip(&slow.states) {
            for (x, y) in a.points().iter().zip(b.points()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn linear_mean_matches_flow() {
        let g = Graphon::constant(1.0).unwrap();
        let spec = DriftSpec::linear(2.0, 0.5);
        let init = InitialLaw::gaussian(1.0, 1.0);
        let n = 4000;
        let opts = SimOptions::new(n, SamplingMode::Deterministic, 0.01, 1.0, vec![1.0], 9);
        let snap = run_finite(&g, &spec, &init, &opts).unwrap();
        let mean = snap.states[0].points().iter().sum::<f64>() / n as f64;
        let law = solve_linear_gaussian(&g, &spec, &init, 4, 0.01, 1.0).unwrap();
        let gk = law.node_gaussian(100, 0, 0).unwrap();
        assert!((mean - gk.mean).abs() < 3.0 * (gk.variance / n as f64).sqrt() + 0.05 * 0.01 * 1.0);
    }

    #[test]
    fn off_grid_save_time_rejected() {
        let g = Graphon::constant(1.0).unwrap();
        let opts = SimOptions::new(4, SamplingMode::Deterministic, 0.1, 1.0, vec![0.05], 0);
        assert!(matches!(
            run_finite(&g, &DriftSpec::linear(1.0, 0.0), &InitialLaw::gaussian(0.0, 1.0), &opts),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn divergence_names_the_step() {
        let g = Graphon::constant(1.0).unwrap();
        // explosive linear drift: f(x) = 500 x
        let spec = DriftSpec::Custom {
            dim: 1,
            f_rate: -500.0,
            f_sine: 0.0,
            b_self: 0.0,
            b_other: 0.0,
            b_sine: 0.0,
            k_f: 500.0,
            k_b: 0.0,
            c0: -500.0,
        };
        let opts = SimOptions::new(3, SamplingMode::Deterministic, 0.1, 100.0, vec![], 0);
        match run_finite(&g, &spec, &InitialLaw::gaussian(1.0, 1.0), &opts) {
            Err(Error::Diverged { step, .. }) => assert!(step > 0 && step < 1000),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    fn coupled(mode: SamplingMode, n: usize, diagnostics: bool, seed: u64) -> Vec<CoupledFrame> {
        let g = two_block();
        let spec = DriftSpec::linear(2.0, 0.5);
        let init = InitialLaw::gaussian(1.0, 1.0);
        let limit = solve_linear_gaussian(&g, &spec, &init, 16, 0.01, 1.0).unwrap();
        let opts = CoupledOptions {
            sim: SimOptions::new(n, mode, 0.02, 1.0, vec![0.0, 0.5, 1.0], seed),
            diagnostics,
            integral_stride: 5,
        };
        run_coupled(&g, &spec, &init, &limit, &opts).unwrap()
    }

    #[test]
    fn diagnostics_identities() {
        for mode in [SamplingMode::Deterministic, SamplingMode::Bernoulli] {
            let frames = coupled(mode, 40, true, 1);
            for f in &frames {
                let d = f.diagnostics.as_ref().unwrap();
                assert!(d.identity_residual() <= 1e-12);
                if mode == SamplingMode::Deterministic {
                    assert!(d.t_tilde.iter().all(|&v| v == 0.0));
                }
            }
            assert_eq!(frames[0].diagnostics.as_ref().unwrap().discounted_integral, 0.0);
            assert!(frames[2].diagnostics.as_ref().unwrap().discounted_integral > 0.0);
        }
    }

    #[test]
    fn coupling_gap_starts_at_zero_and_bounds_w1() {
        let frames = coupled(SamplingMode::Bernoulli, 60, false, 4);
        let gap = coupling_gap(&frames);
        assert_eq!(gap[0], 0.0);
        for (f, gp) in frames.iter().zip(&gap) {
            let w1 = crate::ot::w1_sorted_1d(&f.finite, &f.limit).unwrap();
            assert!(w1 <= gp + 1e-12);
        }
    }

    #[test]
    fn zero_interaction_coupling_is_exact() {
        let g = two_block();
        let spec = DriftSpec::linear(1.0, 0.0);
        let init = InitialLaw::gaussian(0.0, 1.0);
        let limit = solve_linear_gaussian(&g, &spec, &init, 8, 0.01, 1.0).unwrap();
        let opts = CoupledOptions {
            sim: SimOptions::new(30, SamplingMode::Bernoulli, 0.01, 1.0, vec![0.5, 1.0], 2),
            diagnostics: false,
            integral_stride: 1,
        };
        let frames = run_coupled(&g, &spec, &init, &limit, &opts).unwrap();
        assert!(coupling_gap(&frames).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trajectory_rows() {
        let g = Graphon::constant(1.0).unwrap();
        let opts = SimOptions::new(3, SamplingMode::Deterministic, 0.5, 1.0, vec![0.0, 1.0], 1);
        let snap = run_finite(&g, &DriftSpec::linear(1.0, 0.0), &InitialLaw::gaussian(0.0, 1.0), &opts).unwrap();
        let mut buf = Vec::new();
        snap.write_rows(&mut buf, 0).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
        assert_eq!(trajectory_header(1), "replication,t,i,x_0");
    }
}
