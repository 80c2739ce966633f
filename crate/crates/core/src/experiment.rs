//! Runs a validated [`ExperimentConfig`] and writes its artifacts.
//!
//! Every CSV starts with a `# config_hash: <sha256>` line and every JSON
//! artifact carries a `config_hash` field. Artifacts are assembled in memory
//! and written through temporary files, so a failed run leaves nothing
//! behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::concentration::mgf::{hoeffding_mgf_check, subgaussian_bound_check};
use crate::concentration::tails::{marginal_statistics, replication_seed, TailRun};
use crate::concentration::{
    calibrate_epsilon, estimate_tail_marginal, estimate_tail_sup, indep_empirical_tail, invariant_experiment,
    write_tail_rows, ParticleSetup, Reference, TailEstimate, TailOptions, TAIL_CSV_HEADER,
};
use crate::config::{ExperimentConfig, ExperimentKind, LimitSolver};
use crate::dynamics::{is_dissipative, kappa_of};
use crate::error::{Error, Result};
use crate::limitlaw::{solve_linear_gaussian, solve_picard, LimitLaw, PicardOptions};
use crate::rng;
use crate::simulate::{
    coupling_gap, run_coupled, run_finite, trajectory_header, write_diagnostics_rows, CoupledOptions, SimOptions,
    DIAGNOSTICS_HEADER,
};
use crate::validation::{lambda_grid, run_suite, CHECKS_CSV_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Every tail point is censored.
    Inconclusive,
    /// A `validate` or `mgf_checks` check failed.
    ChecksFailed,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub outcome: Outcome,
    pub config_hash: String,
    pub files: Vec<PathBuf>,
    pub summary: Value,
}

/// A table held as CSV text (header line first, no hash line).
struct Table {
    name: String,
    csv: String,
}

struct Artifacts {
    tables: Vec<Table>,
    summary: Value,
    outcome: Outcome,
}

impl Artifacts {
    fn new() -> Self {
        Self {
            tables: Vec::new(),
            summary: json!({}),
            outcome: Outcome::Ok,
        }
    }

    fn table(&mut self, name: &str, header: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "{header}")?;
        fill(&mut buf)?;
        self.tables.push(Table {
            name: name.into(),
            csv: String::from_utf8(buf).expect("CSV is UTF-8"),
        });
        Ok(())
    }
}

fn csv_to_json(csv: &str) -> Value {
    let mut lines = csv.lines();
    let columns: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let cell = |s: &str| -> Value {
        if let Ok(i) = s.parse::<i64>() {
            return json!(i);
        }
        match s.parse::<f64>() {
            Ok(f) if f.is_finite() => json!(f),
            _ => json!(s),
        }
    };
    let rows: Vec<Value> = lines.map(|l| Value::Array(l.split(',').map(cell).collect())).collect();
    json!({ "columns": columns, "rows": rows })
}

fn setup_of(cfg: &ExperimentConfig) -> ParticleSetup {
    ParticleSetup {
        graphon: cfg.graphon.clone(),
        drift: cfg.drift.clone(),
        init: cfg.init.clone(),
        mode: cfg.sampling,
        dt: cfg.numerics.dt,
        undirected: cfg.undirected,
    }
}

fn tail_options(cfg: &ExperimentConfig, epsilons: Vec<f64>) -> TailOptions {
    TailOptions {
        n_values: cfg.numerics.n_values.clone(),
        epsilons,
        replications: cfg.numerics.replications,
        seed: cfg.seed,
        quad_points: cfg.numerics.quad_points,
        d_prime: cfg.d_prime(),
    }
}

fn pilot_options(cfg: &ExperimentConfig) -> TailOptions {
    let n0 = *cfg.numerics.n_values.iter().min().expect("validated non-empty");
    TailOptions {
        n_values: vec![n0],
        epsilons: vec![0.0],
        replications: cfg.numerics.pilot_replications,
        seed: rng::child(cfg.seed, rng::tag::PILOT, 0),
        quad_points: cfg.numerics.quad_points,
        d_prime: cfg.d_prime(),
    }
}

/// Thresholds from the config, or one threshold calibrated on pilot
/// statistics drawn from an independent seed.
fn resolve_epsilons(cfg: &ExperimentConfig, pilot: impl FnOnce(&TailOptions) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    if !cfg.numerics.epsilons.is_empty() {
        return Ok(cfg.numerics.epsilons.clone());
    }
    let target = cfg
        .numerics
        .calibrate_target
        .ok_or_else(|| Error::config("numerics.epsilons", "no epsilons given"))?;
    Ok(vec![calibrate_epsilon(&pilot(&pilot_options(cfg))?, target)?])
}

pub fn build_limit(cfg: &ExperimentConfig, horizon: f64) -> Result<LimitLaw> {
    let n = &cfg.numerics;
    let gaussian = match n.limit_solver {
        LimitSolver::Gaussian => true,
        LimitSolver::Picard => false,
        LimitSolver::Auto => cfg.drift.is_linear() && cfg.init.is_gaussian(),
    };
    if gaussian {
        solve_linear_gaussian(&cfg.graphon, &cfg.drift, &cfg.init, n.m, n.dt, horizon)
    } else {
        let opts = PicardOptions {
            m: n.m,
            particles: n.particles,
            max_iterations: n.max_iterations,
            dt: n.dt,
            horizon,
            tol: n.picard_tol,
            save_every: n.save_every,
            seed: cfg.seed,
        };
        solve_picard(&cfg.graphon, &cfg.drift, &cfg.init, &opts)
    }
}

fn limit_summary(limit: &LimitLaw) -> Value {
    json!({
        "kind": if limit.picard_report().is_some() { "sample_cloud" } else { "gaussian_flow" },
        "grid_size": limit.grid().len(),
        "dt": limit.dt(),
        "horizon": limit.horizon(),
        "picard": limit.picard_report(),
        "stationary": limit.stationary,
    })
}

fn model_summary(cfg: &ExperimentConfig) -> Value {
    json!({
        "kappa": kappa_of(&cfg.drift),
        "dissipative": is_dissipative(&cfg.drift),
        "b_at_zero_bounded": cfg.drift.b_at_zero_bounded(),
        "graphon_hash": crate::config::spec_hash(&cfg.graphon),
        "d_prime": cfg.d_prime(),
        "threshold_note": format!(
            "theorem thresholds n >= N0 max(eps^-(d'+2), 1) with d' = {} involve an unknown N0 and are not certified",
            cfg.d_prime()
        ),
    })
}

fn tail_tables(art: &mut Artifacts, estimates: &[TailEstimate]) -> Result<()> {
    art.table("tails", TAIL_CSV_HEADER, |b| {
        estimates.iter().try_for_each(|e| write_tail_rows(b, &e.points))
    })?;
    if estimates.iter().all(|e| e.is_inconclusive()) {
        art.outcome = Outcome::Inconclusive;
    }
    Ok(())
}

fn run_simulate(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let n = &cfg.numerics;
    let save = cfg.save_times();
    let limit = if n.diagnostics { Some(build_limit(cfg, n.horizon)?) } else { None };
    let mut gaps = Vec::new();
    for &np in &n.n_values {
        let sim = |r: usize| {
            let mut o = SimOptions::new(np, cfg.sampling, n.dt, n.horizon, save.clone(), replication_seed(cfg.seed, np, r));
            o.undirected = cfg.undirected;
            o
        };
        match &limit {
            None => {
                let runs = (0..n.replications)
                    .into_par_iter()
                    .map(|r| run_finite(&cfg.graphon, &cfg.drift, &cfg.init, &sim(r)))
                    .collect::<Result<Vec<_>>>()?;
                art.table(&format!("trajectories_n{np}"), &trajectory_header(cfg.drift.dim()), |b| {
                    runs.iter().enumerate().try_for_each(|(r, s)| s.write_rows(b, r))
                })?;
            }
            Some(limit) => {
                let runs = (0..n.replications)
                    .into_par_iter()
                    .map(|r| {
                        let opts = CoupledOptions {
                            sim: sim(r),
                            diagnostics: true,
                            integral_stride: 1,
                        };
                        run_coupled(&cfg.graphon, &cfg.drift, &cfg.init, limit, &opts)
                    })
                    .collect::<Result<Vec<_>>>()?;
                art.table(&format!("trajectories_n{np}"), &trajectory_header(cfg.drift.dim()), |b| {
                    for (r, frames) in runs.iter().enumerate() {
                        for f in frames {
                            for i in 0..f.finite.len() {
                                write!(b, "{r},{},{i}", f.t)?;
                                for x in f.finite.point(i) {
                                    write!(b, ",{x}")?;
                                }
                                writeln!(b)?;
                            }
                        }
                    }
                    Ok(())
                })?;
                art.table(&format!("diagnostics_n{np}"), DIAGNOSTICS_HEADER, |b| {
                    runs.iter().enumerate().try_for_each(|(r, f)| write_diagnostics_rows(b, r, f))
                })?;
                let last: Vec<f64> = runs.iter().map(|f| *coupling_gap(f).last().unwrap_or(&0.0)).collect();
                gaps.push(json!({ "n": np, "mean_final_coupling_gap": last.iter().sum::<f64>() / last.len() as f64 }));
            }
        }
    }
    art.summary = json!({
        "model": model_summary(cfg),
        "save_times": save,
        "coupling": gaps,
        "limit": limit.as_ref().map(limit_summary),
    });
    Ok(())
}

fn run_limit(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let limit = build_limit(cfg, cfg.numerics.horizon)?;
    let mut buf = Vec::new();
    limit.write_csv(&mut buf, cfg.numerics.export_stride)?;
    art.tables.push(Table {
        name: "limit".into(),
        csv: String::from_utf8(buf).expect("CSV is UTF-8"),
    });
    art.summary = json!({ "model": model_summary(cfg), "limit": limit_summary(&limit) });
    Ok(())
}

fn estimates_json(estimates: &[TailEstimate]) -> Value {
    json!(estimates)
}

fn run_tail_sup(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let n = &cfg.numerics;
    let setup = setup_of(cfg);
    let limit = build_limit(cfg, n.horizon)?;
    let eps = resolve_epsilons(cfg, |o| {
        let run = estimate_tail_sup(&setup, &limit, n.horizon, n.save_every, o)?;
        Ok(run.stats[0].iter().map(|row| row.iter().copied().fold(0.0, f64::max)).collect())
    })?;
    let run = estimate_tail_sup(&setup, &limit, n.horizon, n.save_every, &tail_options(cfg, eps.clone()))?;
    tail_tables(art, &run.estimates)?;
    art.summary = tail_summary(cfg, &limit, &eps, &run);
    Ok(())
}

fn tail_summary(cfg: &ExperimentConfig, limit: &LimitLaw, eps: &[f64], run: &TailRun) -> Value {
    json!({
        "model": model_summary(cfg),
        "limit": limit_summary(limit),
        "epsilons": eps,
        "calibrated": cfg.numerics.epsilons.is_empty(),
        "times": run.times,
        "time_regularity_constant": run.time_regularity,
        "estimates": estimates_json(&run.estimates),
    })
}

fn run_tail_marginal(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let setup = setup_of(cfg);
    let times = cfg.save_times();
    let horizon = times.iter().copied().fold(0.0, f64::max);
    let limit = build_limit(cfg, horizon)?;
    let eps = resolve_epsilons(cfg, |o| {
        let last = [horizon];
        let refs = [Reference::from_hat_mu(limit.hat_mu(horizon)?, o.quad_points)?];
        let stats = marginal_statistics(&setup, o.n_values[0], &last, &refs, o.replications, o.seed)?;
        Ok(stats.into_iter().map(|r| r[0]).collect())
    })?;
    let run = estimate_tail_marginal(&setup, &limit, &times, &tail_options(cfg, eps.clone()))?;
    tail_tables(art, &run.estimates)?;
    art.summary = tail_summary(cfg, &limit, &eps, &run);
    Ok(())
}

fn run_invariant(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let n = &cfg.numerics;
    let setup = setup_of(cfg);
    let limit = build_limit(cfg, n.fit_horizon)?;
    let eps = cfg.numerics.epsilons.clone();
    let mut reports = Vec::new();
    for &np in &n.n_values {
        for &e in &eps {
            reports.push(invariant_experiment(
                &setup,
                &limit,
                np,
                e,
                n.fit_horizon,
                n.fit_stride,
                n.replications,
                cfg.seed,
                n.quad_points,
            )?);
        }
    }
    let first = &reports[0];
    art.table("decay", "t,w2_to_stationary", |b| {
        for (t, w) in first.decay_times.iter().zip(&first.w2_curve) {
            writeln!(b, "{t},{w}")?;
        }
        Ok(())
    })?;
    let estimates: Vec<TailEstimate> = reports.iter().map(|r| r.estimate.clone()).collect();
    tail_tables(art, &estimates)?;
    art.summary = json!({
        "model": model_summary(cfg),
        "limit": limit_summary(&limit),
        "kappa": first.kappa,
        "decay_rate": first.decay_rate,
        "decay_r2": first.decay_r2,
        "c_hat": first.c_hat,
        "eps0_hat": first.eps0_hat,
        "t0_hat": first.t0_hat,
        "runs": reports.iter().map(|r| json!({
            "n": r.estimate.points[0].n,
            "epsilon": r.estimate.epsilon,
            "t_star": r.t_star,
            "estimate": r.estimate,
        })).collect::<Vec<_>>(),
    });
    Ok(())
}

fn run_appendix_c(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let a = &cfg.appendix_c;
    let eps = resolve_epsilons(cfg, |o| {
        let (_, stats) = indep_empirical_tail(&a.family, a.p_order, o)?;
        Ok(stats.into_iter().next().unwrap_or_default())
    })?;
    let (estimates, _) = indep_empirical_tail(&a.family, a.p_order, &tail_options(cfg, eps.clone()))?;
    tail_tables(art, &estimates)?;
    art.summary = json!({
        "family": a.family,
        "p_order": a.p_order,
        "epsilons": eps,
        "calibrated": cfg.numerics.epsilons.is_empty(),
        "estimates": estimates_json(&estimates),
    });
    Ok(())
}

fn run_mgf(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let m = &cfg.mgf;
    let lambdas = lambda_grid(m.lambda_max, m.lambda_points);
    let mut laws = Vec::new();
    let mut rows = Vec::new();
    let mut failed = false;
    for (k, l) in m.laws.iter().enumerate() {
        match subgaussian_bound_check(&l.law, l.a, &lambdas) {
            Ok(rep) => {
                failed |= rep.max_margin > 0.0;
                for (lam, mg) in rep.lambdas.iter().zip(&rep.margins) {
                    rows.push(format!("{k},{},{lam},{mg}", l.a));
                }
                laws.push(json!({ "law": l.law, "a": l.a, "precondition_value": rep.precondition_value,
                    "max_margin": rep.max_margin, "status": if rep.max_margin <= 0.0 { "pass" } else { "bound_violated" } }));
            }
            Err(Error::Precondition(msg)) => {
                laws.push(json!({ "law": l.law, "a": l.a, "status": "precondition_violated", "message": msg }));
            }
            Err(e) => return Err(e),
        }
    }
    art.table("subgaussian", "law_index,a,lambda,margin", |b| {
        rows.iter().try_for_each(|r| writeln!(b, "{r}").map_err(Error::from))
    })?;
    let hoeff = hoeffding_mgf_check(&cfg.graphon, m.n, m.row, &m.thetas, m.replications, cfg.seed)?;
    failed |= hoeff.max_margin > 0.0;
    art.table("hoeffding", "theta,lhs_plus,lhs_minus,se_plus,se_minus,rhs,margin", |b| {
        for k in 0..hoeff.thetas.len() {
            writeln!(
                b,
                "{},{},{},{},{},{},{}",
                hoeff.thetas[k],
                hoeff.lhs[k][0],
                hoeff.lhs[k][1],
                hoeff.standard_errors[k][0],
                hoeff.standard_errors[k][1],
                hoeff.rhs[k],
                hoeff.margins[k]
            )?;
        }
        Ok(())
    })?;
    if failed {
        art.outcome = Outcome::ChecksFailed;
    }
    art.summary = json!({ "subgaussian": laws, "hoeffding": hoeff });
    Ok(())
}

fn run_validate(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let checks = run_suite(cfg);
    art.table("checks", CHECKS_CSV_HEADER, |b| {
        for c in &checks {
            writeln!(b, "{},{},{},{}", c.name, c.passed, c.value, c.threshold)?;
        }
        Ok(())
    })?;
    if checks.iter().any(|c| !c.passed) {
        art.outcome = Outcome::ChecksFailed;
    }
    art.summary = json!({ "checks": checks });
    Ok(())
}

fn compute(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let mut art = Artifacts::new();
    match cfg.experiment {
        ExperimentKind::Simulate => run_simulate(cfg, &mut art)?,
        ExperimentKind::Limit => run_limit(cfg, &mut art)?,
        ExperimentKind::TailSup => run_tail_sup(cfg, &mut art)?,
        ExperimentKind::TailMarginal => run_tail_marginal(cfg, &mut art)?,
        ExperimentKind::Invariant => run_invariant(cfg, &mut art)?,
        ExperimentKind::AppendixC => run_appendix_c(cfg, &mut art)?,
        ExperimentKind::MgfChecks => run_mgf(cfg, &mut art)?,
        ExperimentKind::Validate => run_validate(cfg, &mut art)?,
    }
    Ok(art)
}

/// Hash recorded in an existing manifest, if any.
fn existing_hash(dir: &Path) -> Result<Option<String>> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| Error::config("output_dir", format!("unreadable manifest {}: {e}", path.display())))?;
    Ok(v.get("config_hash").and_then(Value::as_str).map(str::to_string))
}

/// Writes `files` atomically; on any failure removes everything this call
/// created.
fn write_all(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Vec<PathBuf>> {
    let mut done: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<()> {
        for (name, bytes) in files {
            let target = dir.join(name);
            let tmp = dir.join(format!(".{name}.tmp"));
            let write = fs::File::create(&tmp).and_then(|mut f| {
                f.write_all(bytes)?;
                f.sync_all()
            });
            if let Err(e) = write.and_then(|_| fs::rename(&tmp, &target)) {
                let _ = fs::remove_file(&tmp);
                return Err(e.into());
            }
            done.push(target);
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(done),
        Err(e) => {
            for p in &done {
                let _ = fs::remove_file(p);
            }
            Err(e)
        }
    }
}

/// Runs the experiment on the current rayon pool and writes its artifacts
/// into `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path, format: Format) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let hash = cfg.hash();
    if let Some(old) = existing_hash(out_dir)? {
        if old != hash {
            return Err(Error::config(
                "output_dir",
                format!(
                    "{} holds artifacts of a different configuration (hash {old}); refusing to overwrite",
                    out_dir.display()
                ),
            ));
        }
    }
    let art = compute(cfg)?;

    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    for t in &art.tables {
        match format {
            Format::Csv => files.push((format!("{}.csv", t.name), format!("# config_hash: {hash}\n{}", t.csv).into_bytes())),
            Format::Json => {
                let mut v = csv_to_json(&t.csv);
                v["config_hash"] = json!(hash);
                files.push((format!("{}.json", t.name), pretty(&v)));
            }
        }
    }
    let mut summary = json!({
        "config_hash": hash,
        "experiment": cfg.experiment.name(),
        "seed": cfg.seed,
        "outcome": outcome_name(art.outcome),
    });
    if let (Value::Object(dst), Value::Object(src)) = (&mut summary, art.summary.clone()) {
        dst.extend(src);
    }
    files.push(("summary.json".into(), pretty(&summary)));
    let manifest = json!({
        "config_hash": hash,
        "config": cfg,
        "seed": cfg.seed,
        "toolkit_version": env!("CARGO_PKG_VERSION"),
        "threads": rayon::current_num_threads(),
        "wall_time_seconds": start.elapsed().as_secs_f64(),
        "files": files.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
    });
    files.push(("manifest.json".into(), pretty(&manifest)));

    fs::create_dir_all(out_dir)?;
    let written = write_all(out_dir, &files)?;
    Ok(RunReport {
        outcome: art.outcome,
        config_hash: hash,
        files: written,
        summary,
    })
}

/// [`run`] on a dedicated pool of `threads` workers.
pub fn run_with_threads(cfg: &ExperimentConfig, out_dir: &Path, format: Format, threads: usize) -> Result<RunReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Numerical(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run(cfg, out_dir, format))
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("JSON serializes");
    s.push(b'\n');
    s
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Ok => "ok",
        Outcome::Inconclusive => "inconclusive",
        Outcome::ChecksFailed => "checks_failed",
    }
}

/// Process exit code for an outcome or error.
pub fn exit_code(r: &Result<RunReport>) -> i32 {
    match r {
        Ok(rep) => match rep.outcome {
            Outcome::Ok => 0,
            Outcome::ChecksFailed => 1,
            Outcome::Inconclusive => 4,
        },
        Err(e) => error_code(e),
    }
}

pub fn error_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. }
        | Error::ConfigList(_)
        | Error::Domain(_)
        | Error::Unsupported(_)
        | Error::Precondition(_) => 2,
        Error::Diverged { .. } | Error::Numerical(_) => 3,
        Error::Estimation(_) | Error::InsufficientData(_) => 4,
        Error::Io(_) => 5,
    }
}
