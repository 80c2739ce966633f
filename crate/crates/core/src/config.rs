//! Experiment configuration: a JSON document with a fixed schema.
//!
//! Unknown keys are rejected at every level. Numerical knobs have defaults;
//! the model (graphon, drift) must be given explicitly.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concentration::mgf::ScalarLaw;
use crate::concentration::IndepFamily;
use crate::dynamics::{is_dissipative, kappa_of, DriftSpec, InitialLaw};
use crate::error::{Error, Result};
use crate::graphon::{Graphon, SamplingMode};
use crate::limitlaw::grid_index;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Simulate,
    Limit,
    TailSup,
    TailMarginal,
    Invariant,
    AppendixC,
    MgfChecks,
    Validate,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Limit => "limit",
            ExperimentKind::TailSup => "tail_sup",
            ExperimentKind::TailMarginal => "tail_marginal",
            ExperimentKind::Invariant => "invariant",
            ExperimentKind::AppendixC => "appendix_c",
            ExperimentKind::MgfChecks => "mgf_checks",
            ExperimentKind::Validate => "validate",
        }
    }

    fn needs_limit(self) -> bool {
        matches!(
            self,
            ExperimentKind::Limit | ExperimentKind::TailSup | ExperimentKind::TailMarginal | ExperimentKind::Invariant
        )
    }

    fn is_tail(self) -> bool {
        matches!(
            self,
            ExperimentKind::TailSup | ExperimentKind::TailMarginal | ExperimentKind::Invariant | ExperimentKind::AppendixC
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitSolver {
    /// Gaussian flow when the drift is linear and the initial law Gaussian,
    /// law iteration otherwise.
    #[default]
    Auto,
    Gaussian,
    Picard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    pub n_values: Vec<usize>,
    /// Nodes of the limit-law u-grid.
    pub m: usize,
    /// Particles per node for law iteration.
    pub particles: usize,
    pub max_iterations: usize,
    pub picard_tol: f64,
    pub limit_solver: LimitSolver,
    pub dt: f64,
    pub horizon: f64,
    /// Defaults to the horizon alone.
    pub save_times: Vec<f64>,
    /// Stride, in steps, of the grid on which suprema over time are taken.
    pub save_every: usize,
    pub epsilons: Vec<f64>,
    /// When set and `epsilons` is empty, epsilon is the pilot quantile with
    /// this exceedance frequency at the smallest n.
    pub calibrate_target: Option<f64>,
    pub pilot_replications: usize,
    pub replications: usize,
    pub quad_points: usize,
    /// Defaults to d + 1.
    pub d_prime: Option<usize>,
    /// Coupled run with remainder diagnostics (simulate only).
    pub diagnostics: bool,
    /// Horizon and stride of the decay curve (invariant only).
    pub fit_horizon: f64,
    pub fit_stride: usize,
    /// Time stride of limit-law CSV export.
    pub export_stride: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            n_values: vec![64],
            m: 64,
            particles: 2000,
            max_iterations: 30,
            picard_tol: 1e-3,
            limit_solver: LimitSolver::Auto,
            dt: 0.01,
            horizon: 1.0,
            save_times: Vec::new(),
            save_every: 10,
            epsilons: Vec::new(),
            calibrate_target: None,
            pilot_replications: 200,
            replications: 100,
            quad_points: 4096,
            d_prime: None,
            diagnostics: false,
            fit_horizon: 5.0,
            fit_stride: 10,
            export_stride: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppendixC {
    pub family: IndepFamily,
    pub p_order: u32,
}

impl Default for AppendixC {
    fn default() -> Self {
        Self {
            family: IndepFamily::Gaussian {
                intercept: 0.0,
                slope: 1.0,
                variance: 1.0,
            },
            p_order: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawCheck {
    pub law: ScalarLaw,
    pub a: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MgfChecks {
    pub laws: Vec<LawCheck>,
    pub lambda_max: f64,
    pub lambda_points: usize,
    pub n: usize,
    pub row: usize,
    pub thetas: Vec<f64>,
    pub replications: usize,
}

impl Default for MgfChecks {
    fn default() -> Self {
        let a = 1.0 / std::f64::consts::LN_2;
        Self {
            laws: vec![
                LawCheck { law: ScalarLaw::Rademacher, a },
                LawCheck {
                    law: ScalarLaw::Uniform { half_width: 1.0 },
                    a,
                },
                LawCheck {
                    law: ScalarLaw::TruncatedGaussian { sigma: 0.5, bound: 2.0 },
                    a: 1.0,
                },
            ],
            lambda_max: 10.0,
            lambda_points: 201,
            n: 64,
            row: 0,
            thetas: vec![1.0, 4.0, 16.0],
            replications: 100_000,
        }
    }
}

fn default_seed() -> u64 {
    1
}

fn default_init() -> InitialLaw {
    InitialLaw::gaussian(1.0, 1.0)
}

fn default_sampling() -> SamplingMode {
    SamplingMode::Deterministic
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Not part of the config hash.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads; not part of the config hash.
    #[serde(default)]
    pub threads: Option<usize>,
    pub graphon: Graphon,
    pub drift: DriftSpec,
    #[serde(default = "default_init")]
    pub init: InitialLaw,
    #[serde(default = "default_sampling")]
    pub sampling: SamplingMode,
    #[serde(default)]
    pub undirected: bool,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub appendix_c: AppendixC,
    #[serde(default)]
    pub mgf: MgfChecks,
}

/// Parses and validates a JSON config. Syntax errors carry line and column,
/// schema errors the path of the offending field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        if inner.is_syntax() || inner.is_eof() {
            Error::config(
                format!("line {}, column {}", inner.line(), inner.column()),
                inner.to_string(),
            )
        } else {
            let path = e.path().to_string();
            let path = if path == "." { "<root>".to_string() } else { path };
            // drop serde's position suffix; the path already locates the error
            let msg = inner.to_string();
            let msg = msg.split(" at line ").next().unwrap_or(&msg).to_string();
            Error::config(path, msg)
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn d_prime(&self) -> usize {
        self.numerics.d_prime.unwrap_or(self.drift.dim() + 1)
    }

    /// Save times, defaulting to the horizon.
    pub fn save_times(&self) -> Vec<f64> {
        if self.numerics.save_times.is_empty() {
            vec![self.numerics.horizon]
        } else {
            self.numerics.save_times.clone()
        }
    }

    /// SHA-256 of the canonical JSON with the output directory and thread
    /// count removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.threads = None;
        spec_hash(&c)
    }

    /// All semantic errors at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut bad = |path: &str, msg: String| errs.push(Error::config(path, msg));
        let n = &self.numerics;
        let kind = self.experiment;

        if let Err(e) = self.drift.validate() {
            bad("drift", e.to_string());
        }
        if let Err(e) = self.init.validate(self.drift.dim()) {
            bad("init", e.to_string());
        }
        if self.threads == Some(0) {
            bad("threads", "must be >= 1".into());
        }
        if n.n_values.is_empty() {
            bad("numerics.n_values", "must not be empty".into());
        }
        for (i, &v) in n.n_values.iter().enumerate() {
            if v == 0 {
                bad(&format!("numerics.n_values[{i}]"), "must be >= 1".into());
            }
        }
        if n.m == 0 {
            bad("numerics.m", "must be >= 1".into());
        }
        if n.particles < 100 {
            bad("numerics.particles", "must be >= 100".into());
        }
        if n.max_iterations == 0 {
            bad("numerics.max_iterations", "must be >= 1".into());
        }
        if !(n.picard_tol > 0.0) {
            bad("numerics.picard_tol", "must be > 0".into());
        }
        let dt_ok = n.dt > 0.0 && n.dt.is_finite();
        if !dt_ok {
            bad("numerics.dt", "must be > 0".into());
        }
        if !(n.horizon > 0.0) || !n.horizon.is_finite() {
            bad("numerics.horizon", "must be > 0".into());
        } else if dt_ok && grid_index(n.horizon, n.dt).is_err() {
            bad("numerics.horizon", format!("must be a multiple of dt = {}", n.dt));
        }
        for (i, &t) in n.save_times.iter().enumerate() {
            let path = format!("numerics.save_times[{i}]");
            if !(t >= 0.0) || t > n.horizon * (1.0 + 1e-12) {
                bad(&path, format!("must lie in [0, {}]", n.horizon));
            } else if dt_ok && grid_index(t, n.dt).is_err() {
                bad(&path, format!("must be a multiple of dt = {}", n.dt));
            }
        }
        if n.save_every == 0 {
            bad("numerics.save_every", "must be >= 1".into());
        }
        for (i, &e) in n.epsilons.iter().enumerate() {
            if !(e >= 0.0) || !e.is_finite() {
                bad(&format!("numerics.epsilons[{i}]"), "must be >= 0".into());
            }
        }
        if let Some(t) = n.calibrate_target {
            if !(t > 0.0 && t < 1.0) {
                bad("numerics.calibrate_target", "must lie in (0, 1)".into());
            }
        }
        if n.pilot_replications == 0 {
            bad("numerics.pilot_replications", "must be >= 1".into());
        }
        if n.replications == 0 {
            bad("numerics.replications", "must be >= 1".into());
        }
        if n.quad_points < 64 {
            bad("numerics.quad_points", "must be >= 64".into());
        }
        if !(n.fit_horizon > 0.0) {
            bad("numerics.fit_horizon", "must be > 0".into());
        }
        if n.fit_stride == 0 {
            bad("numerics.fit_stride", "must be >= 1".into());
        }
        if n.export_stride == 0 {
            bad("numerics.export_stride", "must be >= 1".into());
        }

        if kind.is_tail() && kind != ExperimentKind::AppendixC {
            if n.epsilons.is_empty() && n.calibrate_target.is_none() {
                bad("numerics.epsilons", "give at least one epsilon or a calibrate_target".into());
            }
            if self.drift.dim() != 1 {
                bad("drift.dim", "tail experiments are implemented for d = 1".into());
            }
        }
        if kind == ExperimentKind::AppendixC {
            if n.epsilons.is_empty() && n.calibrate_target.is_none() {
                bad("numerics.epsilons", "give at least one epsilon or a calibrate_target".into());
            }
            let p = self.appendix_c.p_order;
            if p != 1 && p != 2 {
                bad("appendix_c.p_order", "must be 1 or 2".into());
            }
            if let IndepFamily::Gaussian { variance, .. } = self.appendix_c.family {
                if !(variance > 0.0) {
                    bad("appendix_c.family.variance", "must be > 0".into());
                }
            }
        }
        if matches!(kind, ExperimentKind::TailMarginal | ExperimentKind::Invariant) && !is_dissipative(&self.drift) {
            bad(
                "drift",
                format!(
                    "dissipativity required for {} (kappa = c0 - 2 K_b = {})",
                    kind.name(),
                    kappa_of(&self.drift)
                ),
            );
        }
        if kind == ExperimentKind::Invariant {
            if n.epsilons.is_empty() {
                bad("numerics.epsilons", "invariant needs explicit epsilons".into());
            }
            if dt_ok && grid_index(n.fit_horizon, n.dt).is_err() {
                bad("numerics.fit_horizon", format!("must be a multiple of dt = {}", n.dt));
            }
        }
        if kind == ExperimentKind::Invariant && self.numerics.limit_solver == LimitSolver::Picard {
            bad("numerics.limit_solver", "invariant needs the Gaussian flow".into());
        }
        if kind.needs_limit() {
            let gaussian = self.drift.is_linear() && self.init.is_gaussian();
            match n.limit_solver {
                LimitSolver::Gaussian if !gaussian => bad(
                    "numerics.limit_solver",
                    "Gaussian flow needs a linear drift and a Gaussian initial law".into(),
                ),
                LimitSolver::Picard | LimitSolver::Auto if !gaussian && self.drift.dim() != 1 => {
                    bad("numerics.limit_solver", "law iteration is implemented for d = 1".into())
                }
                _ => {}
            }
            if kind == ExperimentKind::Invariant && !gaussian {
                bad("drift", "invariant needs a linear drift and a Gaussian initial law".into());
            }
        }
        if kind == ExperimentKind::Simulate && n.diagnostics {
            let gaussian = self.drift.is_linear() && self.init.is_gaussian();
            if !gaussian && self.drift.dim() != 1 {
                bad("numerics.diagnostics", "coupled runs need a limit law (d = 1 or linear Gaussian)".into());
            }
        }
        if kind == ExperimentKind::MgfChecks {
            let m = &self.mgf;
            if m.lambda_points < 2 || !(m.lambda_max > 0.0) {
                bad("mgf.lambda_points", "need >= 2 points and lambda_max > 0".into());
            }
            if m.n == 0 || m.row >= m.n {
                bad("mgf.row", "need n >= 1 and row < n".into());
            }
            if m.replications < 2 {
                bad("mgf.replications", "must be >= 2".into());
            }
            for (i, l) in m.laws.iter().enumerate() {
                if !(l.a > 0.0) {
                    bad(&format!("mgf.laws[{i}].a"), "must be > 0".into());
                }
            }
        }

        match errs.len() {
            0 => Ok(()),
            1 => Err(errs.pop().expect("one error")),
            _ => Err(Error::ConfigList(errs)),
        }
    }
}

/// SHA-256 of the compact JSON form of any serializable spec.
pub fn spec_hash<T: Serialize>(v: &T) -> String {
    let text = serde_json::to_string(v).expect("spec serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// The built-in mean-field linear configuration used by `validate`.
pub fn builtin_linear(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig {
        experiment: kind,
        seed: 1,
        output_dir: None,
        threads: None,
        graphon: Graphon::constant(1.0).expect("valid graphon"),
        drift: DriftSpec::linear(2.0, 0.5),
        init: default_init(),
        sampling: SamplingMode::Deterministic,
        undirected: false,
        numerics: Numerics::default(),
        appendix_c: AppendixC::default(),
        mgf: MgfChecks::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"{
        "experiment": "tail_marginal",
        "graphon": {"kind": "constant", "value": 1.0},
        "drift": {"kind": "linear_mean_reverting", "c1": 2.0, "c2": 0.5, "dim": 1},
        "numerics": {"n_values": [64], "epsilons": [0.1]}
    }"#;

    #[test]
    fn minimal_config_fills_defaults_and_echoes() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.numerics.dt, 0.01);
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.d_prime(), 2);
        assert_eq!(parse_config(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn misspelled_key_is_named() {
        let text = MINIMAL.replace("\"epsilons\"", "\"epsilonn\"");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("epsilonn"), "{err}");
        assert!(err.contains("numerics"), "{err}");
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse_config("{\n  \"experiment\": ,\n}").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn non_dissipative_marginal_is_rejected() {
        let text = MINIMAL.replace("\"c1\": 2.0, \"c2\": 0.5", "\"c1\": 0.5, \"c2\": 1.0");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("dissipativity"), "{err}");
        // the same drift is fine for a finite-horizon sup experiment
        assert!(parse_config(&text.replace("tail_marginal", "tail_sup")).is_ok());
    }

    #[test]
    fn errors_are_collected_with_paths() {
        let text = MINIMAL.replace("\"n_values\": [64]", "\"n_values\": [0], \"dt\": -1.0, \"replications\": 0");
        let err = parse_config(&text).unwrap_err();
        let Error::ConfigList(list) = &err else { panic!("{err}") };
        let s = err.to_string();
        assert!(list.len() >= 3);
        for p in ["numerics.n_values[0]", "numerics.dt", "numerics.replications"] {
            assert!(s.contains(p), "{s}");
        }
    }

    #[test]
    fn hash_ignores_threads_and_output() {
        let a = parse_config(MINIMAL).unwrap();
        let mut b = a.clone();
        b.threads = Some(8);
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            seed in any::<u64>(),
            dt_k in 1usize..50,
            steps in 1usize..200,
            eps in proptest::collection::vec(0.0f64..10.0, 1..4),
            ns in proptest::collection::vec(1usize..5000, 1..5),
            c1 in 1.0f64..5.0,
            c2 in 0.0f64..0.9,
            g in 0.0f64..=1.0,
        ) {
            let mut cfg = builtin_linear(ExperimentKind::TailSup);
            cfg.seed = seed;
            cfg.numerics.dt = dt_k as f64 * 1e-3;
            cfg.numerics.horizon = steps as f64 * cfg.numerics.dt;
            cfg.numerics.epsilons = eps;
            cfg.numerics.n_values = ns;
            cfg.drift = DriftSpec::linear(c1, c2);
            cfg.graphon = Graphon::constant(g).unwrap();
            let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.hash(), cfg.hash());
        }
    }
}
