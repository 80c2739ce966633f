#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gpconc::config::{builtin_linear, parse_config, ExperimentConfig, ExperimentKind};
use gpconc::experiment::{error_code, exit_code, run_with_threads, Format, Outcome};
use gpconc::Error;

#[derive(Parser)]
#[command(name = "gpconc", version, about = "Graphon particle systems: simulation and concentration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the finite particle system.
    Simulate(Common),
    /// Compute the limit marginals on a u-grid.
    Limit(Common),
    /// Tail of the supremum over time of W1(empirical, limit).
    #[command(alias = "tail_sup")]
    TailSup(Common),
    /// Tail of W1(empirical, limit) at fixed times.
    #[command(alias = "tail_marginal")]
    TailMarginal(Common),
    /// Decay to the stationary law and post-burn-in tails.
    Invariant(Common),
    /// Tails of empirical measures of independent samples.
    #[command(alias = "appendix_c")]
    AppendixC(Common),
    /// Sub-Gaussian and Hoeffding moment-generating-function checks.
    #[command(alias = "mgf_checks")]
    MgfChecks(Common),
    /// Desk-scale self-check suite (built-in linear config if none given).
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's output_dir, else ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: the config's threads, else all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

fn load(kind: ExperimentKind, args: &Common) -> gpconc::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None if kind == ExperimentKind::Validate => builtin_linear(kind),
        None => return Err(Error::config("--config", "required for this subcommand")),
    };
    if cfg.experiment != kind {
        return Err(Error::config(
            "experiment",
            format!("config is for `{}` but the subcommand is `{}`", cfg.experiment.name(), kind.name()),
        ));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = Some(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Simulate(a) => (ExperimentKind::Simulate, a),
        Command::Limit(a) => (ExperimentKind::Limit, a),
        Command::TailSup(a) => (ExperimentKind::TailSup, a),
        Command::TailMarginal(a) => (ExperimentKind::TailMarginal, a),
        Command::Invariant(a) => (ExperimentKind::Invariant, a),
        Command::AppendixC(a) => (ExperimentKind::AppendixC, a),
        Command::MgfChecks(a) => (ExperimentKind::MgfChecks, a),
        Command::Validate(a) => (ExperimentKind::Validate, a),
    };
    let cfg = match load(kind, args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(error_code(&e) as u8);
        }
    };
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let threads = cfg.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let format = match args.format {
        OutputFormat::Csv => Format::Csv,
        OutputFormat::Json => Format::Json,
    };
    let result = run_with_threads(&cfg, &out, format, threads);
    match &result {
        Ok(rep) => {
            if kind == ExperimentKind::Validate {
                if let Some(checks) = rep.summary["checks"].as_array() {
                    for c in checks {
                        println!(
                            "{} {}: value {} (threshold {})",
                            if c["passed"].as_bool() == Some(true) { "PASS" } else { "FAIL" },
                            c["name"].as_str().unwrap_or("?"),
                            c["value"],
                            c["threshold"]
                        );
                    }
                }
            }
            match rep.outcome {
                Outcome::Ok => {}
                Outcome::Inconclusive => eprintln!("inconclusive: every tail estimate is censored"),
                Outcome::ChecksFailed => eprintln!("one or more checks failed"),
            }
            println!("wrote {} files to {} (config hash {})", rep.files.len(), out.display(), rep.config_hash);
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&result) as u8)
}
