use std::path::Path;
use std::process::{Command, Output};

use gpconc::config::parse_config;

const TAIL_SUP: &str = r#"{
    "experiment": "tail_sup",
    "seed": 3,
    "graphon": {"kind": "constant", "value": 1.0},
    "drift": {"kind": "linear_mean_reverting", "c1": 2.0, "c2": 0.5},
    "numerics": {"n_values": [8, 16], "replications": 20, "horizon": 0.2, "epsilons": [0.3], "m": 8, "quad_points": 256}
}"#;

fn gpconc(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gpconc"));
    cmd.args(args);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.arg("--out").arg(out).args(["--threads", "1"]);
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn misspelled_key_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &TAIL_SUP.replace("\"epsilons\"", "\"epsilonn\""));
    let out = tmp.path().join("out");
    let o = gpconc(&["tail-sup"], Some(&cfg), &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epsilonn"));
    assert!(!out.exists());
}

#[test]
fn non_dissipative_marginal_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TAIL_SUP
        .replace("tail_sup", "tail_marginal")
        .replace("\"c1\": 2.0, \"c2\": 0.5", "\"c1\": 0.5, \"c2\": 1.0");
    let cfg = write_config(tmp.path(), "c.json", &text);
    let o = gpconc(&["tail-marginal"], Some(&cfg), &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dissipativity"));
}

#[test]
fn unwritable_output_exits_with_io_error_and_leaves_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TAIL_SUP);
    let blocker = tmp.path().join("blocker");
    std::fs::write(&blocker, "not a directory").unwrap();
    let out = blocker.join("out");
    let o = gpconc(&["tail-sup"], Some(&cfg), &out);
    assert_eq!(o.status.code(), Some(5), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, vec!["blocker", "c.json"]);
}

#[test]
fn artifacts_carry_the_config_hash_and_reruns_match() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TAIL_SUP);
    let out = tmp.path().join("out");
    let o = gpconc(&["tail-sup"], Some(&cfg), &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let hash = parse_config(TAIL_SUP).unwrap().hash();
    let csv = std::fs::read_to_string(out.join("tails.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), format!("# config_hash: {hash}"));
    assert_eq!(csv.lines().nth(1).unwrap(), "n,epsilon,t_or_sup,replications,exceed_count,p_hat,ci_low,ci_high");
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hash"], hash.as_str());
    assert!(summary["model"]["threshold_note"].as_str().unwrap().contains("d' = 2"));

    // same config into the same directory: allowed, byte-identical
    let o = gpconc(&["tail-sup"], Some(&cfg), &out);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(out.join("tails.csv")).unwrap(), csv);

    // different seed into the same directory: refused
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gpconc"));
    let o = cmd
        .args(["tail-sup", "--seed", "99", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("refusing"));
    assert_eq!(std::fs::read_to_string(out.join("tails.csv")).unwrap(), csv);
}

#[test]
fn manifest_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TAIL_SUP);
    let out = tmp.path().join("out");
    assert_eq!(gpconc(&["tail-sup"], Some(&cfg), &out).status.code(), Some(0));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let echoed = parse_config(&manifest["config"].to_string()).unwrap();
    let mut original = parse_config(TAIL_SUP).unwrap();
    original.threads = Some(1);
    assert_eq!(echoed, original);
    assert_eq!(manifest["config_hash"], original.hash().as_str());
    assert!(manifest["toolkit_version"].is_string());
    assert!(manifest["wall_time_seconds"].is_number());
}

#[test]
fn json_format_writes_typed_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TAIL_SUP);
    let out = tmp.path().join("out");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gpconc"));
    let o = cmd
        .args(["tail-sup", "--format", "json", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("tails.json")).unwrap()).unwrap();
    assert_eq!(v["columns"][0], "n");
    assert_eq!(v["rows"][0][0], 8);
    assert_eq!(v["rows"][0][2], "sup");
    assert!(!out.join("tails.csv").exists());
}

#[test]
fn all_censored_tails_exit_inconclusive() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &TAIL_SUP.replace("[0.3]", "[100.0]"));
    let out = tmp.path().join("out");
    let o = gpconc(&["tail-sup"], Some(&cfg), &out);
    assert_eq!(o.status.code(), Some(4));
    assert!(out.join("tails.csv").exists());
}

#[test]
fn validate_on_builtin_config_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = gpconc(&["validate"], None, &out);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 12);
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn subcommand_must_match_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", TAIL_SUP);
    let o = gpconc(&["simulate"], Some(&cfg), &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn limit_and_simulate_export_plot_ready_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let limit = TAIL_SUP.replace("tail_sup", "limit");
    let cfg = write_config(tmp.path(), "l.json", &limit);
    let out = tmp.path().join("limit");
    assert_eq!(gpconc(&["limit"], Some(&cfg), &out).status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("limit.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), "u,t,mean_0,variance");

    let sim = TAIL_SUP.replace("tail_sup", "simulate");
    let cfg = write_config(tmp.path(), "s.json", &sim);
    let out = tmp.path().join("sim");
    assert_eq!(gpconc(&["simulate"], Some(&cfg), &out).status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("trajectories_n16.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), "replication,t,i,x_0");
    // 20 replications x 16 particles at the horizon
    assert_eq!(csv.lines().count(), 2 + 20 * 16);
}
