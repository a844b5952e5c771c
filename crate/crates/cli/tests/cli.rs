use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fairsynth_core::data::{load_csv, save_csv};
use fairsynth_core::{DiscreteScm, Engine};
use serde_json::Value as Json;
use tempfile::TempDir;

const DEMO_MODEL: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/demo/model.toml");

fn fairsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairsynth"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Json {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Writes `engine.toml` into a fresh directory. `body` follows the shared
/// header (seed, SCM path, roles, prompt).
fn scm_config(body: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"
seed = 5
output_dir = "out"

[data]
scm = "{model}"
real_sample_size = 2000

[roles]
sensitive = "group"
mediators = ["education"]
outcome = "approved"

[prompt]
dataset_description = "consumer loan applications"
ic_count = 10

[evaluation.repeat]
n_repeats = 2
{body}
"#,
        model = DEMO_MODEL.replace('\\', "/"),
    );
    let path = dir.path().join("engine.toml");
    fs::write(&path, text).unwrap();
    (dir, path)
}

const MOCK: &str = r#"
[backend]
kind = "mock"
rows_per_request = 400

[generation]
target_n = 600
request_budget = 4
"#;

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_mock_writes_target_rows() {
    let (dir, cfg) = scm_config(MOCK);
    let out = fairsynth(&["generate", "--config", p(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("out/synthetic.csv")).unwrap();
    assert_eq!(csv.lines().count(), 601);
    assert!(dir.path().join("out/prompt.txt").exists());
    assert!(dir.path().join("out/response_01.txt").exists());
    let diag = read_json(&dir.path().join("out/diagnostics.json"));
    assert_eq!(diag["requested"], 600);
}

#[test]
fn remote_without_credential_names_variable() {
    let (_dir, cfg) = scm_config(
        r#"
[backend]
kind = "remote"
api_key_env = "FAIRSYNTH_CLI_TEST_MISSING_KEY"
"#,
    );
    let out = Command::new(env!("CARGO_BIN_EXE_fairsynth"))
        .args(["generate", "--config", p(&cfg)])
        .env_remove("FAIRSYNTH_CLI_TEST_MISSING_KEY")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("FAIRSYNTH_CLI_TEST_MISSING_KEY"), "{}", stderr(&out));
}

#[test]
fn no_parseable_rows_exits_2() {
    let (dir, cfg) = scm_config(
        r#"
[backend]
kind = "mock"
rows_per_request = 50
corrupt_fraction = 1.0

[generation]
target_n = 100
request_budget = 2
"#,
    );
    let out = fairsynth(&["generate", "--config", p(&cfg)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let diag = read_json(&dir.path().join("out/diagnostics.json"));
    assert_eq!(diag["parsed_ok"], 0);
    assert_eq!(diag["rejected"].as_array().unwrap().len(), 100);
}

#[test]
fn evaluate_real_against_itself_has_zero_fidelity_gap() {
    let (dir, cfg) = scm_config(MOCK);
    let real = Engine::load(&cfg).unwrap().real_data().unwrap();
    let real_csv = dir.path().join("real.csv");
    save_csv(&real, &real_csv).unwrap();
    let out = fairsynth(&["evaluate", "--config", p(&cfg), "--synthetic", p(&real_csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc = read_json(&dir.path().join("out/metrics.json"));
    let fid = &doc["synthetic"]["fidelity"];
    for (_, v) in fid["categorical_tv"].as_object().unwrap() {
        assert_eq!(v.as_f64().unwrap(), 0.0);
    }
    assert_eq!(fid["correlation_max_abs_diff"].as_f64().unwrap(), 0.0);
    for table in ["effects.csv", "fairness_utility.csv", "fidelity.csv", "balance.csv"] {
        assert!(dir.path().join("out").join(table).exists(), "{table}");
    }
}

#[test]
fn evaluate_recovers_oracle_effects() {
    let (dir, cfg) = scm_config(
        r#"
[backend]
kind = "mock"
"#,
    );
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("real_sample_size = 2000", "real_sample_size = 60000")
        .replace("n_repeats = 2", "n_repeats = 3\ntarget = \"outcome\"\ntest_fraction = 0.5");
    fs::write(&cfg, text).unwrap();
    let scm = DiscreteScm::load(DEMO_MODEL).unwrap();
    let synth_csv = dir.path().join("synthetic.csv");
    save_csv(&scm.sample(60000, 424242).unwrap(), &synth_csv).unwrap();
    let out = fairsynth(&["evaluate", "--config", p(&cfg), "--synthetic", p(&synth_csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc = read_json(&dir.path().join("out/metrics.json"));
    let oracle = &doc["oracle"];
    for c in ["tv", "de", "ie", "se"] {
        let truth = oracle[c].as_f64().unwrap();
        let real = doc["real"]["effects"][c].as_f64().unwrap();
        let synth = doc["synthetic"]["effects"][c].as_f64().unwrap();
        assert!((real - truth).abs() <= 0.03, "real {c}: {real} vs {truth}");
        assert!((synth - truth).abs() <= 0.03, "synthetic {c}: {synth} vs {truth}");
    }
}

#[test]
fn malformed_synthetic_reports_row() {
    let (dir, cfg) = scm_config(MOCK);
    let bad = dir.path().join("bad.csv");
    fs::write(
        &bad,
        "age_band,region,tenure,group,education,approved\n\
         young,north,none,group_a,basic,yes\n\
         older,south,short,group_b,doctorate,no\n",
    )
    .unwrap();
    let out = fairsynth(&["evaluate", "--config", p(&cfg), "--synthetic", p(&bad)]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("row 2") && err.contains("doctorate"), "{err}");
}

fn run_config(extra: &str) -> (TempDir, PathBuf) {
    scm_config(&format!(
        r#"
[backend]
kind = "mock"
rows_per_request = 400
ramps = [{{ knob = "balance", step = 0.25 }}]
{extra}

[generation]
target_n = 600
request_budget = 4
"#
    ))
}

#[test]
fn run_converges() {
    let (dir, cfg) = run_config("");
    fs::write(
        &cfg,
        fs::read_to_string(&cfg).unwrap() + "\n[thresholds]\nmax_majority_share = { group = 0.6 }\n",
    )
    .unwrap();
    let out = fairsynth(&["run", "--config", p(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.path().join("out/report.json"));
    assert_eq!(report["status"], "converged");
    assert!(dir.path().join("out/config.toml").exists());
    assert!(dir.path().join("out/iteration_01/prompt.txt").exists());
}

const UNREACHABLE: &str = "\n[thresholds]\nmax_majority_share = { group = 0.1 }\n\n[orchestrator]\nmax_iterations = 3\n";

#[test]
fn run_unreachable_exhausts_budget() {
    let (dir, cfg) = run_config("");
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap() + UNREACHABLE).unwrap();
    let out = fairsynth(&["run", "--config", p(&cfg)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let report = read_json(&dir.path().join("out/report.json"));
    assert_eq!(report["status"], "budget_exhausted");
    assert_eq!(report["iterations"].as_array().unwrap().len(), 3);
}

#[test]
fn run_backend_failure_keeps_first_iteration() {
    let (dir, cfg) = run_config("fail_at_refinement = 1");
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap() + UNREACHABLE).unwrap();
    let out = fairsynth(&["run", "--config", p(&cfg)]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let report = read_json(&dir.path().join("out/report.json"));
    assert_eq!(report["status"], "backend_error");
    let iterations = report["iterations"].as_array().unwrap();
    assert_eq!(iterations.len(), 1);
    assert!(iterations[0]["metrics"].is_object());
}

#[test]
fn run_is_deterministic() {
    let (dir, cfg) = run_config("");
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap() + UNREACHABLE).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out_dir in [&a, &b] {
        let out = fairsynth(&["run", "--config", p(&cfg), "--seed", "77", "--out", p(out_dir)]);
        assert_eq!(code(&out), 3, "{}", stderr(&out));
    }
    for f in ["report.json", "synthetic.csv", "iteration_02/prompt.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn mitigate_rw_adds_weight_column() {
    let (dir, cfg) = scm_config(MOCK);
    let out = fairsynth(&["mitigate", "--config", p(&cfg), "--method", "rw", "--evaluate"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("out/mitigated_rw.csv")).unwrap();
    assert!(csv.lines().next().unwrap().ends_with(",sample_weight"));
    let audit = read_json(&dir.path().join("out/mitigation_rw.json"));
    assert_eq!(audit["method"], "rw");
    let eval = read_json(&dir.path().join("out/mitigation_rw_metrics.json"));
    assert!(eval["before"]["dp"].is_number() && eval["after"]["dp"].is_number());
}

const TABULAR: &str = r#"
seed = 3
output_dir = "out"

[data]
real_csv = "real.csv"

[[schema]]
name = "group"
kind = "categorical"
categories = ["a", "b"]

[[schema]]
name = "score"
kind = "numeric"
precision = 1

[[schema]]
name = "income"
kind = "numeric"
precision = 1

[[schema]]
name = "approved"
kind = "binary"
categories = ["no", "yes"]

[roles]
sensitive = "group"
mediators = ["score"]
outcome = "approved"

[prompt]
dataset_description = "applications"
ic_count = 4

[backend]
kind = "remote"
"#;

#[test]
fn mitigate_dir_at_zero_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("engine.toml");
    fs::write(&cfg, TABULAR).unwrap();
    let mut text = String::from("group,score,income,approved\n");
    for i in 0..24 {
        let g = if i % 3 == 0 { "a" } else { "b" };
        let y = if (i * 7) % 5 < 2 { "yes" } else { "no" };
        text.push_str(&format!("{g},{:.1},{:.1},{y}\n", (i * 37 % 19) as f64 * 0.7, 20.0 + (i * 11 % 13) as f64 * 1.3));
    }
    let input = dir.path().join("real.csv");
    fs::write(&input, &text).unwrap();
    // Normalise through the writer so the comparison is exact.
    let engine = Engine::load(&cfg).unwrap();
    save_csv(&load_csv(&input, &engine.schema).unwrap(), &input).unwrap();
    let out = fairsynth(&["mitigate", "--config", p(&cfg), "--method", "dir", "--param", "lambda=0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(&input).unwrap(), fs::read(dir.path().join("out/mitigated_dir.csv")).unwrap());
    assert!(dir.path().join("out/mitigation_dir.json").exists());
}

#[test]
fn mitigate_unknown_method_lists_valid_ones() {
    let (_dir, cfg) = scm_config(MOCK);
    let out = fairsynth(&["mitigate", "--config", p(&cfg), "--method", "xyz"]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    for m in ["sup", "cor", "dir", "rw"] {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn mitigate_rejects_foreign_parameter() {
    let (_dir, cfg) = scm_config(MOCK);
    let out = fairsynth(&["mitigate", "--config", p(&cfg), "--method", "sup", "--param", "alpha=1"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("threshold"));
}
