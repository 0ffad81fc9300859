use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mbmapq"))
}

fn model(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_model(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn missing_model_exits_2_and_names_the_path() {
    let o = run(&["analyze", "--model", "/nonexistent/m.toml", "--out", "/tmp/unused"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/m.toml"));
}

#[test]
fn zero_replications_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("ex1_n_gi_g1.toml");
    let o = run(&["simulate", "--model", s(&m), "--reps", "0", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn compare_on_empty_dirs_exits_2() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = run(&["compare", "--analysis", s(a.path()), "--simulation", s(b.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn total_mode_complementary_distribution_at_zero_is_rho() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("ex1_p_gd_g1.toml");
    let o = run(&["analyze", "--model", s(&m), "--mode", "total", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("p_total.csv")).unwrap();
    let first = csv.lines().nth(1).unwrap();
    let ccdf: f64 = first.rsplit(',').next().unwrap().parse().unwrap();
    assert!((ccdf - 0.75).abs() < 2e-6, "{ccdf}");
    assert!(!dir.path().join("p_joint.csv").exists());
    assert!(!csv.contains('\r'));
}

#[test]
fn analysis_outputs_are_byte_identical_across_runs_and_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = model("ex1_i_gi_g1.toml");
    let o1 = bin()
        .args(["analyze", "--model", s(&m), "--np", "60", "--out", s(a.path())])
        .env("MBMAPQ_THREADS", "1")
        .output()
        .unwrap();
    let o2 = bin()
        .args(["analyze", "--model", s(&m), "--np", "60", "--out", s(b.path())])
        .env("MBMAPQ_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&o1), 0);
    assert_eq!(code(&o2), 0);
    for f in ["p_joint.csv", "p_total.csv", "q_class_1.csv", "q_class_2.csv", "summary.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_p"], 60);
    assert_eq!(manifest["mode"], "joint");
}

#[test]
fn simulation_repeats_with_the_same_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = model("ex1_n_gd_g1.toml");
    for d in [&a, &b] {
        let o = run(&["simulate", "--model", s(&m), "--horizon", "2e4", "--reps", "3", "--seed", "9", "--out", s(d.path())]);
        assert_eq!(code(&o), 0);
    }
    for f in ["sim_summary.json", "sim_hist.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn mismatched_models_fail_the_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let analysis = dir.path().join("a");
    let sim = dir.path().join("s");
    let gd = model("ex1_n_gd_g1.toml");
    let slow = std::fs::read_to_string(&gd).unwrap().replace("value = 4.0", "value = 4.5");
    let slow = write_model(dir.path(), "slow.toml", &slow);
    assert_eq!(code(&run(&["analyze", "--model", s(&gd), "--out", s(&analysis)])), 0);
    let o = run(&["simulate", "--model", s(&slow), "--horizon", "2e5", "--reps", "10", "--out", s(&sim)]);
    assert_eq!(code(&o), 0);
    let o = run(&["compare", "--analysis", s(&analysis), "--simulation", s(&sim)]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(sim.join("compare.json").exists());
}

#[test]
fn unstable_model_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(model("ex1_n_gd_g1.toml"))
        .unwrap()
        .replace("value = 4.0", "value = 6.0");
    let m = write_model(dir.path(), "hot.toml", &text);
    let o = run(&["analyze", "--model", s(&m), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn storage_budget_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("ex1_p_gd_g1.toml");
    let o = run(&["analyze", "--model", s(&m), "--max-entries", "50", "--out", s(dir.path())]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));
}

#[test]
fn invalid_model_fails_validation_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_model(
        dir.path(),
        "bad.toml",
        r#"
env_dim = 2
C = [[-1.0, 1.0], [1.0, -1.0]]

[[classes]]
D = [[0.0, 0.0], [0.0, 0.0]]
service = { kind = "deterministic", params = { value = 1.0 } }
"#,
    );
    let o = run(&["validate", "--model", s(&m)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn workload_mode_accepts_per_size_batch_matrices() {
    let dir = tempfile::tempdir().unwrap();
    // Poisson rate 0.25 batches of size 1 or 2 with equal probability.
    let m = write_model(
        dir.path(),
        "seq.toml",
        r#"
env_dim = 1
C = [[-0.25]]

[[classes]]
D_seq = [[[0.125]], [[0.125]]]
service = { kind = "exponential", params = { rate = 1.0 } }
"#,
    );
    let out = dir.path().join("o");
    let o = run(&["analyze", "--model", s(&m), "--mode", "workload", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    // Pollaczek-Khinchine for the batch workload: lambda_B E[S^2] / (2 (1 - rho)).
    // S is the batch work: E[S^2] = E[G] 2 + E[G(G-1)] = 3 + 1 = 4.
    let want = 0.25 * 4.0 / (2.0 * (1.0 - 0.375));
    assert!((v["mean_workload"].as_f64().unwrap() - want).abs() < 1e-9);

    let o = run(&["analyze", "--model", s(&m), "--out", s(&dir.path().join("j"))]);
    assert_eq!(code(&o), 2);
}
