use lograsm::fixtures::{toy_certificate, toy_policy};
use std::path::Path;
use std::process::{Command, Output};

fn lograsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lograsm"))
        .args(args)
        .env("LOGRASM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn list_systems_prints_the_benchmarks() {
    let out = lograsm(&["list-systems"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let names: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(
        names,
        [
            "linear-sys",
            "linear-sys-hard",
            "pendulum",
            "collision-avoid",
            "triple-integrator",
            "planar-robot",
            "drone4D"
        ]
    );
}

#[test]
fn missing_system_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lograsm(&["synthesize", "--rho", "0.9", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--system"));
}

#[test]
fn bad_flags_exit_one_and_help_exits_zero() {
    assert_eq!(lograsm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lograsm(&["verify", "--bogus"]).status.code(), Some(1));
    assert_eq!(lograsm(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_system_and_unreadable_model_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = lograsm(&["simulate", "--system", "nope", "--policy", "x.json", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let out = lograsm(&[
        "simulate",
        "--system",
        "linear-sys",
        "--policy",
        path(&dir.path().join("missing.json")),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "system = \"linear-sys\"\nnot_a_field = 3\n").unwrap();
    let out = lograsm(&["synthesize", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

fn write_fixture(dir: &Path) -> (String, String) {
    let p = dir.join("p.json");
    let v = dir.join("v.json");
    toy_policy().save(&p).unwrap();
    toy_certificate().save(&v).unwrap();
    (path(&p).to_string(), path(&v).to_string())
}

#[test]
fn verify_fixture_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (p, v) = write_fixture(dir.path());
    let out_dir = dir.path().join("out");
    let out = lograsm(&[
        "verify",
        "--system",
        "contracting-toy",
        "--rho",
        "0.9",
        "--policy",
        &p,
        "--certificate",
        &v,
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["verdicts.jsonl", "verifier_summary.json", "manifest.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["outcome"], "synthesized");
    assert_eq!(manifest["config"]["rho"], 0.9);
}

#[test]
fn verify_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (p, v) = write_fixture(dir.path());
    // The toy certificate cannot reach the much higher unsafe threshold of this level.
    let out = lograsm(&[
        "verify",
        "--system",
        "contracting-toy",
        "--rho",
        "0.999999",
        "--policy",
        &p,
        "--certificate",
        &v,
        "--out",
        path(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let jsonl = std::fs::read_to_string(dir.path().join("out/verdicts.jsonl")).unwrap();
    assert!(jsonl.lines().any(|l| l.contains("\"cond\":\"unsafe\"")));
}

#[test]
fn export_grid_and_lipschitz_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (p, v) = write_fixture(dir.path());
    let run = |sub: &str| {
        let out_dir = dir.path().join(sub);
        let o = lograsm(&[
            "export-grid",
            "--system",
            "contracting-toy",
            "--certificate",
            &v,
            "--resolution",
            "11",
            "--out",
            path(&out_dir),
        ]);
        assert_eq!(o.status.code(), Some(0));
        let o = lograsm(&["lipschitz", "--network", &v, "--network", &p, "--out", path(&out_dir)]);
        assert_eq!(o.status.code(), Some(0));
        (
            std::fs::read_to_string(out_dir.join("grid.csv")).unwrap(),
            std::fs::read_to_string(out_dir.join("lipschitz.csv")).unwrap(),
        )
    };
    let (grid, lip) = run("a");
    let (grid2, lip2) = run("b");
    assert_eq!(grid, grid2);
    let strip = |s: &str| -> Vec<String> {
        s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    // Everything but the timing column repeats exactly.
    assert_eq!(strip(&lip), strip(&lip2));

    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines[0], "x1,v");
    assert_eq!(lines.len(), 12);
    // V(0) = max(10*0 - 6.3, ...) through the ReLU pair: 10*|0| - 6.3.
    let mid: Vec<f64> = lines[6].split(',').map(|s| s.parse().unwrap()).collect();
    assert_eq!(mid[0], 0.0);
    assert!((mid[1] + 6.3).abs() < 1e-12);
    assert!(lip.starts_with("net_id,naive,weighted,weighted_averaged,sampled_lower,runtime_ms\nv,"));
}

#[test]
fn simulate_writes_a_seeded_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = write_fixture(dir.path());
    let run = |sub: &str| {
        let out_dir = dir.path().join(sub);
        let o = lograsm(&[
            "simulate",
            "--system",
            "contracting-toy",
            "--policy",
            &p,
            "--episodes",
            "500",
            "--seed",
            "3",
            "--out",
            path(&out_dir),
        ]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read_to_string(out_dir.join("simulation.json")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["result"]["estimate"], 1.0);
}
