use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_robust-ldp");

fn example() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/three_state_chain.json")
}

fn chain_file(dir: &TempDir, name: &str, kernel: &str, r: f64) -> PathBuf {
    let path = dir.path().join(name);
    let text = format!(
        r#"{{"states":["1","2","3"],"metric":"discrete","pi0":[0,0,1],"kernel":{kernel},"r":{r}}}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

const KERNEL: &str = "[[0.6,0.2,0.2],[0.3,0.4,0.3],[0,0.3,0.7]]";
const IDENTITY: &str = "[[1,0,0],[0,1,0],[0,0,1]]";

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ROBUST_LDP_THREADS")
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "bad JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

#[test]
fn check_example_chain() {
    let out = run(&["check", "--chain", example().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["schema_version"], "1");
    assert_eq!(v["report"]["l0"], 2);
    assert_eq!(v["report"]["n0"], 2);
    assert_eq!(v["report"]["m1_holds"], true);
}

#[test]
fn check_identity_kernel_is_negative() {
    let dir = TempDir::new().unwrap();
    let path = chain_file(&dir, "id.json", IDENTITY, 0.0);
    let out = run(&["check", "--chain", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json(&out)["report"]["m1_holds"], false);
}

#[test]
fn malformed_inputs_exit_2_with_paths() {
    let dir = TempDir::new().unwrap();
    let path = chain_file(&dir, "bad.json", "[[0.6,0.2,0.1],[0.3,0.4,0.3],[0,0.3,0.7]]", 0.0);
    let out = run(&["check", "--chain", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kernel[0]"));

    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{\"states\": [1, 2]").unwrap();
    let out = run(&["check", "--chain", broken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["check", "--chain", "/nonexistent/chain.json"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["rate", "--chain", example().to_str().unwrap(), "--center", "7", "--kappa", "0.2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--center"));

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rate_reproduces_example_values() {
    let dir = TempDir::new().unwrap();
    let out_file = dir.path().join("rate.json");
    let out = run(&[
        "rate",
        "--chain",
        example().to_str().unwrap(),
        "--center",
        "3",
        "--kappa",
        "0.2",
        "--out",
        out_file.to_str().unwrap(),
        "--reproducible",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert!((f(&v["report"]["rate"]["value"]) - 0.0511).abs() <= 0.002);
    assert_eq!(v["report"]["sharp"], true);
    assert_eq!(v["report"]["nonvacuous"], true);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(out_file).unwrap()).unwrap();
    assert_eq!(saved, v);

    let nominal = chain_file(&dir, "r0.json", KERNEL, 0.0);
    let out = run(&["rate", "--chain", nominal.to_str().unwrap(), "--center", "3", "--kappa", "0.2"]);
    assert_eq!(out.status.code(), Some(0));
    assert!((f(&json(&out)["report"]["rate"]["value"]) - 0.0910).abs() <= 0.002);

    let out = run(&["rate", "--chain", example().to_str().unwrap(), "--center", "3", "--kappa", "1.0"]);
    let v = json(&out);
    assert_eq!(f(&v["report"]["rate"]["value"]), 0.0);
    assert_eq!(v["report"]["nonvacuous"], false);
}

#[test]
fn rate_ac_model_and_bad_model() {
    let chain = example();
    let args = ["rate", "--chain", chain.to_str().unwrap(), "--center", "3", "--kappa", "0.2"];
    let mut ac = args.to_vec();
    ac.extend(["--model", "robust-entropy-ac"]);
    let out = run(&ac);
    assert_eq!(out.status.code(), Some(0));
    assert!((f(&json(&out)["report"]["rate"]["value"]) - 0.0511).abs() <= 0.002);
    let mut bad = args.to_vec();
    bad.extend(["--model", "ball-indicator"]);
    assert_eq!(run(&bad).status.code(), Some(2));
}

#[test]
fn envelope_commands() {
    let dir = TempDir::new().unwrap();
    let nominal = chain_file(&dir, "r0.json", KERNEL, 0.0);
    let out = run(&["envelope", "--chain", nominal.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let expected = [3.0 / 13.0, 4.0 / 13.0, 6.0 / 13.0];
    for (x, e) in expected.iter().enumerate() {
        assert!((f(&v["report"]["envelope"]["lo"][x]) - e).abs() < 1e-8);
        assert!((f(&v["report"]["envelope"]["hi"][x]) - e).abs() < 1e-8);
    }

    assert_eq!(v["report"]["companion_model"], "ball-indicator-ac");
    assert_eq!(v["report"]["models_agree"], true);

    let out = run(&["envelope", "--chain", nominal.to_str().unwrap(), "--weights", "0,0,1"]);
    assert!((f(&json(&out)["report"]["max"]) - 6.0 / 13.0).abs() < 1e-8);

    let wide = chain_file(&dir, "r1.json", KERNEL, 1.0);
    let v = json(&run(&["envelope", "--chain", wide.to_str().unwrap()]));
    for x in 0..3 {
        assert!(f(&v["report"]["envelope"]["lo"][x]).abs() < 1e-9);
        assert!((f(&v["report"]["envelope"]["hi"][x]) - 1.0).abs() < 1e-9);
    }

    let absorbing = dir.path().join("absorbing.json");
    std::fs::write(
        &absorbing,
        r#"{"states":["a","b"],"metric":"discrete","pi0":[1,0],"kernel":[[1,0],[1,0]],"r":0.5}"#,
    )
    .unwrap();
    let v = json(&run(&["envelope", "--chain", absorbing.to_str().unwrap()]));
    assert_eq!(v["report"]["models_agree"], false);
    assert!((f(&v["report"]["envelope"]["hi"][1]) - 0.5).abs() < 1e-9);
    assert!(f(&v["report"]["companion"]["hi"][1]).abs() < 1e-9);
}

#[test]
fn wasserstein_command() {
    let chain = example();
    let c = chain.to_str().unwrap();
    let v = json(&run(&["wasserstein", "--chain", c, "--mu", "1", "--nu", "1"]));
    assert_eq!(f(&v["report"]["value"]), 0.0);
    let v = json(&run(&["wasserstein", "--chain", c, "--mu", "1", "--nu", "3"]));
    assert!((f(&v["report"]["value"]) - 1.0).abs() < 1e-12);
    assert!(f(&v["report"]["gap"]).abs() <= 1e-9);

    let dir = TempDir::new().unwrap();
    let two = dir.path().join("two.json");
    std::fs::write(
        &two,
        r#"{"states":["a","b"],"metric":[[0,1],[1,0]],"pi0":[1,0],"kernel":[[0.5,0.5],[0.5,0.5]],"r":0}"#,
    )
    .unwrap();
    let v = json(&run(&["wasserstein", "--chain", two.to_str().unwrap(), "--mu", "0.3,0.7", "--nu", "0.5,0.5"]));
    assert!((f(&v["report"]["value"]) - 0.2).abs() < 1e-12);
}

#[test]
fn simulate_trivial_chain_and_plot() {
    let dir = TempDir::new().unwrap();
    let id = chain_file(&dir, "id.json", IDENTITY, 0.0);
    let plot = dir.path().join("plot.csv");
    let out = run(&[
        "simulate",
        "--chain",
        id.to_str().unwrap(),
        "--center",
        "3",
        "--kappa",
        "0",
        "--lengths",
        "10..30:10",
        "--paths",
        "200",
        "--plot",
        plot.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(f(&v["report"]["estimate"]["slope"]), 0.0);
    assert_eq!(v["report"]["verdict"]["status"], "pass");
    let csv = std::fs::read_to_string(plot).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,hits,p_hat,ln_p_hat"));
    assert_eq!(lines.next(), Some("10,200,1,0"));
}

#[test]
fn simulate_unusable_estimate_exits_5() {
    let out = run(&[
        "simulate",
        "--chain",
        example().to_str().unwrap(),
        "--center",
        "1",
        "--kappa",
        "0",
        "--lengths",
        "10,20",
        "--paths",
        "100",
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(json(&out)["report"]["verdict"]["status"], "insufficient_data");
}

#[test]
fn simulate_is_reproducible_across_thread_counts() {
    let args = |threads: &'static str| {
        vec![
            "simulate",
            "--chain",
            "PLACEHOLDER",
            "--center",
            "3",
            "--kappa",
            "0.2",
            "--lengths",
            "10..40:10",
            "--paths",
            "20000",
            "--seed",
            "9",
            "--reproducible",
            "--threads",
            threads,
        ]
    };
    let chain = example();
    let run_with = |threads| {
        let mut a = args(threads);
        a[2] = chain.to_str().unwrap();
        run(&a)
    };
    let one = run_with("1");
    let two = run_with("2");
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(one.stdout, two.stdout);
    assert!(!String::from_utf8_lossy(&one.stdout).contains("timestamp"));
}

#[test]
fn thread_env_override_is_validated() {
    let out = Command::new(BIN)
        .args(["check", "--chain", example().to_str().unwrap()])
        .env("ROBUST_LDP_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ROBUST_LDP_THREADS"));
}
