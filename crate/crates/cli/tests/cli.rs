//! End-to-end tests through the `geoscale` binary.

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use geoscale::spectral::{interaction_matrix, AttentionWeights};
use geoscale::tensor::{spectral_norm_oracle, Matrix, Rng, ORACLE_TOL};
use geoscale_cli::tensor_file::TensorFile;
use proptest::prelude::*;

fn geoscale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoscale"))
        .args(args)
        .output()
        .expect("spawn geoscale")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write_layer(dir: &Path, name: &str, wq: &Matrix, wk: &Matrix) -> String {
    let q = dir.join(format!("{name}_q.gawt"));
    let k = dir.join(format!("{name}_k.gawt"));
    TensorFile::from_matrix(wq).write(&q).unwrap();
    TensorFile::from_matrix(wk).write(&k).unwrap();
    format!("{},{}", q.display(), k.display())
}

#[test]
fn calibrate_json_fields() {
    let o = geoscale(&["calibrate", "--model", "llama2-13b"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["gamma"].as_f64().unwrap() - 2.28).abs() <= 0.03);
    assert!((v["alpha_min"].as_f64().unwrap() - 0.028).abs() <= 0.001);
    assert_eq!(v["improvement"].as_f64().unwrap().round(), 18.0);
    for key in ["t1", "t2", "overflow_bound", "schema_version", "delta_star", "seq_len"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn calibrate_all_as_csv() {
    let o = geoscale(&["calibrate", "--all", "--format", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("model,d,d_h"));
}

#[test]
fn calibrate_rejects_bad_targets() {
    let o = geoscale(&["calibrate", "--model", "gpt2-xl", "--delta-star", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("delta"));

    let o = geoscale(&["calibrate", "--d", "16", "--d-h", "8", "--layers", "1", "--heads", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("infeasible"));
}

#[test]
fn spectral_known_sigma() {
    let dir = tempfile::tempdir().unwrap();
    // W^Q = 2·e₁, W^K = e₁ in ℝ⁴: σ = 2.
    let wq = Matrix::from_rows(&[vec![2.0], vec![0.0], vec![0.0], vec![0.0]]).unwrap();
    let wk = Matrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0], vec![0.0]]).unwrap();
    let layer = write_layer(dir.path(), "l0", &wq, &wk);
    let o = geoscale(&["spectral", "--layer", &layer, "--d-h", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "layer,sigma,iters,converged");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "0");
    assert!((row[1].parse::<f64>().unwrap() - 2.0).abs() <= 1e-8);
    assert_eq!(row[3], "true");
}

#[test]
fn spectral_gqa_check_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(21);
    let w = AttentionWeights::gaussian(32, 4, 8, 2, &mut rng).unwrap().scaled(0.2);
    // Round through f32 so the oracle sees exactly what the file holds.
    let wq = TensorFile::from_matrix(w.wq()).to_matrix().unwrap();
    let wk = TensorFile::from_matrix(w.wk()).to_matrix().unwrap();
    let oracle = spectral_norm_oracle(
        &interaction_matrix(&AttentionWeights::new(4, 8, 2, wq.clone(), wk.clone()).unwrap()),
        ORACLE_TOL,
    )
    .unwrap();
    let layer = write_layer(dir.path(), "g", &wq, &wk);
    let o = geoscale(&[
        "spectral", "--layer", &layer, "--d-h", "4", "--n-q", "8", "--n-kv", "2", "--check-gqa",
        "--tol", "1e-15",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect();
    assert!((row[1] - oracle).abs() <= 1e-8);
    assert!((row[4] - oracle).abs() <= 1e-10);
    assert!(row[5] <= 1e-8);
}

#[test]
fn spectral_empty_list_is_header_only() {
    let o = geoscale(&["spectral", "--d-h", "4"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "layer,sigma,iters,converged\n");
}

#[test]
fn spectral_malformed_file_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.gawt");
    std::fs::write(&bad, b"NOPE0000").unwrap();
    let arg = format!("{},{}", bad.display(), bad.display());
    let o = geoscale(&["spectral", "--layer", &arg, "--d-h", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("broken.gawt"));
    assert!(stderr(&o).contains("magic"));

    let missing = dir.path().join("missing.gawt");
    let arg = format!("{},{}", missing.display(), missing.display());
    let o = geoscale(&["spectral", "--layer", &arg, "--d-h", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing.gawt"));
}

fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn simulate_weight_spike_csv() {
    let o = geoscale(&["simulate", "--scenario", "weight_spike", "--format", "csv", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&stdout(&o));
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (step, layer, scale) = (col("step"), col("layer"), col("scale_geometry"));
    let get = |t: &str, l: &str| -> f64 {
        rows.iter().find(|r| r[step] == t && r[layer] == l).unwrap()[scale].parse().unwrap()
    };
    let ratio = get("10", "0") / get("9", "0");
    assert!((ratio - 16.0).abs() <= 16.0 * 1e-9, "ratio {ratio}");
    assert!(rows.iter().all(|r| r[col("seed")] == "3"));
    let od = col("overflows_delayed");
    assert!(rows.iter().any(|r| r[od] != "0"), "spike should overflow the baseline");
}

#[test]
fn simulate_null_has_no_overflows() {
    let o = geoscale(&["simulate", "--scenario", "null"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["summary"]["overflows_geometry"], 0);
    assert_eq!(v["summary"]["overflows_delayed"], 0);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["seed"], 0);
}

#[test]
fn simulate_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..2)
        .map(|i| (dir.path().join(format!("r{i}.json")), dir.path().join(format!("s{i}.csv"))))
        .collect();
    for (json, csv) in &paths {
        let o = geoscale(&[
            "simulate",
            "--scenario",
            "lr_spike",
            "--seed",
            "17",
            "--out",
            json.to_str().unwrap(),
            "--csv",
            csv.to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    assert_eq!(std::fs::read(&paths[0].0).unwrap(), std::fs::read(&paths[1].0).unwrap());
    assert_eq!(std::fs::read(&paths[0].1).unwrap(), std::fs::read(&paths[1].1).unwrap());
}

#[test]
fn simulate_policy_selects_columns() {
    let o = geoscale(&["simulate", "--scenario", "null", "--steps", "2", "--policy", "delayed", "--format", "csv"]);
    let (header, _) = csv_rows(&stdout(&o));
    assert!(header.contains(&"scale_delayed".to_string()));
    assert!(!header.contains(&"scale_geometry".to_string()));

    let o = geoscale(&[
        "simulate", "--scenario", "null", "--steps", "5", "--policy", "auto-alpha", "--burn-in", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["summary"]["alpha_mode"], "auto_alpha");
    assert_eq!(v["steps"][0]["burn_in"], true);
}

#[test]
fn simulate_config_file_and_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    std::fs::write(&good, r#"{"seed": 5, "scenario": {"kind": "null", "steps": 2}}"#).unwrap();
    let o = geoscale(&["simulate", "--config", good.to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["seed"], 5);
    assert_eq!(v["steps"].as_array().unwrap().len(), 2 * 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"scenario": {"stepz": 2}}"#).unwrap();
    let o = geoscale(&["simulate", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bad.json"));
}

#[test]
fn mc_overflow_positive_at_small_width() {
    let o = geoscale(&[
        "mc", "overflow", "--d", "32", "--d-h", "4", "--seq-len", "16", "--gamma", "2", "--alphas", "0.3",
        "--trials", "1000",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let cell = &v["overflow"]["cells"][0];
    let freq = cell["frequency"].as_f64().unwrap();
    assert!(freq > 0.0, "frequency {freq}");
    assert!(freq <= cell["bound"].as_f64().unwrap());
}

#[test]
fn mc_projection_runs_with_threads() {
    let o = geoscale(&["--threads", "2", "mc", "projection", "--d", "64", "--k", "8", "--trials", "2000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let mean = v["projection"]["mean"].as_f64().unwrap();
    let se = v["projection"]["std_err"].as_f64().unwrap();
    assert!((mean - 0.125).abs() <= 4.0 * se);
}

#[test]
fn selftest_passes_quickly() {
    let t = Instant::now();
    let o = geoscale(&["selftest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(t.elapsed() < Duration::from_secs(60));
}

#[test]
fn selftest_catches_corrupt_codebook() {
    let o = geoscale(&["selftest", "--corrupt-codebook"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("FAIL codec_round_trip"));
}

proptest! {
    #[test]
    fn tensor_file_round_trips(dims in prop::collection::vec(0u64..5, 0..4), seed in any::<u64>()) {
        let n: u64 = dims.iter().product();
        let mut rng = Rng::new(seed);
        let data: Vec<f32> = (0..n).map(|_| rng.standard_normal() as f32).collect();
        let t = TensorFile::new(dims, data).unwrap();
        prop_assert_eq!(TensorFile::from_bytes(&t.to_bytes()).unwrap(), t);
    }
}
