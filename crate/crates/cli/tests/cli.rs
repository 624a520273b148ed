//! End-to-end exercises of the command-line interface.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn rtm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tmpdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

fn path(dir: &tempfile::TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

#[test]
fn gen_is_deterministic_and_validates() {
    let dir = tmpdir();
    let a = path(&dir, "a.json");
    let b = path(&dir, "b.json");
    for out in [&a, &b] {
        let run = rtm(&[
            "gen", "-n", "2", "--K", "3", "--seed", "7", "--output",
            out.to_str().unwrap(),
        ]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let run = rtm(&["validate", "--input", a.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stdout));
}

#[test]
fn solve_then_compare_pipeline() {
    let dir = tmpdir();
    let inst = path(&dir, "inst.json");
    let sol = path(&dir, "sol.json");
    let cmp = path(&dir, "cmp.json");
    assert!(rtm(&[
        "gen", "-n", "1", "--K", "3", "--seed", "11", "--output",
        inst.to_str().unwrap(),
    ])
    .status
    .success());
    let run = rtm(&[
        "solve", "--input", inst.to_str().unwrap(), "--output", sol.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let solution: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&sol).unwrap()).unwrap();
    assert!(solution["certified"].as_bool().unwrap());
    assert!(solution["residuals"]["primal"].as_f64().unwrap() <= 1e-8);

    let run = rtm(&[
        "compare", "--input", inst.to_str().unwrap(), "--output", cmp.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stdout));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&cmp).unwrap()).unwrap();
    assert!(report["pass"].as_bool().unwrap());
    assert!(report["rel_gap"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn hypothesis_violation_exits_2_and_force_overrides() {
    let dir = tmpdir();
    let inst = path(&dir, "degenerate.json");
    // Preferred demand pinned to the lower bound: u > r fails.
    fs::write(
        &inst,
        r#"{"K": 2, "grid_prices": [1.0, 1.0], "prosumers": [
            {"q": [2.0, 2.0], "h0": [1.0, 1.0], "h_lb": [1.0, 1.0],
             "h_ub": [4.0, 4.0], "h_tot": 2.0, "s": [1.0, 3.0]}]}"#,
    )
    .unwrap();
    let run = rtm(&["solve", "--input", inst.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2), "{}", String::from_utf8_lossy(&run.stderr));
    let run = rtm(&["solve", "--input", inst.to_str().unwrap(), "--force"]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stderr).contains("warning"));
}

#[test]
fn malformed_input_exits_1_with_context() {
    let dir = tmpdir();
    let inst = path(&dir, "broken.json");
    fs::write(&inst, "{ not json").unwrap();
    let run = rtm(&["validate", "--input", inst.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.contains("broken.json"), "{stderr}");
}

#[test]
fn simulate_constant_inputs_give_identical_settlements() {
    let dir = tmpdir();
    let inst = path(&dir, "steady.json");
    let series = path(&dir, "prices.csv");
    let out = path(&dir, "settle.json");
    fs::write(
        &inst,
        r#"{"K": 3, "grid_prices": [1.0, 1.0, 1.0], "prosumers": [
            {"q": [1.0, 1.0, 1.0], "h0": [1.0, 1.0, 1.0], "h_lb": [0.0, 0.0, 0.0],
             "h_ub": [3.0, 3.0, 3.0], "h_tot": 3.0, "s": [2.0, 2.0, 2.0]}]}"#,
    )
    .unwrap();
    let mut csv = String::from("interval,k,price\n");
    for t in 0..3 {
        for k in t..3 {
            csv.push_str(&format!("{t},{k},1.0\n"));
        }
    }
    fs::write(&series, csv).unwrap();
    let run = rtm(&[
        "simulate",
        "--input",
        inst.to_str().unwrap(),
        "--intervals",
        "3",
        "--prices",
        series.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let intervals = report["intervals"].as_array().unwrap();
    assert_eq!(intervals.len(), 3);
    let first = &intervals[0];
    for other in &intervals[1..] {
        for field in ["x", "y", "h"] {
            let a = first[field][0].as_f64().unwrap();
            let b = other[field][0].as_f64().unwrap();
            assert!((a - b).abs() <= 1e-6, "{field}: {a} vs {b}");
        }
        let a = first["aggregator_profit"].as_f64().unwrap();
        let b = other["aggregator_profit"].as_f64().unwrap();
        assert!((a - b).abs() <= 1e-6, "profit: {a} vs {b}");
    }
    // Steady state sells the per-step surplus at the grid's expense.
    let y = first["y"][0].as_f64().unwrap();
    assert!((y - 1.0).abs() <= 1e-6, "y = {y}");
    let h = first["h"][0].as_f64().unwrap();
    assert!((h - 1.0).abs() <= 1e-6, "h = {h}");
}

#[test]
fn simulate_rejects_missing_price_rows() {
    let dir = tmpdir();
    let inst = path(&dir, "steady.json");
    let series = path(&dir, "prices.csv");
    fs::write(
        &inst,
        r#"{"K": 2, "grid_prices": [1.0, 1.0], "prosumers": [
            {"q": [1.0, 1.0], "h0": [1.0, 1.0], "h_lb": [0.0, 0.0],
             "h_ub": [3.0, 3.0], "h_tot": 2.0, "s": [2.0, 2.0]}]}"#,
    )
    .unwrap();
    fs::write(&series, "interval,k,price\n0,0,1.0\n0,1,1.0\n1,0,1.0\n").unwrap();
    let run = rtm(&[
        "simulate",
        "--input",
        inst.to_str().unwrap(),
        "--intervals",
        "2",
        "--prices",
        series.to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.contains("missing interval 1"), "{stderr}");
}

#[test]
fn bench_csv_round_trips() {
    let dir = tmpdir();
    let out = path(&dir, "bench.csv");
    let run = rtm(&[
        "bench", "--sizes", "4x2,8x2", "--reps", "1", "--output", out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let mut reader = csv::Reader::from_path(&out).unwrap();
    let headers = reader.headers().unwrap().clone();
    for column in ["m", "solver", "wall_time_s", "iterations", "phi"] {
        assert!(headers.iter().any(|h| h == column), "missing column {column}");
    }
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][0], "8");
    assert_eq!(&rows[1][0], "16");
}

#[test]
fn oracle_json_output() {
    let dir = tmpdir();
    let inst = path(&dir, "inst.json");
    let out = path(&dir, "oracle.json");
    assert!(rtm(&[
        "gen", "-n", "1", "--K", "2", "--seed", "3", "--output", inst.to_str().unwrap(),
    ])
    .status
    .success());
    let run = rtm(&[
        "oracle",
        "--input",
        inst.to_str().unwrap(),
        "--steps",
        "9",
        "--refine",
        "2",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(report["phi"].as_f64().is_some());
    assert!(report["evaluations"].as_u64().unwrap() >= 81);
    assert_eq!(report["method"].as_str().unwrap(), "grid");
}
