use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn pathaug(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathaug"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env_remove("PATHAUG_OUT_DIR")
        .env_remove("PATHAUG_THREADS")
        .output()
        .expect("spawn pathaug")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = pathaug(out, args);
    assert!(
        o.status.success(),
        "pathaug {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a small terrain and simulates it; returns the directories.
fn simulated(root: &Path, model: &str) -> (PathBuf, PathBuf) {
    let terrain = root.join("terrain");
    ok(
        &terrain,
        &[
            "terrain-gen",
            "--seed",
            "4",
            "--size",
            "65",
            "--relief",
            "15",
            "--clutter-density",
            "0.2",
        ],
    );
    let cfg = serde_json::json!({
        "site_id": "T",
        "terrain": {"files": {"dsm": terrain.join("dsm.asc"), "dhm": terrain.join("dhm.asc")}},
        "tx": {"x": 160.0, "y": 160.0, "tower_height": 25.0},
        "freqs": [731.5, 2538.2],
        "grid": {"n_points": 150, "seed": 2},
        "model": {"model": model},
        "coverage": false
    });
    let cfg_path = root.join("sim.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let sim = root.join("sim");
    ok(&sim, &["simulate", "--config", s(&cfg_path)]);
    (terrain, sim)
}

#[test]
fn terrain_simulate_train_eval_overfits() {
    let dir = tempfile::tempdir().unwrap();
    let (terrain, sim) = simulated(dir.path(), "cost231");
    for f in ["dsm.asc", "dhm.asc", "manifest.json"] {
        assert!(terrain.join(f).exists(), "{f}");
    }
    let data = sim.join("dataset.csv");
    let text = fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 301);

    let model_dir = dir.path().join("model");
    ok(
        &model_dir,
        &[
            "train",
            "--data",
            s(&data),
            "--n-trees",
            "300",
            "--learning-rate",
            "0.3",
            "--max-depth",
            "10",
            "--min-samples-leaf",
            "1",
        ],
    );
    let eval_dir = dir.path().join("eval");
    let stdout = ok(
        &eval_dir,
        &[
            "eval",
            "--model",
            s(&model_dir.join("model.json")),
            "--data",
            s(&data),
        ],
    );
    let report: Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    let mae = report["total"]["mae_db"].as_f64().unwrap();
    assert!(mae <= 0.5, "training MAE {mae}");
    assert!(stdout.starts_with("mae_db="), "{stdout}");

    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(model_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["inputs"][0]["path"], s(&data));
    let model_bytes = fs::read(model_dir.join("model.json")).unwrap();
    let digest = manifest["outputs"][0]["sha256"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    assert!(manifest["outputs"][0]["path"] == "model.json" && !model_bytes.is_empty());
}

#[test]
fn failing_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let terrain = dir.path().join("terrain");
    ok(&terrain, &["terrain-gen", "--size", "33"]);
    let cfg = serde_json::json!({
        "terrain": {"files": {"dsm": terrain.join("dsm.asc"), "dhm": terrain.join("dhm.asc")}},
        "tx": {"x": 5000.0, "y": 50.0, "tower_height": 25.0},
        "freqs": [731.5],
        "grid": {"spacing": 10.0},
        "model": {"model": "fspl"}
    });
    let cfg_path = dir.path().join("sim.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = dir.path().join("never");
    let o = pathaug(&out, &["simulate", "--config", s(&cfg_path)]);
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(
        err.starts_with("error:") && err.contains("outside"),
        "{err}"
    );
    assert!(!out.exists());

    let o = pathaug(
        &out,
        &["eval", "--model", "missing.json", "--data", "missing.csv"],
    );
    assert!(!o.status.success());
    assert!(!out.exists());
}

#[test]
fn convert_recovers_offset_from_exact_rsrp() {
    let dir = tempfile::tempdir().unwrap();
    let (terrain, sim) = simulated(dir.path(), "fspl");
    let delta = -12.5;
    let mut rdr = csv::Reader::from_path(sim.join("sim_points.csv")).unwrap();
    let mut w = csv::Writer::from_path(dir.path().join("ms.csv")).unwrap();
    w.write_record([
        "x", "y", "rsrp_dbm", "earfcn", "freq_mhz", "cell_id", "site_id",
    ])
    .unwrap();
    let mut expected = Vec::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let pl: f64 = rec[4].parse().unwrap();
        expected.push(pl);
        let rsrp = (delta - pl).to_string();
        w.write_record([&rec[0], &rec[1], rsrp.as_str(), "", &rec[3], "", &rec[2]])
            .unwrap();
    }
    w.flush().unwrap();
    drop(w);

    let out = dir.path().join("conv");
    ok(
        &out,
        &[
            "convert",
            "--measurements",
            s(&dir.path().join("ms.csv")),
            "--sim",
            s(&sim.join("sim_points.csv")),
            "--dsm",
            s(&terrain.join("dsm.asc")),
            "--grouping",
            "per-site",
        ],
    );
    let offsets: Value =
        serde_json::from_str(&fs::read_to_string(out.join("offsets.json")).unwrap()).unwrap();
    let est = offsets[0]["delta_db"].as_f64().unwrap();
    assert!((est - delta).abs() <= 1e-9, "offset {est}");
    let mut rdr = csv::Reader::from_path(out.join("pathloss.csv")).unwrap();
    let got: Vec<f64> = rdr
        .records()
        .map(|r| r.unwrap()[6].parse().unwrap())
        .collect();
    assert_eq!(got.len(), expected.len());
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() <= 1e-9);
    }
}

#[test]
fn features_command_matches_simulated_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (terrain, sim) = simulated(dir.path(), "fspl");
    fs::write(dir.path().join("pts.csv"), "x,y\n100.5,120.25\n200,40\n").unwrap();
    let out = dir.path().join("feat");
    ok(
        &out,
        &[
            "features",
            "--dsm",
            s(&terrain.join("dsm.asc")),
            "--dhm",
            s(&terrain.join("dhm.asc")),
            "--points",
            s(&dir.path().join("pts.csv")),
            "--tx-x",
            "160",
            "--tx-y",
            "160",
            "--tower-height",
            "25",
            "--freqs",
            "731.5,2538.2",
            "--blockage",
        ],
    );
    let text = fs::read_to_string(out.join("features.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "x,y,freq_mhz,d_bs_m,h_bs_m,h_c_m,roughness_m,txhaat_m,alpha,blockage_m"
    );
    assert_eq!(lines.count(), 4);
    assert!(sim.join("dataset.csv").exists());
}

fn demo_outputs(dir: &Path, threads: &str) -> (String, String) {
    ok(dir, &["--threads", threads, "demo", "--seed", "3"]);
    (
        fs::read_to_string(dir.join("results.csv")).unwrap(),
        fs::read_to_string(dir.join("models/03_A_R__B_S_.json")).unwrap(),
    )
}

#[test]
fn demo_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (csv1, model1) = demo_outputs(&dir.path().join("one"), "1");
    let (csv4, model4) = demo_outputs(&dir.path().join("four"), "4");
    assert_eq!(csv1, csv4);
    assert_eq!(model1, model4);
    assert_eq!(csv1.lines().count(), 7);
    assert!(csv1.starts_with("train_label,test_label,mae_db,n_train,n_test,config_digest\n"));
    let text = fs::read_to_string(dir.path().join("one/results.txt")).unwrap();
    assert!(
        text.contains("A(R)+B(S)") && text.contains("n_trees=500"),
        "{text}"
    );
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("one/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seeds"]["top"], 3);
    assert!(manifest["seeds"]["split:A"].is_u64());
}
