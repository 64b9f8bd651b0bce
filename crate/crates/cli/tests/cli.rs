use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use panostitch::ply::{read_ply, write_ply, PlyFormat};
use panostitch::scene::SceneManifest;
use panostitch::{PointCloud, Vec3};
use panostitch_cli::commands::{run_eval, EvalArgs};
use panostitch_cli::log::Logger;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_panostitch"));
    c.arg("--quiet");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// 1.2 m x 0.8 m tabletop at z = 0.75 with Gaussian height noise, plus
/// scattered clutter above it.
fn table_cloud(noise: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, noise).unwrap();
    let mut pts: Vec<Vec3> = (0..3000)
        .map(|_| {
            Vec3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.4..0.4),
                0.75 + n.sample(&mut rng),
            )
        })
        .collect();
    pts.extend((0..300).map(|_| {
        Vec3::new(
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.4..0.4),
            rng.random_range(0.85..1.3),
        )
    }));
    PointCloud::new(pts)
}

fn synth_scene(dir: &Path, config: &str) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let cfg = dir.join("synth.json");
    fs::write(&cfg, config).unwrap();
    let out = dir.join("scene");
    let o = run(&["synth", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn synth_then_stitch_recovers_the_room_layout() {
    let dir = TempDir::new().unwrap();
    let scene = synth_scene(dir.path(), r#"{"pixel_noise_sigma": 1.0, "outlier_fraction": 0.2, "cloud_point_count": 20000}"#);
    let out = dir.path().join("out");
    let o = run(&["stitch", p(&scene.join("stitch.json")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(scene.join("ground_truth.json")).unwrap()).unwrap();
    let gt: panostitch::RigidTransform = serde_json::from_value(truth["world"]["b"].clone()).unwrap();
    let manifest = SceneManifest::from_json(&fs::read_to_string(out.join("scene.json")).unwrap(), &out).unwrap();
    let room_b = manifest.rooms.iter().find(|r| r.id == "b").unwrap();
    let (dr, dt) = room_b.local_to_world.error_to(&gt);
    assert!(dr.to_degrees() < 0.5 && dt < 0.01, "{} deg, {dt} m", dr.to_degrees());

    let merged = read_ply(out.join("merged.ply")).unwrap();
    let ids = merged.room_ids.expect("room ids");
    assert_eq!(ids.len(), merged.cloud.len());
    assert!(ids.contains(&0) && ids.contains(&1));
    for room in &manifest.rooms {
        assert!(out.join(&room.cloud_file).is_file());
    }
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["pairs"][0]["status"], "ok");
}

#[test]
fn missing_input_file_exits_2() {
    let dir = TempDir::new().unwrap();
    let manifest = dir.path().join("m.json");
    fs::write(
        &manifest,
        r#"{"root_room": "a", "pairs": [{"room_a": "a", "room_b": "b", "match_file": "nope.json",
            "cloud_a": "a.ply", "cloud_b": "b.ply"}]}"#,
    )
    .unwrap();
    let o = run(&["stitch", p(&manifest), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    let expected = format!("file not found: {}", dir.path().join("nope.json").display());
    assert!(stderr(&o).contains(&expected), "{}", stderr(&o));

    let o = run(&["stitch", p(&dir.path().join("absent.json")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("file not found"));
}

#[test]
fn disconnected_manifest_exits_3() {
    let dir = TempDir::new().unwrap();
    let scene = synth_scene(dir.path(), r#"{"cloud_point_count": 2000}"#);
    let manifest = scene.join("three.json");
    fs::write(
        &manifest,
        r#"{"root_room": "a", "rooms": ["a", "b", "c"], "pairs": [{"room_a": "a", "room_b": "b",
            "match_file": "matches.json", "cloud_a": "room_a.ply", "cloud_b": "room_b.ply"}]}"#,
    )
    .unwrap();
    let o = run(&["stitch", p(&manifest), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("registration graph disconnected"), "{}", stderr(&o));
    assert!(!dir.path().join("out/scene.json").exists());
}

#[test]
fn pair_failure_reports_context_and_diagnostics() {
    let dir = TempDir::new().unwrap();
    let scene = synth_scene(dir.path(), r#"{"cloud_point_count": 2000}"#);
    let manifest = scene.join("broken.json");
    // A score floor above every match leaves nothing to register.
    fs::write(
        &manifest,
        r#"{"root_room": "a", "pairs": [{"room_a": "a", "room_b": "b", "min_score": 2.0,
            "match_file": "matches.json", "cloud_a": "room_a.ply", "cloud_b": "room_b.ply"}]}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run(&["stitch", p(&manifest), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("pair a -> b"), "{}", stderr(&o));
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["pairs"][0]["status"], "error");
    assert_eq!(diag["pairs"][0]["exit_code"], 2);
}

#[test]
fn plane_reports_flatness_and_flattens() {
    let dir = TempDir::new().unwrap();
    let cloud = dir.path().join("table.ply");
    write_ply(&cloud, &table_cloud(0.005, 1), None, PlyFormat::BinaryLittleEndian).unwrap();
    let flat = dir.path().join("flat.ply");
    let report = dir.path().join("plane.json");
    let o = run(&["plane", p(&cloud), "--flatten", p(&flat), "--out", p(&report), "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["flatness_ok"], true);
    assert!(r["stddev_m"].as_f64().unwrap() <= 0.01);
    assert!(r["flattened"]["variance_after_m2"].as_f64().unwrap() < 1e-20);
    assert_eq!(read_ply(&flat).unwrap().cloud.len(), 3300);

    let rough = dir.path().join("rough.ply");
    write_ply(&rough, &table_cloud(0.03, 1), None, PlyFormat::Ascii).unwrap();
    let o = run(&["plane", p(&rough), "--threshold", "0.08"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["flatness_ok"], false);
}

#[test]
fn plane_input_and_numerical_errors() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.ply");
    write_ply(&empty, &PointCloud::new(vec![]), None, PlyFormat::Ascii).unwrap();
    assert_eq!(run(&["plane", p(&empty)]).status.code(), Some(2));

    let garbage = dir.path().join("garbage.ply");
    fs::write(&garbage, "not a ply file\n").unwrap();
    assert_eq!(run(&["plane", p(&garbage)]).status.code(), Some(2));

    let line = dir.path().join("line.ply");
    let pts = (0..100).map(|i| Vec3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
    write_ply(&line, &PointCloud::new(pts), None, PlyFormat::Ascii).unwrap();
    let o = run(&["plane", p(&line), "--min-inliers", "3"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

fn scene_with_table(dir: &Path) -> PathBuf {
    let cloud = dir.join("table.ply");
    write_ply(&cloud, &table_cloud(0.002, 2), None, PlyFormat::BinaryLittleEndian).unwrap();
    let manifest = dir.join("scene.json");
    fs::write(&manifest, SceneManifest::new("a").to_json()).unwrap();
    let o = run(&["plane", p(&cloud), "--add-to", p(&manifest), "--id", "table"]);
    assert!(o.status.success(), "{}", stderr(&o));
    manifest
}

#[test]
fn place_is_deterministic_and_rejects_oversized_assets() {
    let dir = TempDir::new().unwrap();
    let manifest = scene_with_table(dir.path());
    let asset = dir.path().join("mug.json");
    fs::write(
        &asset,
        r#"{"asset_id": "mug", "semantic_label": "mug",
            "aabb_local": {"min": [-0.05, -0.05, 0.0], "max": [0.05, 0.05, 0.12]}}"#,
    )
    .unwrap();
    let place = |out: &Path| {
        let o = run(&["place", p(&manifest), "--plane", "table", "--asset", p(&asset), "--seed", "9", "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(out).unwrap()
    };
    let first = place(&dir.path().join("one.json"));
    let second = place(&dir.path().join("two.json"));
    assert_eq!(first, second);
    let placed = SceneManifest::from_json(&first, Path::new("one.json")).unwrap();
    assert_eq!(placed.assets.len(), 1);
    placed.validate().unwrap();
    let plane = placed.plane("table").unwrap();
    assert!(placed.assets[0].snap_error(&plane.plane) < 1e-9);

    let big = dir.path().join("sofa.json");
    fs::write(
        &big,
        r#"{"asset_id": "sofa", "semantic_label": "sofa",
            "aabb_local": {"min": [-1.5, -0.5, 0.0], "max": [1.5, 0.5, 0.8]}}"#,
    )
    .unwrap();
    let o = run(&["place", p(&manifest), "--plane", "table", "--asset", p(&big)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    let o = run(&["place", p(&manifest), "--plane", "shelf", "--asset", p(&asset)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_reports_sim_real_correlation() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("eval");
    let o = run(&["eval", p(&fixture("generalization_episodes.csv")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("pearson"));
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("correlation.json")).unwrap()).unwrap();
    let r = c["r_task_averaged"].as_f64().unwrap();
    assert!((r - 0.91).abs() <= 0.03, "r = {r}");
    assert!(out.join("report.csv").is_file());
}

#[test]
fn eval_single_row_and_malformed_csv() {
    let dir = TempDir::new().unwrap();
    let one = dir.path().join("one.csv");
    fs::write(&one, "task,tier,success,shortest_len,actual_len,traj_file\nMicrowave,Train,1,2.0,2.5,\n").unwrap();
    let outcome = run_eval(
        &EvalArgs {
            episodes: one,
            out_dir: None,
            trajectories: None,
        },
        &Logger::silent(),
    )
    .unwrap();
    assert_eq!(outcome.cells, 1);
    assert!(outcome.correlation.is_none());
    assert_eq!(outcome.per_task[0].spl, Some(0.8));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "task,tier,success\nMicrowave,Train,1\nMicrowave,Train,maybe\n").unwrap();
    let o = run(&["eval", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn synth_is_deterministic_and_writes_episodes() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{"cloud_point_count": 3000, "outlier_fraction": 0.3,
        "episodes": {"cells": [{"task": "Microwave", "tier": "Train", "n_trials": 20, "true_rate": 0.7}]}}"#;
    let a = synth_scene(&dir.path().join("a"), cfg);
    let b = synth_scene(&dir.path().join("b"), cfg);
    for f in ["matches.json", "room_a.ply", "room_b.ply", "ground_truth.json", "stitch.json", "episodes.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("ground_truth.json")).unwrap()).unwrap();
    let outliers = truth["labels"]["outlier"].as_array().unwrap();
    let n = outliers.len() as f64;
    let flagged = outliers.iter().filter(|o| o.as_bool().unwrap()).count() as f64;
    assert_eq!(flagged, (0.3 * n).ceil());
}

#[test]
fn invalid_thread_cap_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let o = bin()
        .env("PANOSTITCH_THREADS", "zero")
        .args(["synth", "--out", p(dir.path())])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin()
        .env("PANOSTITCH_THREADS", "1")
        .args(["synth", "--out", p(dir.path())])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}
