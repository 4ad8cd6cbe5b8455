use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gipc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gipc")).args(args).output().expect("binary runs")
}

fn scene(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenes")
        .join(format!("{name}.json"))
        .to_string_lossy()
        .into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).expect("csv opens");
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn zero_steps_writes_first_frame_and_empty_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = gipc(&["run", &scene("pt-drop"), "--steps", "0", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("frame_00000.obj").exists());
    let (header, rows) = read_csv(&dir.path().join("diagnostics.csv"));
    assert_eq!(header[0], "step");
    assert!(rows.is_empty());
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["frames"], 1);
    assert_eq!(summary["total_newton_iters"], 0);
}

#[test]
fn short_drop_is_intersection_free() {
    let dir = tempfile::tempdir().unwrap();
    let o = gipc(&["run", &scene("pt-drop"), "--steps", "12", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(s["intersection_free"], true);
    assert_eq!(s["unconverged_steps"], 0);
    assert_eq!(s["frames"], 13);
    assert!(s["min_frame_distance_rel"].as_f64().unwrap() > 0.0);
    let (header, rows) = read_csv(&dir.path().join("diagnostics.csv"));
    assert_eq!(rows.len(), 12);
    let conv = col(&header, "converged");
    assert!(rows.iter().all(|r| r[conv] == "true"));
    let obj = fs::read_to_string(dir.path().join("frame_00012.obj")).unwrap();
    assert!(obj.lines().any(|l| l.starts_with("f ")));
}

#[test]
fn reference_mode_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = gipc(&[
        "run",
        &scene("pe-drop"),
        "--steps",
        "8",
        "--mode",
        "reference-ipc",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(s["mode"], "reference-ipc");
}

#[test]
fn unknown_mode_and_missing_scene_fail() {
    let o = gipc(&["run", &scene("pt-drop"), "--mode", "newton"]);
    assert!(!o.status.success());
    let o = gipc(&["run", "/nonexistent/scene.json"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn runs_are_deterministic() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let o = gipc(&["run", &scene("cube-aligned"), "--steps", "10", "--out", dir.path().to_str().unwrap()]);
        assert!(o.status.success());
        let (header, rows) = read_csv(&dir.path().join("diagnostics.csv"));
        let wall = col(&header, "wall_ms");
        rows.into_iter()
            .map(|mut r| {
                r.remove(wall);
                r
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn norms_curve_ratio_decays_and_filter_holds() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("norms.csv");
    let o = gipc(&["curves", "norms", "--samples", "200", "--out", p.to_str().unwrap()]);
    assert!(o.status.success());
    let (header, rows) = read_csv(&p);
    let (r, f) = (col(&header, "ratio"), col(&header, "filtered_ratio"));
    let ratio: Vec<f64> = rows.iter().map(|x| x[r].parse().unwrap()).collect();
    let filtered: Vec<f64> = rows.iter().map(|x| x[f].parse().unwrap()).collect();
    let g: Vec<f64> = rows.iter().map(|x| x[col(&header, "g")].parse().unwrap()).collect();
    assert!(ratio[0] < 0.05 * ratio[rows.len() / 2]);
    for i in 1..rows.len() {
        if g[i] < 0.01 {
            assert!(ratio[i] > ratio[i - 1]);
        }
    }
    assert!(filtered[0] > ratio[0]);
}

#[test]
fn mollifier_curve_lambda_g2_nonpositive() {
    let o = gipc(&["curves", "mollifier-eigs", "--samples", "50"]);
    assert!(o.status.success());
    let mut r = csv::Reader::from_reader(&o.stdout[..]);
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let k = col(&header, "lambda_g2");
    let mut n = 0;
    for rec in r.records() {
        let v: f64 = rec.unwrap()[k].parse().unwrap();
        assert!(v <= 0.0);
        n += 1;
    }
    assert_eq!(n, 250);
}

#[test]
fn bad_curve_and_sample_count_fail() {
    assert!(!gipc(&["curves", "bogus"]).status.success());
    assert!(!gipc(&["curves", "barrier", "--samples", "1"]).status.success());
}

#[test]
fn bench_writes_rows_and_rejects_empty_batch() {
    let o = gipc(&["bench-projection", "--counts", "50", "--dims", "6,12"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_reader(&o.stdout[..]);
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let k = col(&header, "max_frobenius_diff");
    let rows: Vec<_> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert!(row[k].parse::<f64>().unwrap() < 1e-8);
    }
    let o = gipc(&["bench-projection", "--counts", "0"]);
    assert!(!o.status.success());
    let o = gipc(&["bench-projection", "--counts", "5", "--dims", "7"]);
    assert!(!o.status.success());
}
