use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const GT: &str = "\
Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59
Car 0.00 0 1.85 387.63 181.54 423.81 203.12 1.67 1.87 3.69 -16.53 2.39 58.49 1.57
Pedestrian 0.00 0 -0.20 712.40 143.00 810.73 307.92 1.89 0.48 1.20 1.84 1.47 8.41 0.01
DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10
";

const CALIB: &str = "\
P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03
";

fn monodtr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_monodtr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with_score(text: &str, score: f64) -> String {
    text.lines()
        .filter(|l| !l.starts_with("DontCare"))
        .map(|l| format!("{l} {score}\n"))
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn eval_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap()
}

#[test]
fn gradcheck_passes_and_lists_every_check() {
    let o = monodtr(&["gradcheck", "--set", "gradcheck_seeds=2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("max_rel_err"));
    for name in ["matmul", "dfe", "encoder_linear", "decoder_vanilla", "detection_loss"] {
        assert!(out.lines().any(|l| l.starts_with(name)), "{name} missing");
    }
}

#[test]
fn corrupted_gradient_exits_one_naming_the_op() {
    let o = monodtr(&["gradcheck", "--set", "gradcheck_seeds=1", "--set", "gradcheck_corrupt=conv2d_grouped"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("conv2d_grouped"));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn config_errors_exit_two() {
    assert_eq!(monodtr(&["--set", "no_such_key=1", "gradcheck"]).status.code(), Some(2));
    assert_eq!(monodtr(&["--set", "lr=abc", "gradcheck"]).status.code(), Some(2));
    assert_eq!(monodtr(&["--config", "/nonexistent/cfg.txt", "gradcheck"]).status.code(), Some(2));
    assert_eq!(monodtr(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bench_rows_and_parallel_refusal() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("bench.csv");
    let o = monodtr(&[
        "bench",
        "--set",
        "bench_sizes=32,64,128,256",
        "--set",
        "bench_runs=1",
        "--set",
        "bench_dim=8",
        "--out",
        p(&csv),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "N,kind,median_ms,runs,seed");
    assert_eq!(lines.len(), 9);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("bench.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["paper_reference_ms"]["vanilla"], 136.0);
    assert_eq!(meta["paper_reference_ms"]["linear"], 37.0);

    let o = monodtr(&["bench", "--set", "parallel=true"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("parallel"));
}

#[test]
fn default_bench_separates_the_kernels() {
    let o = monodtr(&["bench"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows: Vec<(usize, String, f64)> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].to_string(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 8);
    let t = |n: usize, k: &str| rows.iter().find(|r| r.0 == n && r.1 == k).unwrap().2;
    assert!(t(4096, "vanilla") / t(4096, "linear") > t(512, "vanilla") / t(512, "linear"));
}

fn write_set(dir: &Path, files: &[(&str, &str)]) {
    fs::create_dir_all(dir).unwrap();
    for (name, text) in files {
        fs::write(dir.join(name), text).unwrap();
    }
}

#[test]
fn eval_ground_truth_copy_is_perfect() {
    let root = TempDir::new().unwrap();
    let (det, gt, out) = (root.path().join("det"), root.path().join("gt"), root.path().join("out"));
    write_set(&gt, &[("000000.txt", GT), ("000001.txt", GT)]);
    let dets = with_score(GT, 1.0);
    write_set(&det, &[("000000.txt", &dets), ("000001.txt", &dets)]);
    for parallel in ["false", "true"] {
        let o = monodtr(&[
            "eval",
            p(&det),
            p(&gt),
            "--set",
            &format!("out_dir={}", p(&out)),
            "--set",
            "classes=Car,Pedestrian,Cyclist",
            "--set",
            &format!("parallel={parallel}"),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("absent"));
        let json = eval_json(&out);
        let entries = json.as_array().unwrap();
        assert_eq!(entries.len(), 3 * 3 * 2);
        for e in entries {
            if e["class"] == "Cyclist" {
                assert!(e["ap"].is_null());
            } else {
                assert_eq!(e["ap"], 1.0, "{e}");
            }
        }
    }
}

#[test]
fn eval_without_detections_scores_zero() {
    let root = TempDir::new().unwrap();
    let (det, gt, out) = (root.path().join("det"), root.path().join("gt"), root.path().join("out"));
    write_set(&gt, &[("000000.txt", GT)]);
    fs::create_dir_all(&det).unwrap();
    let o = monodtr(&["eval", p(&det), p(&gt), "--set", &format!("out_dir={}", p(&out))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for e in eval_json(&out).as_array().unwrap() {
        assert_eq!(e["ap"], 0.0);
    }
}

/// Interpolated precision at 40 recall positions, by direct scan.
fn staircase(tp: &[bool], num_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut hits = 0;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        points.push((hits as f64 / num_gt as f64, hits as f64 / (i + 1) as f64));
    }
    (1..=40)
        .map(|k| {
            let r = k as f64 / 40.0;
            points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 40.0
}

#[test]
fn eval_mixed_fixture_matches_staircase() {
    let gt = "\
Car 0.00 0 0.0 100.00 100.00 150.00 140.00 1.5 1.6 3.9 -5.0 1.6 20.0 0.0
Car 0.00 0 0.0 300.00 100.00 350.00 140.00 1.5 1.6 3.9 0.0 1.6 25.0 0.0
Car 0.00 0 0.0 500.00 100.00 550.00 140.00 1.5 1.6 3.9 5.0 1.6 30.0 0.0
Car 0.00 0 0.0 700.00 100.00 750.00 140.00 1.5 1.6 3.9 9.0 1.6 35.0 0.0
";
    let rows: Vec<&str> = gt.lines().collect();
    let dets = format!(
        "{} 0.9\nCar 0.00 0 0.0 900.00 10.00 950.00 40.00 1.5 1.6 3.9 20.0 1.6 50.0 0.0 0.8\n{} 0.7\n{} 0.5\n",
        rows[0], rows[1], rows[2]
    );
    let root = TempDir::new().unwrap();
    let (det_dir, gt_dir, out) = (root.path().join("det"), root.path().join("gt"), root.path().join("out"));
    write_set(&gt_dir, &[("a.txt", gt)]);
    write_set(&det_dir, &[("a.txt", &dets)]);
    let o = monodtr(&["eval", p(&det_dir), p(&gt_dir), "--set", &format!("out_dir={}", p(&out))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let want = staircase(&[true, false, true, true], 4);
    assert!((want - 0.625).abs() < 1e-15);
    for e in eval_json(&out).as_array().unwrap() {
        assert!((e["ap"].as_f64().unwrap() - want).abs() < 1e-12, "{e}");
    }
}

#[test]
fn eval_reports_parse_errors_with_location() {
    let root = TempDir::new().unwrap();
    let (det, gt) = (root.path().join("det"), root.path().join("gt"));
    write_set(&gt, &[("000000.txt", GT)]);
    write_set(&det, &[("000000.txt", "Car 0.00 0 oops\n")]);
    let o = monodtr(&["eval", p(&det), p(&gt), "--set", &format!("out_dir={}", p(root.path()))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn inspect_labels_calib_and_depth_maps() {
    let dir = TempDir::new().unwrap();
    let labels = dir.path().join("labels.txt");
    fs::write(&labels, GT).unwrap();
    let o = monodtr(&["inspect", p(&labels)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1 + 4);
    assert!(out.contains("Pedestrian"));

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, format!("{}Car 0.00 0 -1.58 587.01 x\n", &GT[..GT.find('\n').unwrap() + 1])).unwrap();
    let o = monodtr(&["inspect", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    assert!(stderr(&o).contains("column"), "{}", stderr(&o));

    let calib = dir.path().join("calib.txt");
    fs::write(&calib, CALIB).unwrap();
    let o = monodtr(&["inspect", p(&calib)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("fx 721.5377"));
    assert!(stdout(&o).contains("after crop 100"));

    let dbin = dir.path().join("depth.dbin");
    fs::write(&dbin, "DBIN 2 3 4\n0 -1 3\n3 3 -1\n").unwrap();
    let o = monodtr(&["inspect", p(&dbin)]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("invalid 2"));
    assert!(out.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["3", "3"]));
}

#[test]
fn inspect_flags_inconsistent_rows() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("labels.txt");
    fs::write(&path, "Car 0.00 0 2.50 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n").unwrap();
    let o = monodtr(&["inspect", p(&path)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("violation: row 1: alpha"));
}

#[test]
fn train_toy_writes_artifacts_and_reloads_its_config() {
    let dir = TempDir::new().unwrap();
    let run_a = dir.path().join("a");
    let o = monodtr(&[
        "train-toy",
        "--seed",
        "3",
        "--set",
        "steps=8",
        "--set",
        "channels=8",
        "--set",
        "heads=2",
        "--set",
        &format!("out_dir={}", p(&run_a)),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["config.txt", "loss.csv", "eval.json", "checkpoint/anchor_priors.tnsr"] {
        assert!(run_a.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(run_a.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,lr,total,cls,reg,dep"));
    assert_eq!(csv.lines().count(), 9);

    let run_b = dir.path().join("b");
    let o = monodtr(&[
        "train-toy",
        "--config",
        p(&run_a.join("config.txt")),
        "--set",
        &format!("out_dir={}", p(&run_b)),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(csv, fs::read_to_string(run_b.join("loss.csv")).unwrap());

    let o = monodtr(&["inspect", p(&run_a.join("checkpoint"))]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("anchor_priors.tnsr"));
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let dir = TempDir::new().unwrap();
    let o = monodtr(&[
        "train-toy",
        "--set",
        "steps=20",
        "--set",
        "channels=8",
        "--set",
        "heads=2",
        "--set",
        "lr=1e200",
        "--set",
        &format!("out_dir={}", p(dir.path())),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let dump = fs::read_to_string(dir.path().join("nonfinite.txt")).unwrap();
    assert!(dump.starts_with("step "));
    assert!(dump.contains("param 0"));
}
