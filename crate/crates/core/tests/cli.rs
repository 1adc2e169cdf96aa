//! End-to-end runs of the `gpspline` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gpspline(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpspline"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, seed: &str) {
    let o = gpspline(dir, &["simulate", "--seed", seed, "--out", "data.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn simulate_fit_predict_cv_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "7");
    assert!(d.join("data.truth.json").is_file());

    let o = gpspline(d, &["fit", "--data", "data.csv", "--out", "fit"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "chain_1.csv",
        "chain_3.csv",
        "diagnostics.json",
        "summary.txt",
        "config.toml",
        "data.csv",
        "scales.csv",
    ] {
        assert!(d.join("fit").join(f).is_file(), "missing {f}");
    }
    let diag: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("fit/diagnostics.json")).unwrap()).unwrap();
    assert!(diag["max_rhat"].as_f64().unwrap() < 1.05);
    assert!(fs::read_to_string(d.join("fit/summary.txt"))
        .unwrap()
        .contains("97.5%"));

    let o = gpspline(
        d,
        &["predict", "--fit", "fit", "--id", "L03", "--out", "p.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(d.join("p.csv")).unwrap();
    let first: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[0], "1");
    assert_eq!(first[1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(text.lines().count(), 12);

    let o = gpspline(
        d,
        &[
            "cv",
            "--data",
            "data.csv",
            "--scheme",
            "cv2",
            "--warmup",
            "400",
            "--samples",
            "400",
            "--out",
            "cv2.json",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("cv2.json")).unwrap()).unwrap();
    assert_eq!(report["scheme"], "cv2");
    assert_eq!(report["folds"].as_array().unwrap().len(), 13);
}

#[test]
fn same_seed_gives_identical_draws() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "3");
    let args = |out| {
        [
            "fit",
            "--data",
            "data.csv",
            "--out",
            out,
            "--warmup",
            "200",
            "--samples",
            "200",
            "--seed",
            "11",
            "--force",
        ]
    };
    gpspline(d, &args("a"));
    gpspline(d, &args("b"));
    for f in [
        "chain_1.csv",
        "chain_2.csv",
        "chain_3.csv",
        "diagnostics.json",
        "summary.txt",
    ] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn single_chain_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), "1");
    let o = gpspline(
        tmp.path(),
        &["fit", "--data", "data.csv", "--out", "fit", "--chains", "1"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("split-Rhat"), "{}", stderr(&o));
    assert!(!tmp.path().join("fit").exists());
}

#[test]
fn map_without_fit_names_missing_draws() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("grid.csv"), "px,py,H,S,I\n1,2,3,4,5\n").unwrap();
    let o = gpspline(
        tmp.path(),
        &[
            "map", "--fit", "nofit", "--grid", "grid.csv", "--out", "map",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("chain_1.csv"), "{}", stderr(&o));
}

#[test]
fn short_run_fails_convergence_gate_and_predict_respects_it() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "2");
    let o = gpspline(
        d,
        &[
            "fit",
            "--data",
            "data.csv",
            "--out",
            "fit",
            "--warmup",
            "5",
            "--samples",
            "20",
        ],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(
        d.join("fit/chain_1.csv").is_file(),
        "outputs are kept for inspection"
    );

    let o = gpspline(
        d,
        &["predict", "--fit", "fit", "--id", "L01", "--out", "p.csv"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!d.join("p.csv").exists());
    let o = gpspline(
        d,
        &[
            "predict", "--fit", "fit", "--id", "L01", "--out", "p.csv", "--force",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn map_writes_csv_and_graymaps() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, "4");
    let o = gpspline(
        d,
        &[
            "fit",
            "--data",
            "data.csv",
            "--out",
            "fit",
            "--warmup",
            "300",
            "--samples",
            "300",
            "--force",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut grid = String::from("px,py,H,S,I\n");
    for i in 0..6 {
        for j in 0..4 {
            grid += &format!(
                "{},{},{},{},{}\n",
                40 + 2 * i,
                60 + 2 * j,
                200 + 5 * i,
                100,
                100 - 3 * j
            );
        }
    }
    fs::write(d.join("grid.csv"), grid).unwrap();
    let o = gpspline(
        d,
        &[
            "map", "--fit", "fit", "--grid", "grid.csv", "--out", "map", "--force",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("map/map.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 24 * 11);
    let pgm = fs::read_to_string(d.join("map/map_t11.pgm")).unwrap();
    let dims: Vec<&str> = pgm
        .lines()
        .filter(|l| !l.starts_with('#'))
        .nth(1)
        .unwrap()
        .split(' ')
        .collect();
    assert_eq!(dims, ["6", "4"]);
}

#[test]
fn basis_dump_writes_matrices() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gpspline(
        tmp.path(),
        &[
            "basis",
            "dump",
            "--times",
            "1,2,3,4,5,6,7,8,9,10,11",
            "--knots",
            "3",
            "--out",
            "basis",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let h = fs::read_to_string(tmp.path().join("basis/H.csv")).unwrap();
    assert_eq!(h.lines().count(), 11);
    assert_eq!(h.lines().next().unwrap().split(',').count(), 2);
    let w = fs::read_to_string(tmp.path().join("basis/W.csv")).unwrap();
    assert_eq!(w.lines().next().unwrap().split(',').count(), 3);
    for f in ["Z.csv", "omega.csv", "omega_inv_sqrt.csv", "dW.csv"] {
        assert!(tmp.path().join("basis").join(f).is_file());
    }
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), "1");
    let o = gpspline(
        tmp.path(),
        &["simulate", "--seed", "1", "--out", "data.csv"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));
    let o = gpspline(
        tmp.path(),
        &["simulate", "--seed", "1", "--out", "data.csv", "--force"],
    );
    assert!(o.status.success());
}

#[test]
fn bad_config_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), "1");
    fs::write(tmp.path().join("run.toml"), "[model]\nknots = 0\n").unwrap();
    let o = gpspline(
        tmp.path(),
        &[
            "--config", "run.toml", "fit", "--data", "data.csv", "--out", "fit",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
