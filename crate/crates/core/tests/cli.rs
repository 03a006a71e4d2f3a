use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use petphys::volume::read_volume;

fn petphys(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_petphys"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PETPHYS_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = r#"{
  "dataset": {"phantom": {"size": 32, "voxel_size": 8.0}, "slices_per_subject": 2,
              "num_angles": 30, "num_subjects": 4, "calibration_refs": 2},
  "net": {"widths": [2, 4, 4]},
  "train": {"epochs": 2},
  "uq": {"num_passes": 2},
  "methods": ["SU", "MSE"],
  "doses": ["LD", "uLD"],
  "save_volumes": false
}"#;

#[test]
fn phantom_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.json"), SMALL).unwrap();
    for out in ["a", "b"] {
        ok(&petphys(&["--config", "c.json", "phantom", "--n", "3", "--seed", "7", "--out", out], d));
    }
    for i in 0..3 {
        let name = format!("phantom_{i:03}.pvol");
        assert_eq!(fs::read(d.join("a").join(&name)).unwrap(), fs::read(d.join("b").join(&name)).unwrap());
    }
    let snap = fs::read_to_string(d.join("a/config.resolved.json")).unwrap();
    assert!(snap.contains("\"seed\": 7") && snap.contains("\"command\": \"phantom\""));
}

#[test]
fn project_then_osem_round_trip_reports_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Full-size phantom, unsmoothed OSEM with enough iterations for 30 dB.
    fs::write(
        d.join("c.json"),
        r#"{"dataset": {"slices_per_subject": 1}, "recon": {"psf_fwhm": 0, "post_smooth_fwhm": 0, "num_iterations": 10}}"#,
    )
    .unwrap();
    ok(&petphys(&["--config", "c.json", "phantom", "--seed", "3", "--out", "p"], d));
    ok(&petphys(&["--config", "c.json", "project", "--input", "p/phantom_000.pvol", "--out", "s"], d));
    let stdout = ok(&petphys(
        &["--config", "c.json", "osem", "--input", "s/sinogram.pvol", "--reference", "p/phantom_000.pvol", "--out", "r"],
        d,
    ));
    assert!(stdout.contains("PSNR"), "{stdout}");
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r/metrics.json")).unwrap()).unwrap();
    let db = metrics["psnr_mean"].as_f64().unwrap();
    assert!(db >= 30.0, "{db}");
    assert_eq!(read_volume(d.join("r/recon.pvol")).unwrap().num_slices(), 1);
}

#[test]
fn sweep_writes_one_row_per_method_and_dose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.json"), SMALL).unwrap();
    ok(&petphys(&["--config", "c.json", "sweep", "--seed", "1", "--out", "sw"], d));
    let csv = fs::read_to_string(d.join("sw/report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 2, "{csv}");
    assert!(rows[0].starts_with("SU,LD,") && rows[3].starts_with("MSE,uLD,"));

    // The same plan handed over as --plan gives the same report.
    let plan: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("sw/config.resolved.json")).unwrap()).unwrap();
    fs::write(d.join("plan.json"), plan["config"].to_string()).unwrap();
    ok(&petphys(&["sweep", "--plan", "plan.json", "--seed", "1", "--out", "sw2"], d));
    assert_eq!(csv, fs::read_to_string(d.join("sw2/report.csv")).unwrap());
}

#[test]
fn dose_pipeline_is_thread_count_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.json"), SMALL).unwrap();
    ok(&petphys(&["--config", "c.json", "phantom", "--seed", "2", "--out", "p"], d));
    ok(&petphys(&["--config", "c.json", "calibrate", "--seed", "2", "--levels", "uLD", "--out", "cal"], d));
    for (out, threads) in [("d1", "1"), ("d2", "3")] {
        ok(&petphys(
            &[
                "--config", "c.json", "simulate-dose", "--input", "p/phantom_000.pvol", "--level", "uLD",
                "--calibration", "cal/calibration.json", "--seed", "5", "--threads", threads, "--out", out,
            ],
            d,
        ));
    }
    assert_eq!(fs::read(d.join("d1/lowdose.pvol")).unwrap(), fs::read(d.join("d2/lowdose.pvol")).unwrap());

    ok(&petphys(&["--config", "c.json", "train", "--method", "SU", "--seed", "4", "--out", "t"], d));
    ok(&petphys(
        &["infer", "--model", "t/model.pnet", "--input", "d1/lowdose.pvol", "--mri", "p/phantom_000.pvol", "--out", "i"],
        d,
    ));
    ok(&petphys(
        &[
            "--config", "c.json", "uq", "--model", "t/model.pnet", "--input", "d1/lowdose.pvol", "--mri",
            "p/phantom_000.pvol", "--reference", "p/phantom_000.pvol", "--seed", "6", "--out", "u",
        ],
        d,
    ));
    let uq = read_volume(d.join("u/uq.pvol")).unwrap();
    assert_eq!(uq.metadata["channels"], "y_mean,sigma,y_spread,q2,bm2,q1,bm1");
    let stdout = ok(&petphys(
        &["evaluate", "--prediction", "u/uq.pvol", "--reference", "p/phantom_000.pvol", "--compare", "i/prediction.pvol", "--out", "e"],
        d,
    ));
    assert!(stdout.contains("SSIM"), "{stdout}");
    assert!(d.join("e/metrics.csv").exists());
}

#[test]
fn failures_print_one_categorized_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases: [(&[&str], &str); 4] = [
        (&["phantom", "--n", "1"], "error[config]:"),
        (&["osem", "--input", "missing.pvol"], "error[io]:"),
        (&["no-such-command"], "error[usage]:"),
        (&["--config", "bad.json", "project", "--input", "x.pvol"], "error[config]:"),
    ];
    fs::write(
        d.join("bad.json"),
        r#"{"uq": {"num_passes": 0, "delta_u": 0}, "dataset": {"num_subjects": 1}}"#,
    )
    .unwrap();
    for (args, prefix) in cases {
        let out = petphys(args, d);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(prefix), "{args:?}: {err}");
    }
    let err = String::from_utf8_lossy(&petphys(&["--config", "bad.json", "project", "--input", "x"], d).stderr).into_owned();
    for key in ["uq.num_passes", "uq.delta_u", "dataset.num_subjects"] {
        assert!(err.contains(key), "{key} missing from {err}");
    }
}

#[test]
fn help_lists_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&petphys(&["sweep", "--help"], dir.path()));
    assert!(out.contains("Config keys:") && out.contains("PETPHYS_THREADS"), "{out}");
}
