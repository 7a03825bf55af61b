use std::path::Path;
use std::process::{Command, Output};

fn lfk(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfk")).args(args).current_dir(cwd).output().expect("lfk runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &str = r#"{
  "geometries": {"n_train": 3, "n_test": 1, "containment_samples": 500},
  "mesh": {"h": 10.0},
  "time": {"t0": 0.0, "dt": 4.0, "n": 101},
  "sampling": {"n_points": 256},
  "sdf": {"width": 16, "depth": 4, "fourier_k": 4, "epochs": 3, "samples_per_geometry": 1000},
  "infer": {"iterations": 5},
  "surrogate": {"width": 16, "depth": 4, "fourier_k": 4, "epochs": 2, "batch_size": 256},
  "evaluation": {"points_per_region": 64, "grid_n": 12, "inference_samples": 1000, "cdf_rows": 50}
}"#;

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"mesh": {"h": 8.0, "spacing": 2}}"#).unwrap();
    let o = lfk(&["--config", "bad.json", "show-config"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("spacing"));
}

#[test]
fn missing_artifact_exits_3_with_hint() {
    let dir = tempfile::tempdir().unwrap();
    let o = lfk(&["--out", "run", "gen-leadfields"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hint: run `lfk gen-geometries` first"));
}

#[test]
fn show_config_reports_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let o = lfk(&["--seed", "9", "show-config"], dir.path());
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["config"]["seed"], 9);
    assert_eq!(v["provenance"]["seed"], "command line");
    assert_eq!(v["provenance"]["conductivities.sigma_0"], "paper");
}

#[test]
fn staged_run_writes_artifacts_and_strict_rejects_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let base = ["--config", "tiny.json", "--out", "run"];
    let step = |cmd: &[&str]| {
        let args: Vec<&str> = base.iter().chain(cmd).copied().collect();
        let o = lfk(&args, dir.path());
        assert_eq!(code(&o), 0, "{cmd:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    step(&["gen-geometries"]);
    step(&["gen-leadfields"]);
    step(&["train-sdf"]);
    step(&["infer-latents"]);
    step(&["train-lf"]);
    step(&["simulate-ecg"]);
    let o = step(&["evaluate"]);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.starts_with("model,angular_deg,angular_ecg_leads_deg,ecg_rel_l2"));
    assert_eq!(table.lines().filter(|l| l.starts_with("pca,") || l.starts_with("sdf,") || l.starts_with("pseudo,")).count(), 3);

    let run = dir.path().join("run");
    for f in [
        "split.json",
        "resolved_config.json",
        "leadfields/report.json",
        "sdf/decoder.bin",
        "sdf/inferred_codes.json",
        "surrogate/sdf/weights.bin",
        "surrogate/pca/loss.svg",
        "surrogate/access_manifest.json",
        "eval/report.json",
        "eval/table.csv",
        "eval/heart_10mm/surrogate-sdf_angular_cdf.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let test_id = serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(run.join("split.json")).unwrap())
        .unwrap()["test"][0]
        .as_str()
        .unwrap()
        .to_string();
    for f in ["fem_standard12.csv", "pseudo_unipolar.csv", "surrogate-sdf_standard12.csv", "overlay.svg"] {
        assert!(run.join("ecg").join(&test_id).join("sinus").join(f).exists(), "missing ecg {f}");
    }
    let manifest = std::fs::read_to_string(run.join("surrogate/access_manifest.json")).unwrap();
    assert!(!manifest.contains(&format!("leadfields/{test_id}/")));

    // two epochs on a handful of points cannot meet the acceptance thresholds
    let args: Vec<&str> = base.iter().copied().chain(["--strict", "evaluate"]).collect();
    assert_eq!(code(&lfk(&args, dir.path())), 2);
}
