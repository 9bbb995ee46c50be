use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hbvar(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hbvar"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn hbvar")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> Output {
    assert_eq!(
        code(&out),
        0,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Writes two small synthetic groups and returns their manifests.
fn two_groups(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = r#"{"group_id": "controls", "n_regions": 3, "n_subjects": 4, "n_time": 70, "nu": 12,
        "subject_scale": 0.01, "seed": 5, "sigma": [[1, 0.5, 0.2], [0.5, 1, 0.3], [0.2, 0.3, 1]]}"#;
    std::fs::write(dir.join("gen.json"), spec).unwrap();
    ok(hbvar(&["simulate", "--spec", "gen.json", "--out", "ctrl"], dir));
    std::fs::write(dir.join("gen2.json"), spec.replace("controls", "patients")).unwrap();
    ok(hbvar(
        &["simulate", "--spec", "gen2.json", "--out", "pat", "--seed", "9"],
        dir,
    ));
    (dir.join("ctrl/manifest.json"), dir.join("pat/manifest.json"))
}

fn read_dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn fit_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_groups(dir);
    for model in ["1", "2", "3"] {
        for out in ["a", "b"] {
            ok(hbvar(
                &[
                    "fit",
                    "-g",
                    "ctrl/manifest.json",
                    "--model",
                    model,
                    "--lag",
                    "1",
                    "--seed",
                    "3",
                    "--out",
                    out,
                ],
                dir,
            ));
        }
    }
    let a = read_dir_files(&dir.join("a/draws"));
    assert_eq!(a.len(), 6);
    assert_eq!(a, read_dir_files(&dir.join("b/draws")));
    assert_eq!(
        read_dir_files(&dir.join("a/reports")),
        read_dir_files(&dir.join("b/reports"))
    );
}

#[test]
fn exact_models_write_no_rhat_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_groups(dir);
    ok(hbvar(
        &[
            "fit",
            "-g",
            "ctrl/manifest.json",
            "--model",
            "2",
            "--seed",
            "1",
            "--lambda",
            "0.1",
            "--kappa",
            "0.01",
            "--out",
            "run",
        ],
        dir,
    ));
    assert!(dir.join("run/draws/controls-model2-lag1.csv").is_file());
    let reports = dir.join("run/reports");
    assert!(!reports.exists() || std::fs::read_dir(reports).unwrap().next().is_none());
}

#[test]
fn invalid_inputs_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_groups(dir);
    // seed is mandatory
    assert_eq!(code(&hbvar(&["fit", "-g", "ctrl/manifest.json"], dir)), 2);
    assert_eq!(code(&hbvar(&["fit", "-g", "missing.json", "--seed", "1"], dir)), 2);
    assert_eq!(
        code(&hbvar(
            &["fit", "-g", "ctrl/manifest.json", "--seed", "1", "--model", "4"],
            dir
        )),
        2
    );
    assert_eq!(
        code(&hbvar(
            &["validate", "-g", "ctrl/manifest.json", "--seed", "1", "--lags", "70"],
            dir
        )),
        2
    );
    std::fs::write(dir.join("bad.json"), r#"{"seed": 1, "chians": 3}"#).unwrap();
    assert_eq!(code(&hbvar(&["validate", "--config", "bad.json"], dir)), 2);
    assert_eq!(code(&hbvar(&["frobnicate"], dir)), 2);
}

#[test]
fn constant_region_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::create_dir_all(dir.join("g")).unwrap();
    let mut csv = String::from("A,B\n");
    for t in 0..30 {
        csv.push_str(&format!("{},{}\n", (t as f64 * 0.7).sin(), 1.0));
    }
    std::fs::write(dir.join("g/s1.csv"), &csv).unwrap();
    std::fs::write(
        dir.join("g/manifest.json"),
        r#"{"group_id": "g", "subjects": ["s1.csv"]}"#,
    )
    .unwrap();
    let out = hbvar(
        &["validate", "-g", "g/manifest.json", "--seed", "1", "--no-center"],
        dir,
    );
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unconverged_fit_exits_with_code_4_and_keeps_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_groups(dir);
    // no warmup and a handful of draws cannot reach R̂ ≤ 1.05
    let out = hbvar(
        &[
            "fit",
            "-g",
            "ctrl/manifest.json",
            "--seed",
            "1",
            "--warmup",
            "0",
            "--draws",
            "4",
            "--chains",
            "4",
            "--out",
            "run",
        ],
        dir,
    );
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("run/draws/controls-model1-lag1.csv").is_file());
    assert!(dir.join("run/reports/rhat-controls-model1-lag1.csv").is_file());
    assert!(dir.join("run/manifest.json").is_file());
}

#[test]
fn stale_inputs_are_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_groups(dir);
    ok(hbvar(
        &[
            "fit",
            "-g",
            "ctrl/manifest.json",
            "--model",
            "2",
            "--seed",
            "1",
            "--out",
            "run",
        ],
        dir,
    ));
    ok(hbvar(&["waic", "--run", "run", "--out", "w"], dir));
    // edit one subject file after the fit
    let path = dir.join("ctrl/sub-001.csv");
    let mut text = std::fs::read_to_string(&path).unwrap();
    let last = text.lines().last().unwrap().to_string();
    text.push_str(&last);
    text.push('\n');
    std::fs::write(&path, text).unwrap();
    let out = hbvar(&["waic", "--run", "run", "--out", "w2"], dir);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stale"));
}

#[test]
fn pipeline_runs_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_groups(dir);
    std::fs::write(
        dir.join("run.json"),
        r#"{"groups": ["ctrl/manifest.json", "pat/manifest.json"], "seed": 11, "jobs": 3, "draws": 300}"#,
    )
    .unwrap();
    let out = ok(hbvar(&["pipeline", "--config", "run.json"], dir));
    let run_dir = dir.join(String::from_utf8(out.stdout).unwrap().trim());
    // runs/<timestamp>-<hash>
    let name = run_dir.file_name().unwrap().to_string_lossy().into_owned();
    let (stamp, hash) = name.split_once('-').unwrap();
    assert!(stamp.chars().all(|c| c.is_ascii_digit()));
    assert_eq!(hash.len(), 12);
    assert_eq!(run_dir.parent().unwrap().file_name().unwrap(), "runs");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["fits"].as_array().unwrap().len(), 18);
    let stages: Vec<&str> = manifest["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_str().unwrap())
        .collect();
    assert_eq!(stages, ["tune", "fit", "waic", "connectivity", "diff"]);
    assert!(manifest["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .all(|i| i["sha256"].as_str().unwrap().len() == 64));

    let md = std::fs::read_to_string(run_dir.join("reports/waic.md")).unwrap();
    assert_eq!(md.lines().count(), 5);
    assert_eq!(md.matches(" *").count(), 2, "one flag per group:\n{md}");
    let best = manifest["best_lag"].as_u64().unwrap();
    // the connectivity stage read the Model 1 fit at the flagged lag
    let rules: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join("reports/connectivity-controls/rules.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(rules["sources"][0], format!("controls-model1-lag{best}"));
    for f in ["edges.csv", "region_weights.csv", "scatter.csv"] {
        assert!(run_dir.join("reports/connectivity-controls").join(f).is_file());
    }
    assert!(run_dir.join("reports/diff-controls-vs-patients/edges.csv").is_file());
    let header = std::fs::read_to_string(run_dir.join("reports/connectivity-controls/edges.csv")).unwrap();
    assert!(header.starts_with("from,to,lag,mean,sd,ci_low,ci_high,sign"));
}

#[test]
fn help_lists_every_command() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(hbvar(&["--help"], tmp.path()));
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in [
        "validate",
        "simulate",
        "tune",
        "fit",
        "waic",
        "connectivity",
        "diff",
        "pipeline",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn duplicate_group_ids_are_rejected_before_fitting() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    two_groups(dir);
    // a second simulation of the same spec keeps the same group id
    ok(hbvar(
        &["simulate", "--spec", "gen.json", "--out", "ctrl2", "--seed", "4"],
        dir,
    ));
    let groups = ["-g", "ctrl/manifest.json", "-g", "ctrl2/manifest.json", "--seed", "1"];
    let out = hbvar(&[&["pipeline"][..], &groups, &["--out", "run"]].concat(), dir);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("distinct group_id"));
    assert!(!dir.join("run").exists());
    assert_eq!(code(&hbvar(&[&["validate"][..], &groups].concat(), dir)), 2);
}
