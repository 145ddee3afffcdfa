use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 7

[calibration]
n_samples = 120

[estimator.dataset]
n_boxes = 30

[estimator.training]
epochs = 3
hidden = [32]

[controller]
max_steps = 80
"#;

fn beltrot(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beltrot"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn beltrot")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = beltrot(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn reruns_with_the_same_seed_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();
    let mut traces = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        ok(&out, &["--config", cfg, "calibrate"]);
        ok(&out, &["--config", cfg, "train-estimator"]);
        let stdout = ok(&out, &["--config", cfg, "run-episode", "--distribution", "A", "--episode", "3"]);
        assert!(stdout.starts_with("# config_hash="), "{stdout}");
        traces.push(std::fs::read(out.join("episode_physics_A_3.csv")).unwrap());
        traces.push(std::fs::read(out.join("force_map.csv")).unwrap());
        traces.push(std::fs::read(out.join("estimator.brem")).unwrap());
    }
    assert_eq!(traces[0], traces[3]);
    assert_eq!(traces[1], traces[4]);
    assert_eq!(traces[2], traces[5]);
    let text = String::from_utf8(traces[0].clone()).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("step,theta,balance_err,r1,r2,v1,v2,p1,p2"));
}

#[test]
fn seed_flag_changes_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let a = ok(tmp.path(), &["show-config"]);
    let b = ok(tmp.path(), &["--seed", "9", "show-config"]);
    assert_ne!(a, b);
    assert!(b.contains("seed = 9"));
}

#[test]
fn unknown_method_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = beltrot(tmp.path(), &["run-episode", "--method", "oracle"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown method"));
}

#[test]
fn missing_artifacts_fail_with_a_named_file() {
    let tmp = tempfile::tempdir().unwrap();
    let o = beltrot(tmp.path(), &["run-episode"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("force_map.csv"), "{err}");
}

#[test]
fn malformed_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[controller]\nepsilon = \"wide\"\n").unwrap();
    let o = beltrot(tmp.path(), &["--config", cfg.to_str().unwrap(), "show-config"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.toml"));
}
