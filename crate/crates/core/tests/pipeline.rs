use beltrot::harness::{ExperimentConfig, Method, Workspace};

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().with_seed(5);
    cfg.calibration.n_samples = 120;
    cfg.estimator.dataset.n_boxes = 30;
    cfg.estimator.training.epochs = 3;
    cfg.estimator.training.hidden = vec![32];
    cfg.baseline.hidden = vec![16];
    cfg.baseline.epochs = 2;
    cfg.baseline.random_episodes = 3;
    cfg.baseline.random_episode_len = 20;
    cfg.baseline.prior_episodes = 1;
    cfg.controller.max_steps = 60;
    cfg.bench.repetitions = 1;
    cfg.bench.random_batch = 2;
    cfg
}

fn run_all(dir: &std::path::Path) -> Workspace {
    let ws = Workspace::new(small(), dir).unwrap();
    ws.calibrate().unwrap();
    ws.train_estimator().unwrap();
    ws.train_baseline().unwrap();
    ws.bench(2).unwrap();
    ws
}

#[test]
fn same_seed_reproduces_every_artifact() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (wa, wb) = (run_all(a.path()), run_all(b.path()));
    for name in [
        "force_map.csv",
        "estimator.brem",
        "estimator_report.jsonl",
        "baseline.brbb",
        "baseline_report.jsonl",
        "bench_episodes.csv",
        "bench_summary.csv",
        "balance_band.csv",
        "bench_table.txt",
    ] {
        let (x, y) = (std::fs::read(wa.path(name)).unwrap(), std::fs::read(wb.path(name)).unwrap());
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn bench_covers_the_roster_for_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    let ws = run_all(dir.path());
    let report = beltrot::harness::BenchReport::from_rows(
        csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(ws.path("bench_episodes.csv"))
            .unwrap()
            .deserialize()
            .collect::<Result<Vec<_>, _>>()
            .unwrap(),
    );
    for m in [Method::PhysicsPrior, Method::Baseline] {
        for d in ["A", "B", "C", "D"] {
            assert_eq!(report.cell(m, d).map(|c| c.episodes), Some(1), "{m} {d}");
        }
    }
    assert_eq!(report.cell(Method::PhysicsPrior, "random").map(|c| c.episodes), Some(2));
    assert!(report.cell(Method::Baseline, "random").is_none());
}

#[test]
fn shipped_default_config_matches_built_in_defaults() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}
