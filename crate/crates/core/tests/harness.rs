use slice_core::baselines::Method;
use slice_core::harness::pipeline::{self, OnlineSummary, RunDir, Stage1Summary, Stages};
use slice_core::harness::{emit_plot_data, run_pipeline, RunConfig};
use slice_core::ledger::RunLedger;
use slice_core::Error;

const TINY: &str = "\
seed = 11
twin.params = default
twin.sigma_res = 0.05
bnn.hidden = 16, 16
pool.size = 2000
stage1.iterations = 20
stage1.warmup = 10
stage1.duration_s = 20
stage2.iterations = 30
stage2.warmup = 10
stage2.traffics = 1
stage2.duration_s = 20
stage2.confirm_repeats = 3
stage3.iterations = 6
stage3.inner = 3
stage3.duration_s = 20
oracle.duration_s = 20
";

fn run(stages: &str) -> (tempfile::TempDir, RunDir, RunConfig) {
    let cfg = RunConfig::parse(TINY, "tiny").unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::new(tmp.path().join("run"));
    run_pipeline(&cfg, TINY, &dir, &stages.parse::<Stages>().unwrap(), None).unwrap();
    (tmp, dir, cfg)
}

#[test]
fn pipeline_writes_every_stage_artifact() {
    let (_tmp, dir, cfg) = run("1,2,3,baselines");
    for f in ["config.txt", "resolved.json"] {
        assert!(dir.root.join(f).exists(), "{f}");
    }
    for f in [
        "reference.trace",
        "ledger.jsonl",
        "best_params.json",
        "summary.json",
    ] {
        assert!(dir.stage1().join(f).exists(), "stage1 {f}");
    }
    for f in [
        "ledger.jsonl",
        "policy.json",
        "observations.json",
        "params.json",
        "best_action.json",
    ] {
        assert!(dir.stage2().join(f).exists(), "stage2 {f}");
    }
    assert!(dir.stage3().join("gp.json").exists());

    let s1: Stage1Summary = pipeline::read_json(&dir.stage1().join("summary.json")).unwrap();
    assert!(s1.best_kl <= s1.initial_kl);
    let s3: OnlineSummary = pipeline::read_json(&dir.stage3().join("summary.json")).unwrap();
    assert_eq!(s3.iterations, cfg.stage3.iterations);
    let ledger = RunLedger::load(&dir.stage3().join("ledger.jsonl")).unwrap();
    assert_eq!(ledger.online_rows().count(), cfg.stage3.iterations);
    for m in [Method::GpEi, Method::GpUcb, Method::OfflineFilter] {
        assert!(
            dir.baseline(m).join("ledger.jsonl").exists(),
            "{}",
            m.name()
        );
    }
}

#[test]
fn plot_data_has_one_regret_row_per_iteration() {
    let (_tmp, dir, cfg) = run("1,2,3,baselines");
    let written = emit_plot_data(&dir).unwrap();
    let regret = std::fs::read_to_string(dir.plots().join("regret.csv")).unwrap();
    assert_eq!(regret.lines().count(), cfg.stage3.iterations + 1);
    assert!(regret.starts_with("iter,avg_usage_regret,avg_qoe_regret\n"));
    let footprint = std::fs::read_to_string(dir.plots().join("footprint.csv")).unwrap();
    assert_eq!(footprint.lines().count(), 1 + 4 * cfg.stage3.iterations);
    let convergence = std::fs::read_to_string(dir.plots().join("convergence.csv")).unwrap();
    let last: Vec<f64> = convergence
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let s1: Stage1Summary = pipeline::read_json(&dir.stage1().join("summary.json")).unwrap();
    assert_eq!(last[0] as usize, cfg.stage1.iterations - 1);
    assert!((last[1] - s1.best_kl).abs() < 1e-9 && (last[2] - s1.best_weighted).abs() < 1e-9);
    assert!(written.iter().all(|p| p.exists()));
}

#[test]
fn stage3_can_reuse_stored_stage2_output() {
    let (_tmp, dir, cfg) = run("1,2");
    let out = dir.root.join("again");
    let oracle = dir.root.join("oracle.json");
    let a = pipeline::run_stage3(&cfg, &dir.stage2(), &oracle, &out).unwrap();
    let b = pipeline::run_stage3(&cfg, &dir.stage2(), &oracle, &dir.root.join("again2")).unwrap();
    assert_eq!(a.avg_usage_regret, b.avg_usage_regret);
    assert_eq!(
        std::fs::read(out.join("ledger.jsonl")).unwrap(),
        std::fs::read(dir.root.join("again2/ledger.jsonl")).unwrap()
    );
}

#[test]
fn plot_data_needs_a_stage3_run() {
    let tmp = tempfile::tempdir().unwrap();
    let err = emit_plot_data(&RunDir::new(tmp.path())).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
}

#[test]
fn missing_stage2_output_is_an_io_error() {
    let cfg = RunConfig::parse(TINY, "tiny").unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let err = pipeline::run_stage3(
        &cfg,
        &tmp.path().join("nope"),
        &tmp.path().join("o.json"),
        &tmp.path().join("out"),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
