use slice_core::slicesim::{Engine, NetworkState, RealTwin, SimulationParams};
use slice_core::stage1::{discrepancy_at, Stage1Config, REFERENCE_ACTION};

fn reference(twin: &RealTwin, cfg: &Stage1Config, seed: u64) -> slice_core::slicesim::LatencyTrace {
    twin.collect_reference(
        &NetworkState::new(1),
        &REFERENCE_ACTION,
        cfg.duration_s,
        seed,
        None,
    )
    .unwrap()
}

#[test]
fn no_gap_twin_is_nearly_indistinguishable() {
    let cfg = Stage1Config::default();
    let engine = Engine::default();
    let twin = RealTwin::new(engine.clone(), SimulationParams::ORIGINAL, 0.0).unwrap();
    let r = reference(&twin, &cfg, 3);
    let kl = discrepancy_at(&engine, &r, &SimulationParams::ORIGINAL, &cfg, 4).unwrap();
    assert!(kl < 0.1, "kl {kl}");
}

#[test]
fn default_twin_has_a_positive_baseline_gap() {
    let cfg = Stage1Config::default();
    let engine = Engine::default();
    let gap_free = RealTwin::new(engine.clone(), SimulationParams::ORIGINAL, 0.0).unwrap();
    let d_none = discrepancy_at(
        &engine,
        &reference(&gap_free, &cfg, 3),
        &SimulationParams::ORIGINAL,
        &cfg,
        4,
    )
    .unwrap();
    let twin = RealTwin::default_twin();
    let r = reference(&twin, &cfg, 3);
    let d0 = discrepancy_at(&engine, &r, &SimulationParams::ORIGINAL, &cfg, 4).unwrap();
    assert!(d0 > 0.0);
    assert!(d0 > 5.0 * d_none, "d0 {d0}, no-gap {d_none}");
    // The hidden parameters explain most of the gap.
    let d_true = discrepancy_at(&engine, &r, &twin.reveal(), &cfg, 4).unwrap();
    assert!(d_true < d0, "at x* {d_true}, at x_hat {d0}");
}
