use prunelab_core::masking::{expected_l0, HardConcreteParams};
use prunelab_core::oracles::l0::monte_carlo_l0;
use prunelab_core::oracles::suite::{
    l0_monte_carlo_z, schedule_violations, test_mask_error, topv_mismatches, traced_movement_run,
    REPLAY_TOLERANCE,
};
use prunelab_core::oracles::swap::{
    find_loss_increase, negative_threshold_config, swap_loss_harness, swap_sweep, HarnessStatus,
    SwapHarnessConfig, SwapMasking,
};
use prunelab_core::Tensor2D;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn corrupted_score_gradient_is_caught() {
    let clean = traced_movement_run(50, false, 0).unwrap();
    assert!(clean.replay_deviation < REPLAY_TOLERANCE);
    assert!(clean.compared_entries > 0);
    assert!(clean.sign.holds() && clean.sign.checked > 0);

    let corrupt = traced_movement_run(50, true, 0).unwrap();
    assert!(corrupt.replay_deviation > REPLAY_TOLERANCE);
    assert!(!corrupt.sign.holds());
}

#[test]
fn open_gate_probability_at_zero_score() {
    let p = HardConcreteParams::default();
    let s = Tensor2D::scalar(0.0);
    let closed = expected_l0(&s, &p);
    assert!((closed - 0.831_822_183_991_690_5).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let est = monte_carlo_l0(&s, &p, 100_000, &mut rng).unwrap();
    assert!(est.z_score(closed) < 3.0, "{est:?}");
}

#[test]
fn monte_carlo_agrees_on_random_matrices() {
    assert!(l0_monte_carlo_z(10, 100_000, 2).unwrap() < 3.0);
}

#[test]
fn deterministic_gate_formula() {
    assert!(test_mask_error(9) < 1e-12);
}

#[test]
fn random_schedules_are_well_behaved() {
    assert_eq!(schedule_violations(100, 8).unwrap(), 0);
}

#[test]
fn topv_matches_sort_with_ties() {
    assert_eq!(topv_mismatches(1000, 200, 13).unwrap(), (0, 0));
}

#[test]
fn top1_swaps_lower_the_loss() {
    let sweep = swap_sweep(&SwapHarnessConfig::top1(), 100, 2000).unwrap();
    assert_eq!(sweep.seeds_with_swaps, 100);
    assert_eq!(sweep.decreasing, sweep.events);
}

#[test]
fn frozen_weight_swaps_lower_the_loss() {
    let cfg = SwapHarnessConfig {
        weight_lr: 0.0,
        ..SwapHarnessConfig::top1()
    };
    let sweep = swap_sweep(&cfg, 100, 2000).unwrap();
    assert_eq!(sweep.seeds_with_swaps, 100);
    assert_eq!(sweep.pass_rate(), 1.0);
}

#[test]
fn threshold_and_paired_swaps_lower_the_loss() {
    let threshold = SwapHarnessConfig {
        inputs: 4,
        masking: SwapMasking::Threshold(0.0),
        score_spread: 0.05,
        ..SwapHarnessConfig::top1()
    };
    let pairs = SwapHarnessConfig {
        inputs: 4,
        masking: SwapMasking::TopK(2),
        ..SwapHarnessConfig::top1()
    };
    for cfg in [threshold, pairs.clone()] {
        let sweep = swap_sweep(&cfg, 100, 2000).unwrap();
        assert_eq!(sweep.seeds_with_swaps, 100, "{cfg:?}");
        assert_eq!(sweep.pass_rate(), 1.0, "{cfg:?}");
    }
    let paired = (0..200)
        .flat_map(|seed| swap_loss_harness(&pairs, seed).unwrap().events)
        .any(|e| e.outgoing.len() == 2 && e.incoming.len() == 2);
    assert!(paired, "expected at least one double swap");
}

#[test]
fn negative_threshold_can_raise_the_loss() {
    let (seed, event) = find_loss_increase(&negative_threshold_config(), 1000).unwrap().unwrap();
    assert!(event.loss_after > event.loss_before);
    let rerun = swap_loss_harness(&negative_threshold_config(), seed).unwrap();
    assert_eq!(rerun.status, HarnessStatus::Fail);
}
