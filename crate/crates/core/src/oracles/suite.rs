//! The full oracle suite behind `prunelab verify`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_transfer_pair, TaskConfig};
use crate::error::{Error, Result};
use crate::masking::{expected_l0, hard_concrete_test_mask, topv_global, topv_local, uniform_noise, HardConcreteParams};
use crate::model::{Architecture, MlpConfig, Model, TransformerConfig};
use crate::optim::OptimizerKind;
use crate::pruners::{compute_masks, PrunerConfig, PrunerKind, Mode};
use crate::schedule::SparsitySchedule;
use crate::tensor::Tensor2D;
use crate::train::{fineprune, FinepruneSetup, OptimizerConfig, StepObserver};

use super::gradient::{check_model_gradients, finite_difference_check};
use super::l0::monte_carlo_l0;
use super::swap::{find_loss_increase, negative_threshold_config, swap_sweep, SwapHarnessConfig, SwapMasking};
use super::topv::{brute_force_topv, brute_force_topv_global};
use super::trace::{AccumulatorReplay, ObserverSet, SignProperty};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleStatus {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for OracleStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OracleStatus::Pass => "PASS",
            OracleStatus::Fail => "FAIL",
            OracleStatus::Inconclusive => "INCONCLUSIVE",
        })
    }
}

/// One line of the verification report. `metric` is compared against
/// `threshold` in the direction the oracle documents.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub oracle: String,
    pub status: OracleStatus,
    pub metric: f64,
    pub threshold: f64,
}

fn at_most(oracle: &str, metric: f64, threshold: f64) -> OracleRow {
    OracleRow {
        oracle: oracle.into(),
        status: if metric <= threshold { OracleStatus::Pass } else { OracleStatus::Fail },
        metric,
        threshold,
    }
}

fn at_least(oracle: &str, metric: f64, threshold: f64) -> OracleRow {
    OracleRow {
        oracle: oracle.into(),
        status: if metric >= threshold { OracleStatus::Pass } else { OracleStatus::Fail },
        metric,
        threshold,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyOptions {
    /// Negates the score gradient in the training-trace oracles, which must
    /// then fail.
    pub corrupt_score_gradient: bool,
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;
/// Small enough that the regularizer does not swamp the loss, whose round-off
/// would otherwise dominate the central differences.
pub const FD_LAMBDA: f64 = 1e-3;
pub const GRADIENT_SEEDS: u64 = 20;
pub const REPLAY_TOLERANCE: f64 = 1e-10;

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize, classes: usize) -> (Tensor2D, Vec<usize>) {
    let x = Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0));
    let y = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

/// Worst relative gradient error over seeded random models. `kind` picks the
/// masks: magnitude Top-v at 50% kept, or hard-concrete gates with frozen
/// noise and random scores in [−2, 2].
pub fn network_gradient_error(arch: Architecture, kind: PrunerKind, seeds: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut model = Model::new(arch, seed)?;
        for p in model.dense.iter_mut().filter(|p| p.trainable) {
            for v in p.value.as_mut_slice() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let mut cfg = PrunerConfig::new(kind);
        cfg.lambda_l0 = FD_LAMBDA;
        if kind == PrunerKind::L0 {
            model.gates = cfg.gates();
            for l in &mut model.layers {
                let (r, c) = l.shape();
                l.scores = Tensor2D::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0));
                l.noise = Some(uniform_noise(r, c, &mut rng));
            }
        } else {
            let masks = compute_masks(&model.layers, &cfg, Some(0.5), Mode::Train)?;
            for (l, m) in model.layers.iter_mut().zip(masks) {
                l.mask = m;
            }
        }
        let (x, y) = random_batch(&mut rng, 4, arch.input_dim(), arch.classes());
        let regularizer = (kind == PrunerKind::L0).then_some(&cfg);
        let check = check_model_gradients(&model, &x, &y, regularizer, 3, FD_STEP, &mut rng)?;
        worst = worst.max(check.max_rel_error);
    }
    Ok(worst)
}

/// Mismatches between the Top-v implementation and the sort oracle on random
/// matrices with frequent ties.
pub fn topv_mismatches(local_cases: usize, global_cases: usize, seed: u64) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let random_matrix = |rng: &mut ChaCha8Rng| {
        let rows = rng.random_range(1..=5);
        let cols = rng.random_range(1..=5);
        let coarse = rng.random_bool(0.5);
        Tensor2D::from_fn(rows, cols, |_, _| {
            if coarse {
                rng.random_range(0..4) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
    };
    let mut local = 0;
    for _ in 0..local_cases {
        let s = random_matrix(&mut rng);
        for &v in &grid {
            if topv_local(&s, v)? != brute_force_topv(&s, v) {
                local += 1;
            }
        }
    }
    let mut global = 0;
    for _ in 0..global_cases {
        let count = rng.random_range(1..=4);
        let mats: Vec<Tensor2D> = (0..count).map(|_| random_matrix(&mut rng)).collect();
        let refs: Vec<&Tensor2D> = mats.iter().collect();
        for &v in &grid {
            if topv_global(&refs, v)? != brute_force_topv_global(&refs, v) {
                global += 1;
            }
        }
    }
    Ok((local, global))
}

/// Largest Monte-Carlo z-score of the open-gate count against the closed
/// form, over random 3×3 score matrices.
pub fn l0_monte_carlo_z(matrices: usize, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = HardConcreteParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..matrices {
        let s = Tensor2D::from_fn(3, 3, |_, _| rng.random_range(-3.0..3.0));
        let est = monte_carlo_l0(&s, &p, samples, &mut rng)?;
        worst = worst.max(est.z_score(expected_l0(&s, &p)));
    }
    Ok(worst)
}

/// Largest gap between the deterministic gate and `clamp((r−l)σ(S)+l, 0, 1)`
/// evaluated directly.
pub fn test_mask_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = HardConcreteParams::default();
    let s = Tensor2D::from_fn(8, 8, |_, _| rng.random_range(-6.0..6.0));
    let m = hard_concrete_test_mask(&s, &p);
    s.as_slice()
        .iter()
        .zip(m.tensor().as_slice())
        .map(|(&v, &got)| {
            let sig = 1.0 / (1.0 + (-v).exp());
            let want = ((p.upper - p.lower) * sig + p.lower).clamp(0.0, 1.0);
            (got - want).abs()
        })
        .fold(0.0, f64::max)
}

/// Schedule violations over random schedules: endpoint values, monotonicity
/// at every integer step, and agreement with the cubic base formula when
/// there is no cool-down.
pub fn schedule_violations(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let total = rng.random_range(1..400);
        let warmup = rng.random_range(0..=total / 2);
        let cooldown = rng.random_range(0..=total - warmup);
        let (vi, vf) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let s = SparsitySchedule::new(vi, vf, warmup, cooldown, total)?;
        if s.sparsity_at(warmup)? != vi && warmup < total - cooldown {
            bad += 1;
        }
        if s.sparsity_at(total - cooldown)? != vf {
            bad += 1;
        }
        let mut prev = s.sparsity_at(0)?;
        for t in 1..=total {
            let v = s.sparsity_at(t)?;
            let ok = if vf >= vi { v >= prev } else { v <= prev };
            if !ok {
                bad += 1;
            }
            prev = v;
        }
        let base = SparsitySchedule::new(vi, vf, warmup, 0, total)?;
        let span = (total - warmup) as f64;
        for t in warmup..total {
            let direct = vf + (vi - vf) * (1.0 - (t - warmup) as f64 / span).powi(3);
            if (base.sparsity_at(t)? - direct).abs() > 1e-15 {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

/// Outcome of a short movement-pruning run traced by the score oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceCheck {
    pub replay_deviation: f64,
    pub compared_entries: usize,
    pub sign: SignProperty,
}

/// Movement pruning of the default MLP with plain SGD, traced from the
/// first step.
pub fn traced_movement_run(steps: usize, corrupt: bool, seed: u64) -> Result<TraceCheck> {
    let tasks = generate_transfer_pair(&TaskConfig {
        train_size: 512,
        eval_size: 64,
        seed,
        ..TaskConfig::default()
    })?;
    let model = Model::new(Architecture::Mlp(MlpConfig::default()), seed)?;
    let mut pruner = PrunerConfig::new(PrunerKind::Movement);
    pruner.flip_score_gradient = corrupt;
    let optimizer = OptimizerConfig {
        steps,
        seed,
        weight_lr: 0.05,
        score_lr: 0.05,
        ..OptimizerConfig::default()
    };
    let setup = FinepruneSetup {
        pruner,
        schedule: Some(SparsitySchedule::with_default_phases(0.0, 0.5, steps)?),
        optimizer: optimizer.clone(),
        distillation: None,
        log_every: steps.max(1),
    };
    let mut replay = AccumulatorReplay::new(optimizer.kind, optimizer.score_lr)?;
    let mut sign = SignProperty::default();
    let out = {
        let mut both = ObserverSet(vec![&mut replay as &mut dyn StepObserver, &mut sign]);
        fineprune(model, &tasks.target_train, &tasks.target_eval, &setup, Some(&mut both))?
    };
    Ok(TraceCheck {
        replay_deviation: replay.max_deviation(&out.checkpoint.model.layers)?,
        compared_entries: replay.compared_entries(),
        sign,
    })
}

fn swap_row(name: &str, cfg: &SwapHarnessConfig) -> Result<OracleRow> {
    let sweep = swap_sweep(cfg, 100, 2000)?;
    if sweep.seeds_with_swaps < 100 {
        return Ok(OracleRow {
            oracle: name.into(),
            status: OracleStatus::Inconclusive,
            metric: sweep.seeds_with_swaps as f64,
            threshold: 100.0,
        });
    }
    Ok(at_least(name, sweep.pass_rate(), 1.0))
}

pub fn run_verification(options: &VerifyOptions) -> Result<Vec<OracleRow>> {
    let mut rows = Vec::new();

    let point = Tensor2D::ones(3, 3);
    let quad = finite_difference_check(
        |t| Ok(t.as_slice().iter().map(|v| v * v).sum()),
        &point,
        &point.scale(2.0),
        FD_STEP,
    )?;
    rows.push(at_most("fd_quadratic", quad, 1e-9));

    let mlp = Architecture::Mlp(MlpConfig::default());
    let transformer = Architecture::MiniTransformer(TransformerConfig::default());
    rows.push(at_most(
        "fd_mlp_masked",
        network_gradient_error(mlp, PrunerKind::Magnitude, GRADIENT_SEEDS)?,
        FD_TOLERANCE,
    ));
    rows.push(at_most(
        "fd_mlp_hard_concrete",
        network_gradient_error(mlp, PrunerKind::L0, GRADIENT_SEEDS)?,
        FD_TOLERANCE,
    ));
    rows.push(at_most(
        "fd_transformer_masked",
        network_gradient_error(transformer, PrunerKind::Magnitude, GRADIENT_SEEDS)?,
        FD_TOLERANCE,
    ));
    rows.push(at_most(
        "fd_transformer_hard_concrete",
        network_gradient_error(transformer, PrunerKind::L0, GRADIENT_SEEDS)?,
        FD_TOLERANCE,
    ));

    let (local, global) = topv_mismatches(1000, 200, 7)?;
    rows.push(at_most("topv_local_vs_sort", local as f64, 0.0));
    rows.push(at_most("topv_global_vs_sort", global as f64, 0.0));

    rows.push(at_most("schedule_properties", schedule_violations(100, 3)? as f64, 0.0));
    rows.push(at_most("l0_monte_carlo_z", l0_monte_carlo_z(10, 100_000, 11)?, 3.0));
    rows.push(at_most("l0_test_mask_formula", test_mask_error(5), 1e-12));

    let top1 = SwapHarnessConfig::top1();
    rows.push(swap_row("swap_top1", &top1)?);
    rows.push(swap_row(
        "swap_top1_frozen_weights",
        &SwapHarnessConfig {
            weight_lr: 0.0,
            ..top1.clone()
        },
    )?);
    rows.push(swap_row(
        "swap_threshold",
        &SwapHarnessConfig {
            inputs: 4,
            masking: SwapMasking::Threshold(0.0),
            score_spread: 0.05,
            ..top1.clone()
        },
    )?);
    rows.push(swap_row(
        "swap_top2_of_4",
        &SwapHarnessConfig {
            inputs: 4,
            masking: SwapMasking::TopK(2),
            ..top1.clone()
        },
    )?);
    let counterexample = find_loss_increase(&negative_threshold_config(), 1000)?;
    rows.push(OracleRow {
        oracle: "negative_threshold_counterexample".into(),
        status: if counterexample.is_some() { OracleStatus::Pass } else { OracleStatus::Fail },
        metric: counterexample.map_or(0.0, |(_, e)| e.loss_after - e.loss_before),
        threshold: 0.0,
    });

    let corrupt = options.corrupt_score_gradient;
    let replay = traced_movement_run(50, corrupt, 0)?;
    rows.push(at_most("accumulator_replay", replay.replay_deviation, REPLAY_TOLERANCE));
    let signs = traced_movement_run(200, corrupt, 1)?;
    rows.push(at_least("sign_property", signs.sign.agreement(), 1.0));

    let contract = AccumulatorReplay::new(OptimizerKind::Sgd { momentum: 0.9 }, 0.1);
    rows.push(OracleRow {
        oracle: "replay_rejects_momentum".into(),
        status: if matches!(contract, Err(Error::Contract(_))) {
            OracleStatus::Pass
        } else {
            OracleStatus::Fail
        },
        metric: f64::from(u8::from(contract.is_err())),
        threshold: 1.0,
    });
    Ok(rows)
}
