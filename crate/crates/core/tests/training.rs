use prunelab_core::autodiff::ComputeGraph;
use prunelab_core::data::{generate_transfer_pair, Dataset, TaskConfig, TransferPair};
use prunelab_core::masking::{keep_count, Mask};
use prunelab_core::model::{Architecture, MlpConfig, Model, TransformerConfig};
use prunelab_core::optim::OptimizerKind;
use prunelab_core::oracles::trace::AccumulatorReplay;
use prunelab_core::pruners::{Locality, PrunerConfig, PrunerKind};
use prunelab_core::schedule::SparsitySchedule;
use prunelab_core::train::{
    evaluate, fineprune, pretrain, training_loss, DistillationConfig, FinepruneSetup, OptimizerConfig,
    StepObserver, StepView,
};
use prunelab_core::{Error, Result, Tensor2D};

fn small_arch() -> Architecture {
    Architecture::Mlp(MlpConfig {
        input_dim: 32,
        hidden_width: 24,
        hidden_layers: 3,
        classes: 8,
    })
}

fn tasks() -> TransferPair {
    generate_transfer_pair(&TaskConfig {
        train_size: 512,
        eval_size: 128,
        ..TaskConfig::default()
    })
    .unwrap()
}

fn movement_setup(steps: usize, final_sparsity: f64) -> FinepruneSetup {
    FinepruneSetup {
        pruner: PrunerConfig::new(PrunerKind::Movement),
        schedule: Some(SparsitySchedule::with_default_phases(0.0, final_sparsity, steps).unwrap()),
        optimizer: OptimizerConfig {
            steps,
            weight_lr: 0.05,
            score_lr: 0.05,
            seed: 3,
            ..OptimizerConfig::default()
        },
        distillation: None,
        log_every: 10,
    }
}

/// Records per-step facts about masks, weights and scores.
#[derive(Default)]
struct MaskLog {
    masked_weight_moved: usize,
    masked_scores_changed: usize,
    recoveries: usize,
    ever_masked: Vec<Vec<bool>>,
    kept_after: Vec<Vec<usize>>,
}

impl StepObserver for MaskLog {
    fn observe(&mut self, view: &StepView<'_>) -> Result<()> {
        if self.ever_masked.is_empty() {
            self.ever_masked = view.before.iter().map(|l| vec![false; l.len()]).collect();
        }
        let mut kept = Vec::new();
        for (li, (b, a)) in view.before.iter().zip(view.after).enumerate() {
            for k in 0..b.len() {
                let masked = b.mask.tensor().as_slice()[k] == 0.0;
                if masked {
                    self.ever_masked[li][k] = true;
                    if a.weight.as_slice()[k] != b.weight.as_slice()[k] {
                        self.masked_weight_moved += 1;
                    }
                    if a.scores.as_slice()[k] != b.scores.as_slice()[k] {
                        self.masked_scores_changed += 1;
                    }
                }
                if self.ever_masked[li][k] && a.mask.tensor().as_slice()[k] == 1.0 {
                    self.recoveries += 1;
                }
            }
            kept.push(a.mask.kept());
        }
        self.kept_after.push(kept);
        Ok(())
    }
}

#[test]
fn movement_run_invariants() {
    let t = tasks();
    let steps = 120;
    let setup = movement_setup(steps, 0.9);
    let mut log = MaskLog::default();
    let model = Model::new(small_arch(), 1).unwrap();
    let out = fineprune(model, &t.target_train, &t.target_eval, &setup, Some(&mut log)).unwrap();

    assert_eq!(log.masked_weight_moved, 0, "masked weights must not move under plain SGD");
    assert!(log.masked_scores_changed > 0, "masked scores must keep training");
    assert!(log.recoveries > 0, "expected at least one previously masked weight to return");

    let schedule = setup.schedule.unwrap();
    for (step, kept) in log.kept_after.iter().enumerate() {
        let keep = schedule.kept_at(step + 1).unwrap();
        for (layer, &k) in out.checkpoint.model.layers.iter().zip(kept) {
            assert_eq!(k, keep_count(keep, layer.len()), "step {step}");
        }
    }
    let final_row = out.metrics.last().unwrap();
    let total = out.checkpoint.model.prunable_count();
    let expected: usize = out
        .checkpoint
        .model
        .layers
        .iter()
        .map(|l| keep_count(0.1, l.len()))
        .sum();
    assert_eq!(final_row.layer_kept.iter().sum::<usize>(), expected);
    assert!((final_row.kept_fraction - 0.1).abs() <= out.checkpoint.model.layers.len() as f64 / total as f64);
    let steps_logged: Vec<usize> = out.metrics.iter().map(|r| r.step).collect();
    assert!(steps_logged.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn runs_are_seed_deterministic() {
    let t = tasks();
    let setup = movement_setup(40, 0.5);
    let model = Model::new(small_arch(), 2).unwrap();
    let a = fineprune(model.clone(), &t.target_train, &t.target_eval, &setup, None).unwrap();
    let b = fineprune(model, &t.target_train, &t.target_eval, &setup, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.checkpoint.model, b.checkpoint.model);
}

#[test]
fn zero_distillation_weight_is_bit_identical() {
    let t = tasks();
    let teacher = Model::new(small_arch(), 9).unwrap();
    let plain = movement_setup(30, 0.5);
    let mut distilled = plain.clone();
    distilled.distillation = Some(DistillationConfig {
        lambda_kd: 0.0,
        temperature: 2.0,
        teacher,
    });
    let model = Model::new(small_arch(), 2).unwrap();
    let a = fineprune(model.clone(), &t.target_train, &t.target_eval, &plain, None).unwrap();
    let b = fineprune(model, &t.target_train, &t.target_eval, &distilled, None).unwrap();
    assert_eq!(a.metrics.len(), b.metrics.len());
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.eval_accuracy.to_bits(), y.eval_accuracy.to_bits());
    }
    assert_eq!(a.checkpoint.model, b.checkpoint.model);
}

#[test]
fn distillation_endpoints() {
    let t = tasks();
    let model = Model::new(small_arch(), 4).unwrap();
    let (x, y) = t.target_train.select(&[0, 1, 2, 3]);
    let kd = DistillationConfig {
        lambda_kd: 1.0,
        temperature: 2.0,
        teacher: model.clone(),
    };
    let teacher_logits = model.logits(&x, prunelab_core::pruners::Mode::Eval).unwrap();
    let mut g = ComputeGraph::new();
    let loss = training_loss(&mut g, &model, &x, &y, None, 0, Some((&kd, &teacher_logits))).unwrap();
    assert!(g.value(loss).item().abs() < 1e-12);

    let mut g = ComputeGraph::new();
    let with_zero = DistillationConfig { lambda_kd: 0.0, ..kd.clone() };
    let loss = training_loss(&mut g, &model, &x, &y, None, 0, Some((&with_zero, &teacher_logits))).unwrap();
    let mut g2 = ComputeGraph::new();
    let plain = training_loss(&mut g2, &model, &x, &y, None, 0, None).unwrap();
    assert_eq!(g.value(loss).item(), g2.value(plain).item());

    let mut setup = movement_setup(30, 0.5);
    setup.distillation = Some(DistillationConfig { lambda_kd: 0.5, ..kd });
    let out = fineprune(model, &t.target_train, &t.target_eval, &setup, None).unwrap();
    assert!(out.metrics.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn soft_movement_ignores_schedule() {
    let t = tasks();
    let mut setup = movement_setup(20, 0.9);
    setup.pruner = PrunerConfig::new(PrunerKind::SoftMovement);
    let model = Model::new(small_arch(), 1).unwrap();
    let out = fineprune(model, &t.target_train, &t.target_eval, &setup, None).unwrap();
    assert!(out.checkpoint.schedule.is_none());
}

#[test]
fn single_replay_step_is_exact() {
    let t = tasks();
    let setup = movement_setup(1, 0.0);
    let mut replay = AccumulatorReplay::new(setup.optimizer.kind, setup.optimizer.score_lr).unwrap();
    let model = Model::new(Architecture::Mlp(MlpConfig::default()), 0).unwrap();
    let out = fineprune(model, &t.target_train, &t.target_eval, &setup, Some(&mut replay)).unwrap();
    assert_eq!(replay.max_deviation(&out.checkpoint.model.layers).unwrap(), 0.0);
    assert!(matches!(
        AccumulatorReplay::new(OptimizerKind::Sgd { momentum: 0.9 }, 0.1),
        Err(Error::Contract(_))
    ));
}

#[test]
fn transformer_embeddings_stay_frozen() {
    let arch = Architecture::MiniTransformer(TransformerConfig::default());
    let t = tasks();
    let model = Model::new(arch, 0).unwrap();
    let out = fineprune(model.clone(), &t.target_train, &t.target_eval, &movement_setup(10, 0.5), None).unwrap();
    for name in ["embed.token", "embed.position"] {
        assert_eq!(
            out.checkpoint.model.dense_param(name).unwrap().value,
            model.dense_param(name).unwrap().value
        );
    }
}

#[test]
fn global_selection_counts_are_exact() {
    let t = tasks();
    let mut setup = movement_setup(30, 0.9);
    setup.pruner = PrunerConfig::new(PrunerKind::Movement).with_locality(Locality::Global);
    let model = Model::new(Architecture::Mlp(MlpConfig::default()), 5).unwrap();
    let out = fineprune(model, &t.target_train, &t.target_eval, &setup, None).unwrap();
    let report = out.checkpoint.model.remaining_weights_report();
    let kept: usize = report.iter().map(|r| r.kept).sum();
    let total: usize = report.iter().map(|r| r.total).sum();
    assert_eq!(total, out.checkpoint.model.prunable_count());
    assert_eq!(kept, keep_count(0.1, total));
    let fractions: Vec<f64> = report.iter().map(|r| r.kept_fraction()).collect();
    assert!(fractions.iter().any(|&f| (f - fractions[0]).abs() > 1e-9));
}

#[test]
fn uninformative_model_scores_near_chance() {
    let t = generate_transfer_pair(&TaskConfig {
        eval_size: 4000,
        train_size: 16,
        ..TaskConfig::default()
    })
    .unwrap();
    let mut model = Model::new(small_arch(), 0).unwrap();
    for l in &mut model.layers {
        let (r, c) = l.shape();
        l.mask = Mask::zeros(r, c);
    }
    // Every logit equals the (zero) head bias, so the prediction is a
    // constant class.
    let acc = evaluate(&model, &t.target_eval).unwrap().accuracy;
    let n = t.target_eval.len() as f64;
    let sigma = (0.125 * 0.875 / n).sqrt();
    assert!((acc - 0.125).abs() < 3.0 * sigma, "{acc}");
}

#[test]
fn single_example_is_memorized() {
    let t = tasks();
    let (x, y) = t.source_train.select(&[7]);
    let one = Dataset::new(x, y, 8).unwrap();
    let cfg = OptimizerConfig {
        steps: 50,
        batch_size: 1,
        ..OptimizerConfig::default()
    };
    let out = pretrain(Model::new(small_arch(), 0).unwrap(), &one, &one, &cfg).unwrap();
    assert_eq!(evaluate(&out.checkpoint.model, &one).unwrap().accuracy, 1.0);
}

#[test]
fn pretraining_fits_separable_data() {
    let t = generate_transfer_pair(&TaskConfig {
        noise_std: 0.2,
        train_size: 1024,
        eval_size: 64,
        ..TaskConfig::default()
    })
    .unwrap();
    let cfg = OptimizerConfig {
        steps: 2000,
        ..OptimizerConfig::default()
    };
    let out = pretrain(Model::new(small_arch(), 0).unwrap(), &t.source_train, &t.source_eval, &cfg).unwrap();
    assert!(evaluate(&out.checkpoint.model, &t.source_train).unwrap().accuracy > 0.95);
}

#[test]
fn pretraining_lowers_loss_on_most_seeds() {
    let t = tasks();
    let mut lowered = 0;
    for seed in 0..20 {
        let model = Model::new(small_arch(), seed).unwrap();
        let before = evaluate(&model, &t.source_train).unwrap().loss;
        let cfg = OptimizerConfig {
            steps: 100,
            seed,
            ..OptimizerConfig::default()
        };
        let out = pretrain(model, &t.source_train, &t.source_eval, &cfg).unwrap();
        let after = evaluate(&out.checkpoint.model, &t.source_train).unwrap().loss;
        lowered += usize::from(after < before);
    }
    assert!(lowered >= 19, "{lowered}/20");
}

#[test]
fn pretrain_metrics_follow_cadence() {
    let t = tasks();
    let cfg = OptimizerConfig {
        steps: 100,
        ..OptimizerConfig::default()
    };
    let out = pretrain(Model::new(small_arch(), 0).unwrap(), &t.source_train, &t.source_eval, &cfg).unwrap();
    assert_eq!(out.metrics.len(), 10);
    assert!(out.checkpoint.pruner.is_none());
    let x = Tensor2D::zeros(1, 32);
    assert!(out.checkpoint.model.logits(&x, prunelab_core::pruners::Mode::Eval).is_ok());
}
