//! Dense pretraining and joint fine-tuning with pruning.

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ComputeGraph, GradientStore, NodeId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model};
use crate::optim::{Optimizer, OptimizerKind};
use crate::pruners::{self, MaskedLayer, Mode, PrunerConfig, PrunerKind};
use crate::schedule::SparsitySchedule;
use crate::tensor::Tensor2D;

/// Metrics are logged every this many steps, and at the last step.
pub const LOG_EVERY: usize = 10;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub weight_lr: f64,
    pub score_lr: f64,
    pub kind: OptimizerKind,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            weight_lr: 0.05,
            score_lr: 0.05,
            kind: OptimizerKind::plain_sgd(),
            batch_size: 32,
            steps: 1000,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("weight_lr", self.weight_lr), ("score_lr", self.score_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::config(format!("momentum {momentum} outside [0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

/// Knowledge distillation from a dense teacher.
#[derive(Debug, Clone)]
pub struct DistillationConfig {
    /// Weight of the distillation term; the task loss gets `1 − lambda_kd`.
    pub lambda_kd: f64,
    pub temperature: f64,
    pub teacher: Model,
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_kd) {
            return Err(Error::config(format!("lambda_kd {} outside [0, 1]", self.lambda_kd)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config(format!(
                "distillation temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub kept_fraction: f64,
    /// Mean total loss over the steps since the previous row.
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub regularizer: f64,
    pub layer_kept: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    /// Pruned fraction handed to the masks for the next step.
    pub sparsity: f64,
    pub running_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// What one training step saw, handed to an observer after the step.
pub struct StepView<'a> {
    pub step: usize,
    /// Layers as they were used in the forward pass.
    pub before: &'a [MaskedLayer],
    pub grads: &'a GradientStore,
    /// Layers after the weight update and the pruner step.
    pub after: &'a [MaskedLayer],
    pub loss: f64,
}

pub trait StepObserver {
    fn observe(&mut self, view: &StepView<'_>) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub state: TrainState,
}

/// Settings for a fine-pruning run.
#[derive(Debug, Clone)]
pub struct FinepruneSetup {
    pub pruner: PrunerConfig,
    /// Required for magnitude and movement pruning; ignored by the
    /// λ-driven variants.
    pub schedule: Option<SparsitySchedule>,
    pub optimizer: OptimizerConfig,
    pub distillation: Option<DistillationConfig>,
    /// Metrics cadence in steps; the final step is always logged.
    pub log_every: usize,
}

/// Accuracy and mean cross-entropy in evaluation mode.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, y) = data.select(chunk);
        let mut graph = ComputeGraph::new();
        let pass = model.forward(&mut graph, &x, Mode::Eval)?;
        let ce = graph.softmax_cross_entropy(pass.logits, &y)?;
        loss += graph.value(ce).item() * chunk.len() as f64;
        let logits = graph.value(pass.logits);
        for (r, &label) in y.iter().enumerate() {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
    })
}

/// Builds the training objective for one batch:
/// `(1 − λ_kd)·CE + λ_kd·KD + R(S)`, or plain `CE + R(S)` without a teacher.
pub fn training_loss(
    graph: &mut ComputeGraph,
    model: &Model,
    x: &Tensor2D,
    labels: &[usize],
    regularizer: Option<&PrunerConfig>,
    step: usize,
    distill: Option<(&DistillationConfig, &Tensor2D)>,
) -> Result<NodeId> {
    let pass = model.forward(graph, x, Mode::Train)?;
    let ce = graph.softmax_cross_entropy(pass.logits, labels)?;
    let mut loss = ce;
    if let Some((d, teacher)) = distill {
        let kd = graph.kd_divergence(teacher, pass.logits, d.temperature)?;
        let task = graph.scale(ce, 1.0 - d.lambda_kd);
        let kd = graph.scale(kd, d.lambda_kd);
        loss = graph.add(task, kd)?;
    }
    if let Some(cfg) = regularizer {
        if let Some(r) = pruners::regularization_term(graph, &pass.score_nodes, cfg, step)? {
            loss = graph.add(loss, r)?;
        }
    }
    Ok(loss)
}

/// Trains every parameter of a dense model on `train`.
pub fn pretrain(mut model: Model, train: &Dataset, eval: &Dataset, optimizer: &OptimizerConfig) -> Result<RunOutput> {
    model.reset_masks();
    model.gates = None;
    let setup = FinepruneSetup {
        pruner: PrunerConfig::new(PrunerKind::Movement),
        schedule: Some(SparsitySchedule::dense(optimizer.steps)),
        optimizer: optimizer.clone(),
        distillation: None,
        log_every: LOG_EVERY,
    };
    let mut out = Trainer::new(model, &setup, true)?.run(train, eval, None)?;
    out.checkpoint.pruner = None;
    out.checkpoint.schedule = None;
    Ok(out)
}

/// Jointly trains and prunes `model` on `train`.
pub fn fineprune(
    model: Model,
    train: &Dataset,
    eval: &Dataset,
    setup: &FinepruneSetup,
    observer: Option<&mut dyn StepObserver>,
) -> Result<RunOutput> {
    Trainer::new(model, setup, false)?.run(train, eval, observer)
}

struct Trainer<'a> {
    model: Model,
    setup: &'a FinepruneSetup,
    schedule: Option<SparsitySchedule>,
    weight_opt: Optimizer,
    score_opt: Optimizer,
    dense_only: bool,
}

impl<'a> Trainer<'a> {
    fn new(mut model: Model, setup: &'a FinepruneSetup, dense_only: bool) -> Result<Self> {
        setup.optimizer.validate()?;
        setup.pruner.validate()?;
        if let Some(d) = &setup.distillation {
            d.validate()?;
            if d.teacher.architecture() != model.architecture() {
                return Err(Error::ShapeMismatch(
                    "teacher and student architectures differ".into(),
                ));
            }
        }
        let steps = setup.optimizer.steps;
        let kind = setup.pruner.kind;
        let schedule = if kind.uses_schedule() {
            let s = setup.schedule.ok_or_else(|| {
                Error::config(format!("{kind} pruning needs a sparsity schedule"))
            })?;
            s.validate()?;
            if s.total != steps {
                return Err(Error::config(format!(
                    "schedule covers {} steps but the run has {steps}",
                    s.total
                )));
            }
            Some(s)
        } else {
            if setup.schedule.is_some() {
                warn!("{kind} pruning is driven by its regularizer; the sparsity schedule is ignored");
            }
            None
        };
        model.gates = setup.pruner.gates();
        if !dense_only {
            pruners::init_scores(&mut model.layers, &setup.pruner);
        }
        Ok(Self {
            model,
            setup,
            schedule,
            weight_opt: Optimizer::new(setup.optimizer.kind),
            score_opt: Optimizer::new(setup.optimizer.kind),
            dense_only,
        })
    }

    fn keep_at(&self, t: usize) -> Result<Option<f64>> {
        self.schedule.as_ref().map(|s| s.kept_at(t)).transpose()
    }

    fn run(mut self, train: &Dataset, eval: &Dataset, mut observer: Option<&mut dyn StepObserver>) -> Result<RunOutput> {
        let opt = &self.setup.optimizer;
        let steps = opt.steps;
        let mut batch_rng = ChaCha8Rng::seed_from_u64(opt.seed);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x6e6f_6973_6521);
        let pruner = self.setup.pruner.clone();

        if !self.dense_only {
            let keep = self.keep_at(0)?;
            pruners::refresh_masks(&mut self.model.layers, &pruner, keep, &mut noise_rng)?;
        }

        let mut metrics = Vec::new();
        let mut window_loss = 0.0;
        let mut window_len = 0usize;
        let mut last_loss = f64::NAN;
        if steps == 0 {
            metrics.push(self.metrics_row(0, f64::NAN, eval)?);
        }
        for t in 0..steps {
            let (x, y) = train.sample_batch(opt.batch_size, &mut batch_rng);
            let teacher_logits = match &self.setup.distillation {
                Some(d) => Some(d.teacher.logits(&x, Mode::Eval)?),
                None => None,
            };
            let mut graph = ComputeGraph::new();
            let distill = match (&self.setup.distillation, &teacher_logits) {
                (Some(d), Some(teacher)) => Some((d, teacher)),
                _ => None,
            };
            let regularizer = (!self.dense_only).then_some(&pruner);
            let loss = training_loss(&mut graph, &self.model, &x, &y, regularizer, t, distill)?;
            let loss_value = graph.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Divergence { step: t, loss: loss_value });
            }
            let grads = graph.backward(loss)?;
            if !grads.all_finite() {
                return Err(Error::Divergence { step: t, loss: loss_value });
            }

            let before = observer.as_ref().map(|_| self.model.layers.clone());
            for layer in &mut self.model.layers {
                let g = grads.param(layer.weight_id).ok_or_else(|| {
                    Error::Contract(format!("no weight gradient for layer {}", layer.name))
                })?;
                self.weight_opt.step(layer.weight_id, &mut layer.weight, g, opt.weight_lr);
            }
            for p in self.model.dense.iter_mut().filter(|p| p.trainable) {
                if let Some(g) = grads.param(p.id) {
                    self.weight_opt.step(p.id, &mut p.value, g, opt.weight_lr);
                }
            }
            let diverged = self.model.layers.iter().any(|l| !l.weight.is_finite())
                || self.model.dense.iter().any(|p| !p.value.is_finite());
            if diverged {
                return Err(Error::Divergence { step: t, loss: loss_value });
            }
            if !self.dense_only {
                let keep = self.keep_at(t + 1)?;
                pruners::pruner_step(
                    &mut self.model.layers,
                    &grads,
                    &pruner,
                    &mut self.score_opt,
                    opt.score_lr,
                    keep,
                    &mut noise_rng,
                )?;
            }
            if let (Some(obs), Some(before)) = (observer.as_mut(), before.as_ref()) {
                obs.observe(&StepView {
                    step: t,
                    before,
                    grads: &grads,
                    after: &self.model.layers,
                    loss: loss_value,
                })?;
            }

            window_loss += loss_value;
            window_len += 1;
            last_loss = loss_value;
            let done = t + 1;
            if done % self.setup.log_every.max(1) == 0 || done == steps {
                let row = self.metrics_row(done, window_loss / window_len as f64, eval)?;
                debug!(
                    "step {done}: loss {:.5} kept {:.4} eval acc {:.4}",
                    row.train_loss, row.kept_fraction, row.eval_accuracy
                );
                metrics.push(row);
                window_loss = 0.0;
                window_len = 0;
            }
        }

        let state = TrainState {
            step: steps,
            sparsity: self.keep_at(steps)?.map_or(0.0, |k| 1.0 - k),
            running_loss: last_loss,
        };
        let checkpoint = Checkpoint {
            pruner: Some(pruner.kind),
            step: steps as u64,
            schedule: self.schedule,
            model: self.model,
        };
        Ok(RunOutput {
            checkpoint,
            metrics,
            state,
        })
    }

    fn metrics_row(&self, step: usize, train_loss: f64, eval: &Dataset) -> Result<MetricsRow> {
        let report = self.model.remaining_weights_report();
        let regularizer = if self.dense_only {
            0.0
        } else {
            pruners::regularization_value(&self.model.layers, &self.setup.pruner, step)
        };
        Ok(MetricsRow {
            step,
            kept_fraction: self.model.kept_fraction(),
            train_loss,
            eval_accuracy: evaluate(&self.model, eval)?.accuracy,
            regularizer,
            layer_kept: report.iter().map(|r| r.kept).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_transfer_pair, TaskConfig};
    use crate::model::{Architecture, MlpConfig};

    fn tiny_arch() -> Architecture {
        Architecture::Mlp(MlpConfig {
            input_dim: 32,
            hidden_width: 16,
            hidden_layers: 2,
            classes: 8,
        })
    }

    fn tiny_tasks() -> crate::data::TransferPair {
        generate_transfer_pair(&TaskConfig {
            train_size: 256,
            eval_size: 64,
            ..TaskConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let tasks = tiny_tasks();
        let model = Model::new(tiny_arch(), 1).unwrap();
        let cfg = OptimizerConfig {
            steps: 0,
            ..OptimizerConfig::default()
        };
        let out = pretrain(model.clone(), &tasks.source_train, &tasks.source_eval, &cfg).unwrap();
        assert_eq!(out.checkpoint.model, model);
        assert_eq!(out.metrics.len(), 1);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let tasks = tiny_tasks();
        let model = Model::new(tiny_arch(), 1).unwrap();
        let cfg = OptimizerConfig {
            weight_lr: 1e200,
            steps: 200,
            ..OptimizerConfig::default()
        };
        let err = pretrain(model, &tasks.source_train, &tasks.source_eval, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn evaluate_rejects_empty_and_is_deterministic() {
        let tasks = tiny_tasks();
        let model = Model::new(tiny_arch(), 1).unwrap();
        let a = evaluate(&model, &tasks.target_eval).unwrap();
        assert_eq!(a, evaluate(&model, &tasks.target_eval).unwrap());
        let empty = Dataset {
            features: Tensor2D::zeros(1, 32),
            labels: vec![],
            classes: 8,
        };
        assert!(evaluate(&model, &empty).is_err());
    }

    #[test]
    fn logging_cadence() {
        let tasks = tiny_tasks();
        let model = Model::new(tiny_arch(), 1).unwrap();
        let cfg = OptimizerConfig {
            steps: 25,
            ..OptimizerConfig::default()
        };
        let out = pretrain(model, &tasks.source_train, &tasks.source_eval, &cfg).unwrap();
        let steps: Vec<usize> = out.metrics.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![10, 20, 25]);
    }

    #[test]
    fn movement_requires_schedule() {
        let tasks = tiny_tasks();
        let setup = FinepruneSetup {
            pruner: PrunerConfig::new(PrunerKind::Movement),
            schedule: None,
            optimizer: OptimizerConfig::default(),
            distillation: None,
            log_every: LOG_EVERY,
        };
        let model = Model::new(tiny_arch(), 1).unwrap();
        assert!(matches!(
            fineprune(model, &tasks.target_train, &tasks.target_eval, &setup, None),
            Err(Error::Config(_))
        ));
    }
}
