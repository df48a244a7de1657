//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default (see [`KEYS`]); unknown or repeated keys are rejected.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use prunelab_core::data::TaskConfig;
use prunelab_core::masking::HardConcreteParams;
use prunelab_core::model::{Architecture, MlpConfig, TransformerConfig};
use prunelab_core::optim::OptimizerKind;
use prunelab_core::pruners::{Locality, PrunerConfig, PrunerKind};
use prunelab_core::schedule::SparsitySchedule;
use prunelab_core::train::OptimizerConfig;

use crate::error::{CliError, CliResult};

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "model initialization and batch order"),
    ("task_seed", "0", "synthetic task generation"),
    ("classes", "8", "number of classes"),
    ("dim", "32", "feature dimension"),
    ("train_size", "4096", "training examples per task"),
    ("eval_size", "1024", "evaluation examples per task"),
    ("mean_scale", "3.0", "scale of the class means"),
    ("rotation_mix", "0.15", "distance of the target rotation from the identity, in [0, 1]"),
    ("shift_scale", "0.5", "per-mean perturbation of the target task"),
    ("noise_std", "4.0", "within-class noise"),
    ("feature_scale", "0.25", "multiplier on every feature"),
    ("model", "mlp", "mlp or mini_transformer"),
    ("hidden_width", "64", "mlp hidden width"),
    ("hidden_layers", "6", "mlp hidden layers"),
    ("d_model", "32", "transformer width"),
    ("seq_len", "16", "transformer tokens per example"),
    ("blocks", "2", "transformer blocks"),
    ("pruner", "movement", "magnitude, movement, soft_movement or l0"),
    ("locality", "local", "local (per matrix) or global Top-v"),
    ("threshold", "0.0", "soft movement mask threshold"),
    ("lambda_mvp", "1.0", "soft movement regularization"),
    ("lambda_l0", "1.0", "L0 regularization"),
    ("lambda_warmup", "0", "steps of linear regularization warm-up (0 = constant)"),
    ("score_init", "auto", "initial scores (auto = 0.01 for soft movement, else 0)"),
    ("hc_beta", "0.6666666666666666", "hard-concrete temperature"),
    ("hc_lower", "-0.1", "hard-concrete lower stretch"),
    ("hc_upper", "1.1", "hard-concrete upper stretch"),
    ("initial_sparsity", "0.0", "pruned fraction at the start of the ramp"),
    ("final_sparsity", "0.9", "pruned fraction after the ramp"),
    ("warmup_steps", "auto", "steps before the ramp (auto = 5% of steps)"),
    ("cooldown_steps", "auto", "steps after the ramp (auto = 20% of steps)"),
    ("optimizer", "sgd", "sgd or adam"),
    ("momentum", "0.0", "sgd momentum"),
    ("weight_lr", "0.02", "fine-pruning weight learning rate"),
    ("score_lr", "0.05", "score learning rate"),
    ("batch_size", "32", "examples per step"),
    ("steps", "400", "fine-pruning steps"),
    ("pretrain_steps", "1500", "dense pretraining steps"),
    ("pretrain_lr", "0.05", "dense pretraining learning rate"),
    ("log_every", "10", "fine-pruning metrics cadence in steps"),
    ("distill", "false", "distill from a dense teacher"),
    ("lambda_kd", "0.5", "distillation weight in [0, 1]"),
    ("temperature", "2.0", "distillation temperature"),
    ("teacher", "", "teacher checkpoint (empty = fine-tune one densely)"),
    ("out_dir", "runs", "output directory"),
    ("task_dir", "", "task CSV directory (empty = <out_dir>/tasks)"),
    ("pretrained", "", "pretrained checkpoint (empty = <out_dir>/pretrain/model.ckpt)"),
    ("resume", "", "checkpoint to continue pretraining from"),
    ("sweep_pruners", "magnitude,movement,soft_movement,l0", "pruners swept"),
    ("sweep_kept", "0.03,0.1,0.8", "kept fractions swept"),
    ("sweep_seeds", "5", "seeds per cell, counting up from seed"),
    ("sweep_distill", "false", "also run every cell with distillation"),
    ("calibrate_lambda", "true", "search the regularization for regularized pruners"),
    ("calibration_iters", "8", "bisection steps of the search"),
    ("lambda_search_min", "1e-4", "lower end of the search"),
    ("lambda_search_max", "0.1", "upper end of the search"),
    ("verify_corrupt_score_gradient", "false", "fault injection: negate score gradients"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Mlp,
    MiniTransformer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelChoice,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub d_model: usize,
    pub seq_len: usize,
    pub blocks: usize,
    pub pruner: PrunerKind,
    pub locality: Locality,
    pub threshold: f64,
    pub lambda_mvp: f64,
    pub lambda_l0: f64,
    pub lambda_warmup: usize,
    pub score_init: Option<f64>,
    pub hard_concrete: HardConcreteParams,
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
    pub warmup_steps: Option<usize>,
    pub cooldown_steps: Option<usize>,
    pub adam: bool,
    pub momentum: f64,
    pub weight_lr: f64,
    pub score_lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub log_every: usize,
    pub distill: bool,
    pub lambda_kd: f64,
    pub temperature: f64,
    pub teacher: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub task_dir: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub sweep_pruners: Vec<PrunerKind>,
    pub sweep_kept: Vec<f64>,
    pub sweep_seeds: u64,
    pub sweep_distill: bool,
    pub calibrate_lambda: bool,
    pub calibration_iters: usize,
    pub lambda_search: (f64, f64),
    pub verify_corrupt_score_gradient: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            task: TaskConfig::default(),
            model: ModelChoice::Mlp,
            hidden_width: 0,
            hidden_layers: 0,
            d_model: 0,
            seq_len: 0,
            blocks: 0,
            pruner: PrunerKind::Movement,
            locality: Locality::Local,
            threshold: 0.0,
            lambda_mvp: 0.0,
            lambda_l0: 0.0,
            lambda_warmup: 0,
            score_init: None,
            hard_concrete: HardConcreteParams::default(),
            initial_sparsity: 0.0,
            final_sparsity: 0.0,
            warmup_steps: None,
            cooldown_steps: None,
            adam: false,
            momentum: 0.0,
            weight_lr: 0.0,
            score_lr: 0.0,
            batch_size: 0,
            steps: 0,
            pretrain_steps: 0,
            pretrain_lr: 0.0,
            log_every: 0,
            distill: false,
            lambda_kd: 0.0,
            temperature: 0.0,
            teacher: None,
            out_dir: PathBuf::new(),
            task_dir: None,
            pretrained: None,
            resume: None,
            sweep_pruners: Vec::new(),
            sweep_kept: Vec::new(),
            sweep_seeds: 0,
            sweep_distill: false,
            calibrate_lambda: false,
            calibration_iters: 0,
            lambda_search: (0.0, 0.0),
            verify_corrupt_score_gradient: false,
        };
        for (key, value, _) in KEYS {
            cfg.set(key, value).expect("documented defaults parse");
        }
        cfg
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> CliResult<Option<T>>
where
    T::Err: Display,
{
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> CliResult<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl ExperimentConfig {
    /// Applies one key. Unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "task_seed" => self.task.seed = parse(key, v)?,
            "classes" => self.task.classes = parse(key, v)?,
            "dim" => self.task.dim = parse(key, v)?,
            "train_size" => self.task.train_size = parse(key, v)?,
            "eval_size" => self.task.eval_size = parse(key, v)?,
            "mean_scale" => self.task.mean_scale = parse(key, v)?,
            "rotation_mix" => self.task.rotation_mix = parse(key, v)?,
            "shift_scale" => self.task.shift_scale = parse(key, v)?,
            "noise_std" => self.task.noise_std = parse(key, v)?,
            "feature_scale" => self.task.feature_scale = parse(key, v)?,
            "model" => {
                self.model = match v {
                    "mlp" => ModelChoice::Mlp,
                    "mini_transformer" => ModelChoice::MiniTransformer,
                    other => return Err(CliError::Config(format!("model: unknown model '{other}'"))),
                }
            }
            "hidden_width" => self.hidden_width = parse(key, v)?,
            "hidden_layers" => self.hidden_layers = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "seq_len" => self.seq_len = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "pruner" => self.pruner = parse(key, v)?,
            "locality" => self.locality = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "lambda_mvp" => self.lambda_mvp = parse(key, v)?,
            "lambda_l0" => self.lambda_l0 = parse(key, v)?,
            "lambda_warmup" => self.lambda_warmup = parse(key, v)?,
            "score_init" => self.score_init = parse_auto(key, v)?,
            "hc_beta" => self.hard_concrete.beta = parse(key, v)?,
            "hc_lower" => self.hard_concrete.lower = parse(key, v)?,
            "hc_upper" => self.hard_concrete.upper = parse(key, v)?,
            "initial_sparsity" => self.initial_sparsity = parse(key, v)?,
            "final_sparsity" => self.final_sparsity = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse_auto(key, v)?,
            "cooldown_steps" => self.cooldown_steps = parse_auto(key, v)?,
            "optimizer" => {
                self.adam = match v {
                    "sgd" => false,
                    "adam" => true,
                    other => return Err(CliError::Config(format!("optimizer: unknown optimizer '{other}'"))),
                }
            }
            "momentum" => self.momentum = parse(key, v)?,
            "weight_lr" => self.weight_lr = parse(key, v)?,
            "score_lr" => self.score_lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "distill" => self.distill = parse(key, v)?,
            "lambda_kd" => self.lambda_kd = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "teacher" => self.teacher = parse_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "task_dir" => self.task_dir = parse_path(v),
            "pretrained" => self.pretrained = parse_path(v),
            "resume" => self.resume = parse_path(v),
            "sweep_pruners" => self.sweep_pruners = parse_list(key, v)?,
            "sweep_kept" => self.sweep_kept = parse_list(key, v)?,
            "sweep_seeds" => self.sweep_seeds = parse(key, v)?,
            "sweep_distill" => self.sweep_distill = parse(key, v)?,
            "calibrate_lambda" => self.calibrate_lambda = parse(key, v)?,
            "calibration_iters" => self.calibration_iters = parse(key, v)?,
            "lambda_search_min" => self.lambda_search.0 = parse(key, v)?,
            "lambda_search_max" => self.lambda_search.1 = parse(key, v)?,
            "verify_corrupt_score_gradient" => self.verify_corrupt_score_gradient = parse(key, v)?,
            other => return Err(CliError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse_str(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("line {}: key '{key}' given twice", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| CliError::Config(format!("line {}: {}", n + 1, e.message())))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.task.validate()?;
        self.architecture().validate()?;
        self.pruner_config().validate()?;
        self.schedule()?;
        self.optimizer().validate()?;
        if !(0.0..=1.0).contains(&self.lambda_kd) {
            return Err(CliError::Config(format!("lambda_kd {} outside [0, 1]", self.lambda_kd)));
        }
        if !(self.temperature > 0.0) {
            return Err(CliError::Config("temperature must be positive".into()));
        }
        if !(self.pretrain_lr > 0.0) {
            return Err(CliError::Config("pretrain_lr must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(CliError::Config("log_every must be positive".into()));
        }
        if self.sweep_pruners.is_empty() || self.sweep_kept.is_empty() || self.sweep_seeds == 0 {
            return Err(CliError::Config("sweep axes must be nonempty".into()));
        }
        if let Some(k) = self.sweep_kept.iter().find(|k| !(0.0..=1.0).contains(*k)) {
            return Err(CliError::Config(format!("sweep_kept value {k} outside [0, 1]")));
        }
        let (lo, hi) = self.lambda_search;
        if !(lo > 0.0 && hi > lo) {
            return Err(CliError::Config("need 0 < lambda_search_min < lambda_search_max".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        match self.model {
            ModelChoice::Mlp => Architecture::Mlp(MlpConfig {
                input_dim: self.task.dim,
                hidden_width: self.hidden_width,
                hidden_layers: self.hidden_layers,
                classes: self.task.classes,
            }),
            ModelChoice::MiniTransformer => Architecture::MiniTransformer(TransformerConfig {
                input_dim: self.task.dim,
                d_model: self.d_model,
                seq_len: self.seq_len,
                blocks: self.blocks,
                classes: self.task.classes,
            }),
        }
    }

    pub fn pruner_config(&self) -> PrunerConfig {
        self.pruner_config_for(self.pruner)
    }

    pub fn pruner_config_for(&self, kind: PrunerKind) -> PrunerConfig {
        let mut p = PrunerConfig::new(kind).with_locality(self.locality);
        p.threshold = self.threshold;
        p.lambda_mvp = self.lambda_mvp;
        p.lambda_l0 = self.lambda_l0;
        p.lambda_warmup = self.lambda_warmup;
        p.hard_concrete = self.hard_concrete;
        if let Some(s) = self.score_init {
            p.score_init = s;
        }
        p.flip_score_gradient = false;
        p
    }

    pub fn schedule(&self) -> CliResult<SparsitySchedule> {
        self.schedule_to(self.final_sparsity)
    }

    /// The configured ramp ending at `final_sparsity`.
    pub fn schedule_to(&self, final_sparsity: f64) -> CliResult<SparsitySchedule> {
        let warmup = self.warmup_steps.unwrap_or(self.steps / 20);
        let cooldown = self.cooldown_steps.unwrap_or(self.steps / 5);
        Ok(SparsitySchedule::new(
            self.initial_sparsity,
            final_sparsity,
            warmup,
            cooldown,
            self.steps,
        )?)
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            weight_lr: self.weight_lr,
            score_lr: self.score_lr,
            kind: if self.adam {
                OptimizerKind::adam()
            } else {
                OptimizerKind::Sgd {
                    momentum: self.momentum,
                }
            },
            batch_size: self.batch_size,
            steps: self.steps,
            seed: self.seed,
        }
    }

    pub fn pretrain_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            weight_lr: self.pretrain_lr,
            steps: self.pretrain_steps,
            ..self.optimizer()
        }
    }

    pub fn task_dir(&self) -> PathBuf {
        self.task_dir.clone().unwrap_or_else(|| self.out_dir.join("tasks"))
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.pretrained
            .clone()
            .unwrap_or_else(|| self.out_dir.join("pretrain").join("model.ckpt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.steps, 400);
        assert_eq!(cfg.sweep_pruners.len(), 4);
        assert_eq!(cfg.score_init, None);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = ExperimentConfig::parse_str("# run\n\npruner = magnitude\nsteps=50\nsweep_kept = 0.1, 0.5\n").unwrap();
        assert_eq!(cfg.pruner, PrunerKind::Magnitude);
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.sweep_kept, vec![0.1, 0.5]);
        assert_eq!(cfg.schedule().unwrap().warmup, 2);
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        assert!(matches!(ExperimentConfig::parse_str("colour = red"), Err(CliError::Config(_))));
        assert!(matches!(ExperimentConfig::parse_str("seed=1\nseed=2"), Err(CliError::Config(_))));
        assert!(matches!(ExperimentConfig::parse_str("seed"), Err(CliError::Config(_))));
        assert!(matches!(ExperimentConfig::parse_str("steps = many"), Err(CliError::Config(_))));
        assert!(matches!(ExperimentConfig::parse_str("lambda_kd = 2"), Err(CliError::Config(_))));
    }

    #[test]
    fn every_key_is_documented_once() {
        let mut names: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), KEYS.len());
    }
}
