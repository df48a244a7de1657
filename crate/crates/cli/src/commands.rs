//! The five subcommands. Each takes a validated config and writes its files
//! under `out_dir`.

use std::path::PathBuf;

use log::{info, warn};
use prunelab_core::data::{generate_transfer_pair, orthogonality_error, Dataset, TransferPair};
use prunelab_core::model::{Checkpoint, Model};
use prunelab_core::oracles::{run_verification, OracleRow, OracleStatus, VerifyOptions};
use prunelab_core::pruners::{PrunerConfig, PrunerKind};
use prunelab_core::train::{
    self, evaluate, DistillationConfig, FinepruneSetup, OptimizerConfig, RunOutput,
};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::reports::{self, SummaryRow, VShape};

pub fn gen_tasks(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let pair = generate_transfer_pair(&cfg.task)?;
    let dir = cfg.task_dir();
    reports::write_tasks(&dir, &pair)?;
    info!(
        "wrote tasks to {} (rotation orthogonality error {:.2e})",
        dir.display(),
        orthogonality_error(&pair.rotation)
    );
    Ok(dir)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub eval_accuracy: f64,
}

pub fn pretrain(cfg: &ExperimentConfig) -> CliResult<PretrainOutcome> {
    let tasks = reports::read_tasks(&cfg.task_dir(), cfg.task.classes)?;
    let arch = cfg.architecture();
    let model = match &cfg.resume {
        Some(path) => Checkpoint::load_for(path, &arch)?.model,
        None => Model::new(arch, cfg.seed)?,
    };
    let out = train::pretrain(model, &tasks.source_train, &tasks.source_eval, &cfg.pretrain_optimizer())?;
    let dir = cfg.out_dir.join("pretrain");
    let path = dir.join("model.ckpt");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    out.checkpoint.save(&path)?;
    reports::write_metrics(&dir.join("metrics.csv"), &out.metrics, &layer_names(&out.checkpoint.model))?;
    let eval_accuracy = out.metrics.last().map_or(f64::NAN, |r| r.eval_accuracy);
    info!("pretrained checkpoint {} (source eval accuracy {eval_accuracy:.4})", path.display());
    Ok(PretrainOutcome {
        checkpoint: path,
        eval_accuracy,
    })
}

fn layer_names(model: &Model) -> Vec<String> {
    model.layers.iter().map(|l| l.name.clone()).collect()
}

/// Dense fine-tuning of `model` on the target task, used as the
/// distillation teacher.
fn dense_teacher(cfg: &ExperimentConfig, model: Model, train: &Dataset, eval: &Dataset) -> CliResult<Model> {
    let opt = OptimizerConfig {
        seed: cfg.seed,
        ..cfg.optimizer()
    };
    Ok(train::pretrain(model, train, eval, &opt)?.checkpoint.model)
}

fn setup_for(cfg: &ExperimentConfig, pruner: PrunerConfig, final_sparsity: f64) -> CliResult<FinepruneSetup> {
    let schedule = if pruner.kind.uses_schedule() {
        Some(cfg.schedule_to(final_sparsity)?)
    } else {
        None
    };
    Ok(FinepruneSetup {
        pruner,
        schedule,
        optimizer: cfg.optimizer(),
        distillation: None,
        log_every: cfg.log_every,
    })
}

#[derive(Debug, Clone)]
pub struct FinepruneOutcome {
    pub dir: PathBuf,
    pub kept_fraction: f64,
    pub eval_accuracy: f64,
    pub v_shape: Option<VShape>,
}

pub fn fineprune(cfg: &ExperimentConfig) -> CliResult<FinepruneOutcome> {
    let arch = cfg.architecture();
    let pretrained = Checkpoint::load_for(cfg.pretrained_path(), &arch)?.model;
    let tasks = reports::read_tasks(&cfg.task_dir(), cfg.task.classes)?;
    let pruner = cfg.pruner_config();
    let mut setup = setup_for(cfg, pruner, cfg.final_sparsity)?;
    if cfg.distill {
        let teacher = match &cfg.teacher {
            Some(path) => Checkpoint::load_for(path, &arch)?.model,
            None => dense_teacher(cfg, pretrained.clone(), &tasks.target_train, &tasks.target_eval)?,
        };
        setup.distillation = Some(DistillationConfig {
            lambda_kd: cfg.lambda_kd,
            temperature: cfg.temperature,
            teacher,
        });
    }
    let out = train::fineprune(pretrained.clone(), &tasks.target_train, &tasks.target_eval, &setup, None)?;
    let dir = cfg.out_dir.join("fineprune");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let model = &out.checkpoint.model;
    out.checkpoint.save(dir.join("model.ckpt"))?;
    reports::write_metrics(&dir.join("metrics.csv"), &out.metrics, &layer_names(model))?;
    let scatter = reports::scatter_rows(&pretrained, model);
    reports::write_scatter(&dir.join("scatter.csv"), &scatter)?;
    reports::write_layer_sparsity(&dir.join("layer_sparsity.csv"), &model.remaining_weights_report())?;
    let v_shape = matches!(cfg.pruner, PrunerKind::Movement | PrunerKind::SoftMovement).then(|| reports::v_shape(&scatter));
    if let Some(v) = &v_shape {
        reports::write_v_shape(&dir.join("v_shape.csv"), v)?;
        if v.zero_crossings > 0 || !(v.min_abs_weight > 0.0) {
            warn!(
                "top-decile scores include {} sign-changed weights (smallest |w| {})",
                v.zero_crossings, v.min_abs_weight
            );
        }
    }
    let eval_accuracy = evaluate(model, &tasks.target_eval)?.accuracy;
    info!(
        "{} fine-pruning: kept {:.4} of {} prunable weights, target eval accuracy {eval_accuracy:.4}",
        cfg.pruner,
        model.kept_fraction(),
        model.prunable_count()
    );
    Ok(FinepruneOutcome {
        dir,
        kept_fraction: model.kept_fraction(),
        eval_accuracy,
        v_shape,
    })
}

fn lambda_mut(p: &mut PrunerConfig) -> Option<&mut f64> {
    match p.kind {
        PrunerKind::SoftMovement => Some(&mut p.lambda_mvp),
        PrunerKind::L0 => Some(&mut p.lambda_l0),
        _ => None,
    }
}

struct CellResult {
    lambda: Option<f64>,
    kept: f64,
    accuracy: f64,
}

fn finish(out: &RunOutput, eval: &Dataset, lambda: Option<f64>) -> CliResult<CellResult> {
    Ok(CellResult {
        lambda,
        kept: out.checkpoint.model.kept_fraction(),
        accuracy: evaluate(&out.checkpoint.model, eval)?.accuracy,
    })
}

/// Bisection on `log10 λ`: a run keeping more than `target` raises λ, one
/// keeping at most `target` lowers it. Returns the run closest to the target
/// from below, or the sparsest run if none got there.
fn calibrate<F>(cfg: &ExperimentConfig, target: f64, mut run: F) -> CliResult<CellResult>
where
    F: FnMut(f64) -> CliResult<CellResult>,
{
    let (mut lo, mut hi) = (cfg.lambda_search.0.log10(), cfg.lambda_search.1.log10());
    let mut below: Option<CellResult> = None;
    let mut sparsest: Option<CellResult> = None;
    for _ in 0..cfg.calibration_iters.max(1) {
        let mid = 0.5 * (lo + hi);
        let r = run(10f64.powf(mid))?;
        if r.kept > target {
            lo = mid;
            if sparsest.as_ref().is_none_or(|s| r.kept < s.kept) {
                sparsest = Some(r);
            }
        } else {
            hi = mid;
            if below.as_ref().is_none_or(|b| r.kept > b.kept) {
                below = Some(r);
            }
        }
    }
    Ok(below.or(sparsest).expect("at least one calibration run"))
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    pruner: PrunerKind,
    kept: f64,
    seed: u64,
    distilled: bool,
}

struct SeedContext {
    pretrained: Model,
    teacher: Option<Model>,
}

fn run_cell(cfg: &ExperimentConfig, tasks: &TransferPair, ctx: &SeedContext, cell: Cell) -> CliResult<CellResult> {
    let seeded = ExperimentConfig {
        seed: cell.seed,
        ..cfg.clone()
    };
    let base = setup_for(&seeded, seeded.pruner_config_for(cell.pruner), 1.0 - cell.kept)?;
    let distillation = if cell.distilled {
        ctx.teacher.clone().map(|teacher| DistillationConfig {
            lambda_kd: cfg.lambda_kd,
            temperature: cfg.temperature,
            teacher,
        })
    } else {
        None
    };
    let run = |lambda: Option<f64>| -> CliResult<CellResult> {
        let mut setup = FinepruneSetup {
            distillation: distillation.clone(),
            log_every: usize::MAX,
            ..base.clone()
        };
        if let (Some(l), Some(slot)) = (lambda, lambda_mut(&mut setup.pruner)) {
            *slot = l;
        }
        let out = train::fineprune(ctx.pretrained.clone(), &tasks.target_train, &tasks.target_eval, &setup, None)?;
        finish(&out, &tasks.target_eval, lambda)
    };
    let mut pruner = base.pruner.clone();
    match lambda_mut(&mut pruner) {
        Some(_) if cfg.calibrate_lambda => calibrate(cfg, cell.kept, |l| run(Some(l))),
        Some(l) => run(Some(*l)),
        None => run(None),
    }
}

/// Runs every pruner × kept fraction × seed cell (and the distilled
/// variant when enabled) and writes `sweep/summary.csv`.
pub fn sweep(cfg: &ExperimentConfig, jobs: usize) -> CliResult<Vec<SummaryRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?;
    let tasks = generate_transfer_pair(&cfg.task)?;
    let arch = cfg.architecture();
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + cfg.sweep_seeds).collect();
    let contexts: Vec<CliResult<SeedContext>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let opt = OptimizerConfig {
                    seed,
                    ..cfg.pretrain_optimizer()
                };
                let pretrained =
                    train::pretrain(Model::new(arch, seed)?, &tasks.source_train, &tasks.source_eval, &opt)?
                        .checkpoint
                        .model;
                let teacher = if cfg.sweep_distill {
                    let seeded = ExperimentConfig { seed, ..cfg.clone() };
                    Some(dense_teacher(&seeded, pretrained.clone(), &tasks.target_train, &tasks.target_eval)?)
                } else {
                    None
                };
                info!("seed {seed}: pretrained");
                Ok(SeedContext { pretrained, teacher })
            })
            .collect()
    });

    let mut cells = Vec::new();
    for &pruner in &cfg.sweep_pruners {
        for &kept in &cfg.sweep_kept {
            for distilled in [false, true] {
                if distilled && !cfg.sweep_distill {
                    continue;
                }
                for &seed in &seeds {
                    cells.push(Cell {
                        pruner,
                        kept,
                        seed,
                        distilled,
                    });
                }
            }
        }
    }
    let rows: Vec<SummaryRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| {
                let ctx = &contexts[(cell.seed - cfg.seed) as usize];
                let result = match ctx {
                    Ok(ctx) => run_cell(cfg, &tasks, ctx, cell),
                    Err(e) => Err(CliError::Data {
                        path: PathBuf::from("<pretraining>"),
                        reason: e.to_string(),
                    }),
                };
                let mut row = SummaryRow {
                    pruner: cell.pruner.to_string(),
                    kept_target: cell.kept,
                    seed: cell.seed,
                    distilled: cell.distilled,
                    lambda: None,
                    kept_final: f64::NAN,
                    eval_accuracy: f64::NAN,
                    status: "ok".into(),
                };
                match result {
                    Ok(r) => {
                        row.lambda = r.lambda;
                        row.kept_final = r.kept;
                        row.eval_accuracy = r.accuracy;
                        info!(
                            "{} kept {} seed {}: accuracy {:.4} at kept {:.4}",
                            cell.pruner, cell.kept, cell.seed, r.accuracy, r.kept
                        );
                    }
                    Err(e) => {
                        warn!("{} kept {} seed {} failed: {e}", cell.pruner, cell.kept, cell.seed);
                        row.status = format!("error: {e}");
                    }
                }
                row
            })
            .collect()
    });
    reports::write_summary(&cfg.out_dir.join("sweep").join("summary.csv"), &rows)?;
    Ok(rows)
}

/// Runs the oracle suite, prints the table and writes `verify/report.csv`.
/// Any FAIL row turns into a verification error after the report is
/// written.
pub fn verify(cfg: &ExperimentConfig) -> CliResult<Vec<OracleRow>> {
    let rows = run_verification(&VerifyOptions {
        corrupt_score_gradient: cfg.verify_corrupt_score_gradient,
    })?;
    println!("{:<36} {:<12} {:>14} {:>12}", "oracle", "status", "metric", "threshold");
    for r in &rows {
        println!("{:<36} {:<12} {:>14.6e} {:>12.3e}", r.oracle, r.status.to_string(), r.metric, r.threshold);
    }
    let path = cfg.out_dir.join("verify").join("report.csv");
    reports::write_verify_report(&path, &rows)?;
    let failed = rows.iter().filter(|r| r.status == OracleStatus::Fail).count();
    if failed > 0 {
        return Err(CliError::Verification { failed });
    }
    Ok(rows)
}
