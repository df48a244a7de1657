//! CSV files read and written by the commands.
//!
//! Every file has a header row, comma separators, `.` decimals and LF line
//! endings. Floats use Rust's shortest round-trip formatting, so equal values
//! always produce equal bytes.

use std::path::Path;

use prunelab_core::data::{Dataset, TransferPair};
use prunelab_core::model::{LayerSparsity, Model};
use prunelab_core::oracles::OracleRow;
use prunelab_core::train::MetricsRow;
use prunelab_core::Tensor2D;

use crate::error::{CliError, CliResult};

pub const TASK_FILES: [&str; 4] = ["source_train.csv", "source_eval.csv", "target_train.csv", "target_eval.csv"];

fn writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| CliError::csv(path, e))
}

/// Writes `header` and `rows` to `path`, creating parent directories.
pub fn write_csv<I, R>(path: &Path, header: &[String], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| CliError::csv(path, e))?;
    for row in rows {
        let row: Vec<String> = row.into_iter().collect();
        w.write_record(&row).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn write_dataset(path: &Path, data: &Dataset) -> CliResult<()> {
    let mut head: Vec<String> = (0..data.dim()).map(|j| format!("f{j}")).collect();
    head.push("label".into());
    let rows = (0..data.len()).map(|i| {
        let mut row: Vec<String> = data.features.row(i).iter().map(f64::to_string).collect();
        row.push(data.labels[i].to_string());
        row
    });
    write_csv(path, &head, rows)
}

pub fn read_dataset(path: &Path, classes: usize) -> CliResult<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let bad = |reason: String| CliError::Data {
        path: path.to_path_buf(),
        reason,
    };
    let dim = reader
        .headers()
        .map_err(|e| CliError::csv(path, e))?
        .len()
        .checked_sub(1)
        .filter(|&d| d > 0)
        .ok_or_else(|| bad("expected feature columns and a label column".into()))?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::csv(path, e))?;
        for field in record.iter().take(dim) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| bad(format!("row {}: {e}", n + 1)))?,
            );
        }
        labels.push(record[dim].parse::<usize>().map_err(|e| bad(format!("row {}: {e}", n + 1)))?);
    }
    let features = Tensor2D::new(labels.len(), dim, values)?;
    Dataset::new(features, labels, classes).map_err(|e| bad(e.to_string()))
}

pub fn write_tasks(dir: &Path, pair: &TransferPair) -> CliResult<()> {
    let sets = [&pair.source_train, &pair.source_eval, &pair.target_train, &pair.target_eval];
    for (name, data) in TASK_FILES.iter().zip(sets) {
        write_dataset(&dir.join(name), data)?;
    }
    let head: Vec<String> = (0..pair.rotation.cols()).map(|j| format!("c{j}")).collect();
    let rows = (0..pair.rotation.rows()).map(|i| pair.rotation.row(i).iter().map(f64::to_string).collect::<Vec<_>>());
    write_csv(&dir.join("rotation.csv"), &head, rows)
}

/// Source and target splits read back from a task directory.
pub struct Tasks {
    pub source_train: Dataset,
    pub source_eval: Dataset,
    pub target_train: Dataset,
    pub target_eval: Dataset,
}

pub fn read_tasks(dir: &Path, classes: usize) -> CliResult<Tasks> {
    let [a, b, c, d] = TASK_FILES.map(|name| dir.join(name));
    Ok(Tasks {
        source_train: read_dataset(&a, classes)?,
        source_eval: read_dataset(&b, classes)?,
        target_train: read_dataset(&c, classes)?,
        target_eval: read_dataset(&d, classes)?,
    })
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow], layer_names: &[String]) -> CliResult<()> {
    let mut head = header(&["step", "kept_fraction", "train_loss", "eval_accuracy", "regularizer"]);
    head.extend(layer_names.iter().map(|n| format!("kept_{n}")));
    let body = rows.iter().map(|r| {
        let mut row = vec![
            r.step.to_string(),
            r.kept_fraction.to_string(),
            r.train_loss.to_string(),
            r.eval_accuracy.to_string(),
            r.regularizer.to_string(),
        ];
        row.extend(r.layer_kept.iter().map(usize::to_string));
        row
    });
    write_csv(path, &head, body)
}

/// One prunable weight before and after fine-pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub layer: String,
    pub i: usize,
    pub j: usize,
    pub w_pretrained: f64,
    pub w_final: f64,
    pub score_final: f64,
    pub pruned: bool,
}

pub fn scatter_rows(pretrained: &Model, fine: &Model) -> Vec<ScatterRow> {
    let mut out = Vec::new();
    for (before, after) in pretrained.layers.iter().zip(&fine.layers) {
        let mask = after.report_mask(fine.gates.as_ref());
        let (rows, cols) = after.shape();
        for i in 0..rows {
            for j in 0..cols {
                out.push(ScatterRow {
                    layer: after.name.clone(),
                    i,
                    j,
                    w_pretrained: before.weight.get(i, j),
                    w_final: after.weight.get(i, j),
                    score_final: after.scores.get(i, j),
                    pruned: !mask.is_kept(i, j),
                });
            }
        }
    }
    out
}

pub fn write_scatter(path: &Path, rows: &[ScatterRow]) -> CliResult<()> {
    let head = header(&["layer", "i", "j", "w_pretrained", "w_final", "score_final", "pruned"]);
    let body = rows.iter().map(|r| {
        vec![
            r.layer.clone(),
            r.i.to_string(),
            r.j.to_string(),
            r.w_pretrained.to_string(),
            r.w_final.to_string(),
            r.score_final.to_string(),
            u8::from(r.pruned).to_string(),
        ]
    });
    write_csv(path, &head, body)
}

pub fn write_layer_sparsity(path: &Path, report: &[LayerSparsity]) -> CliResult<()> {
    let head = header(&["layer", "kept", "total", "kept_fraction"]);
    let body = report.iter().map(|r| {
        vec![
            r.layer.clone(),
            r.kept.to_string(),
            r.total.to_string(),
            r.kept_fraction().to_string(),
        ]
    });
    write_csv(path, &head, body)
}

/// Relation between scores and final weights among the highest-scoring
/// tenth of each layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VShape {
    pub top_decile: usize,
    /// Smallest `|w_final|` in the top decile.
    pub min_abs_weight: f64,
    /// Top-decile weights whose sign differs between pretrained and final.
    pub zero_crossings: usize,
}

pub fn v_shape(rows: &[ScatterRow]) -> VShape {
    let mut out = VShape {
        top_decile: 0,
        min_abs_weight: f64::INFINITY,
        zero_crossings: 0,
    };
    let mut start = 0;
    while start < rows.len() {
        let end = start + rows[start..].iter().take_while(|r| r.layer == rows[start].layer).count();
        let mut layer: Vec<&ScatterRow> = rows[start..end].iter().collect();
        layer.sort_by(|a, b| b.score_final.total_cmp(&a.score_final));
        let top = (layer.len() as f64 * 0.1).round() as usize;
        for r in &layer[..top] {
            out.top_decile += 1;
            out.min_abs_weight = out.min_abs_weight.min(r.w_final.abs());
            if r.w_pretrained.signum() != r.w_final.signum() {
                out.zero_crossings += 1;
            }
        }
        start = end;
    }
    out
}

pub fn write_v_shape(path: &Path, v: &VShape) -> CliResult<()> {
    write_csv(
        path,
        &header(&["top_decile", "min_abs_weight", "zero_crossings"]),
        [[v.top_decile.to_string(), v.min_abs_weight.to_string(), v.zero_crossings.to_string()]],
    )
}

/// One sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub pruner: String,
    pub kept_target: f64,
    pub seed: u64,
    pub distilled: bool,
    /// Regularization used by λ-driven pruners.
    pub lambda: Option<f64>,
    pub kept_final: f64,
    pub eval_accuracy: f64,
    /// `ok`, or the error that stopped the cell.
    pub status: String,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Writes one row per cell followed by mean and standard-deviation rows for
/// every (pruner, kept, distilled) group, over the cells that succeeded.
pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> CliResult<()> {
    let head = header(&[
        "pruner",
        "kept_target",
        "seed",
        "distilled",
        "lambda",
        "kept_final",
        "eval_accuracy",
        "status",
    ]);
    let mut body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.pruner.clone(),
                r.kept_target.to_string(),
                r.seed.to_string(),
                r.distilled.to_string(),
                r.lambda.map_or_else(String::new, |l| l.to_string()),
                r.kept_final.to_string(),
                r.eval_accuracy.to_string(),
                r.status.clone(),
            ]
        })
        .collect();
    let mut groups: Vec<(String, f64, bool)> = Vec::new();
    for r in rows {
        let key = (r.pruner.clone(), r.kept_target, r.distilled);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    for (pruner, kept, distilled) in groups {
        let ok: Vec<&SummaryRow> = rows
            .iter()
            .filter(|r| r.pruner == pruner && r.kept_target == kept && r.distilled == distilled && r.status == "ok")
            .collect();
        if ok.is_empty() {
            continue;
        }
        let kept_final: Vec<f64> = ok.iter().map(|r| r.kept_final).collect();
        let acc: Vec<f64> = ok.iter().map(|r| r.eval_accuracy).collect();
        let (km, ks) = mean_std(&kept_final);
        let (am, asd) = mean_std(&acc);
        for (label, k, a) in [("mean", km, am), ("std", ks, asd)] {
            body.push(vec![
                pruner.clone(),
                kept.to_string(),
                label.into(),
                distilled.to_string(),
                String::new(),
                k.to_string(),
                a.to_string(),
                format!("n={}", ok.len()),
            ]);
        }
    }
    write_csv(path, &head, body)
}

pub fn write_verify_report(path: &Path, rows: &[OracleRow]) -> CliResult<()> {
    let head = header(&["oracle", "status", "metric", "threshold"]);
    let body = rows.iter().map(|r| {
        vec![
            r.oracle.clone(),
            r.status.to_string(),
            r.metric.to_string(),
            r.threshold.to_string(),
        ]
    });
    write_csv(path, &head, body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let x = Tensor2D::from_rows(&[[0.1, -1e-300], [1.0 / 3.0, 2.5e10]]);
        let data = Dataset::new(x, vec![1, 0], 2).unwrap();
        write_dataset(&path, &data).unwrap();
        assert_eq!(read_dataset(&path, 2).unwrap(), data);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("f0,f1,label\n"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn missing_dataset_names_the_path() {
        let err = read_dataset(Path::new("/no/such/task.csv"), 2).unwrap_err();
        assert!(err.to_string().contains("/no/such/task.csv"));
    }

    #[test]
    fn summary_aggregates_successful_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let cell = |seed, acc: f64, status: &str| SummaryRow {
            pruner: "movement".into(),
            kept_target: 0.1,
            seed,
            distilled: false,
            lambda: None,
            kept_final: 0.1,
            eval_accuracy: acc,
            status: status.into(),
        };
        write_summary(&path, &[cell(0, 0.5, "ok"), cell(1, 0.7, "ok"), cell(2, f64::NAN, "error: x")]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[4].starts_with("movement,0.1,mean,false,,0.1,0.6"));
        assert!(lines[5].contains(",std,"));
    }

    #[test]
    fn v_shape_uses_top_scores_per_layer() {
        let row = |layer: &str, score, w0, w1| ScatterRow {
            layer: layer.into(),
            i: 0,
            j: 0,
            w_pretrained: w0,
            w_final: w1,
            score_final: score,
            pruned: false,
        };
        let mut rows: Vec<ScatterRow> = (0..10).map(|k| row("a", k as f64, 1.0, 0.0)).collect();
        rows[9] = row("a", 100.0, -0.5, 0.25);
        let v = v_shape(&rows);
        assert_eq!(v.top_decile, 1);
        assert_eq!(v.min_abs_weight, 0.25);
        assert_eq!(v.zero_crossings, 1);
    }
}
