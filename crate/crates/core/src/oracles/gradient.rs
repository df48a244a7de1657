//! Central finite-difference checks.

use rand::seq::index;
use rand::Rng;

use crate::autodiff::ComputeGraph;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pruners::PrunerConfig;
use crate::tensor::Tensor2D;
use crate::train::training_loss;

/// Denominator floor for relative errors, so entries whose gradient is
/// numerically zero are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn central_difference<F>(f: &mut F, point: &Tensor2D, flat: usize, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor2D) -> Result<f64>,
{
    let mut probe = point.clone();
    let base = point.as_slice()[flat];
    probe.as_mut_slice()[flat] = base + h;
    let up = f(&probe)?;
    probe.as_mut_slice()[flat] = base - h;
    let down = f(&probe)?;
    if !up.is_finite() || !down.is_finite() {
        return Err(Error::Domain(format!(
            "function is not finite near entry {flat} ({up}, {down})"
        )));
    }
    Ok((up - down) / (2.0 * h))
}

/// Worst relative error between `analytic` and central differences of `f`
/// at `point`, over every entry.
pub fn finite_difference_check<F>(mut f: F, point: &Tensor2D, analytic: &Tensor2D, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor2D) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    point.check_same_shape(analytic, "finite_difference_check")?;
    let mut worst: f64 = 0.0;
    for flat in 0..point.len() {
        let numeric = central_difference(&mut f, point, flat, h)?;
        worst = worst.max(relative_error(analytic.as_slice()[flat], numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Weight(usize),
    Score(usize),
    Dense(usize),
}

fn tensor_mut(model: &mut Model, target: Target) -> &mut Tensor2D {
    match target {
        Target::Weight(l) => &mut model.layers[l].weight,
        Target::Score(l) => &mut model.layers[l].scores,
        Target::Dense(i) => &mut model.dense[i].value,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelGradientCheck {
    pub max_rel_error: f64,
    pub entries: usize,
}

/// Compares backpropagated gradients of the training objective with central
/// differences on `per_tensor` random entries of every trainable tensor.
///
/// Scores are only checked when the masks are hard-concrete gates (with the
/// layers' frozen noise): for the other variants the forward pass does not
/// depend on the scores and their gradient is the straight-through value.
pub fn check_model_gradients<R: Rng + ?Sized>(
    model: &Model,
    x: &Tensor2D,
    labels: &[usize],
    regularizer: Option<&PrunerConfig>,
    per_tensor: usize,
    h: f64,
    rng: &mut R,
) -> Result<ModelGradientCheck> {
    let loss_at = |m: &Model| -> Result<f64> {
        let mut g = ComputeGraph::new();
        let loss = training_loss(&mut g, m, x, labels, regularizer, 0, None)?;
        Ok(g.value(loss).item())
    };
    let mut graph = ComputeGraph::new();
    let loss = training_loss(&mut graph, model, x, labels, regularizer, 0, None)?;
    let grads = graph.backward(loss)?;

    let mut targets = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        targets.push((Target::Weight(l), layer.weight_id));
        if model.gates.is_some() {
            targets.push((Target::Score(l), layer.score_id));
        }
    }
    for (i, p) in model.dense.iter().enumerate() {
        if p.trainable {
            targets.push((Target::Dense(i), p.id));
        }
    }

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut probe = model.clone();
    for (target, id) in targets {
        let analytic = grads
            .param(id)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter {id:?}")))?
            .clone();
        let len = analytic.len();
        for flat in index::sample(rng, len, per_tensor.min(len)) {
            let base = tensor_mut(&mut probe, target).as_slice()[flat];
            tensor_mut(&mut probe, target).as_mut_slice()[flat] = base + h;
            let up = loss_at(&probe)?;
            tensor_mut(&mut probe, target).as_mut_slice()[flat] = base - h;
            let down = loss_at(&probe)?;
            tensor_mut(&mut probe, target).as_mut_slice()[flat] = base;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Domain("loss is not finite near the check point".into()));
            }
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.as_slice()[flat], numeric));
            entries += 1;
        }
    }
    Ok(ModelGradientCheck {
        max_rel_error: worst,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let point = Tensor2D::ones(2, 3);
        let analytic = point.scale(2.0);
        let err = finite_difference_check(
            |t| Ok(t.as_slice().iter().map(|v| v * v).sum()),
            &point,
            &analytic,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_function_is_a_domain_error() {
        let point = Tensor2D::zeros(1, 1);
        let err = finite_difference_check(|t| Ok(t.item().ln()), &point, &point, 1e-6).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }
}
