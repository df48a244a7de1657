//! Observers that check score dynamics along a training run.

use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::pruners::MaskedLayer;
use crate::tensor::Tensor2D;
use crate::train::{StepObserver, StepView};

/// Replays the movement accumulator `S⁽ᵀ⁾ = S⁽⁰⁾ − α_S Σ_t (∂L/∂W)⁽ᵗ⁾ ⊙ W⁽ᵗ⁾`
/// for entries that stay unmasked throughout.
#[derive(Debug, Clone)]
pub struct AccumulatorReplay {
    score_lr: f64,
    initial: Vec<Tensor2D>,
    sums: Vec<Tensor2D>,
    always_kept: Vec<Vec<bool>>,
    steps: usize,
}

impl AccumulatorReplay {
    /// Fails unless scores are trained by memoryless SGD.
    pub fn new(optimizer: OptimizerKind, score_lr: f64) -> Result<Self> {
        if !optimizer.is_plain_sgd() {
            return Err(Error::Contract(format!(
                "score accumulation only holds for plain SGD, got {optimizer:?}"
            )));
        }
        Ok(Self {
            score_lr,
            initial: Vec::new(),
            sums: Vec::new(),
            always_kept: Vec::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of entries that stayed unmasked for the whole run.
    pub fn compared_entries(&self) -> usize {
        self.always_kept.iter().flatten().filter(|&&k| k).count()
    }

    /// Largest `|S_live − S_replayed|` over always-kept entries.
    pub fn max_deviation(&self, layers: &[MaskedLayer]) -> Result<f64> {
        if layers.len() != self.sums.len() {
            return Err(Error::Contract(format!(
                "replay saw {} layers, model has {}",
                self.sums.len(),
                layers.len()
            )));
        }
        let mut worst: f64 = 0.0;
        for (l, layer) in layers.iter().enumerate() {
            let live = layer.scores.as_slice();
            let start = self.initial[l].as_slice();
            let sum = self.sums[l].as_slice();
            for (e, &kept) in self.always_kept[l].iter().enumerate() {
                if kept {
                    let replayed = start[e] - self.score_lr * sum[e];
                    worst = worst.max((live[e] - replayed).abs());
                }
            }
        }
        Ok(worst)
    }
}

impl StepObserver for AccumulatorReplay {
    fn observe(&mut self, view: &StepView<'_>) -> Result<()> {
        if self.sums.is_empty() {
            self.initial = view.before.iter().map(|l| l.scores.clone()).collect();
            self.sums = view.before.iter().map(|l| Tensor2D::zeros(l.weight.rows(), l.weight.cols())).collect();
            self.always_kept = view.before.iter().map(|l| vec![true; l.len()]).collect();
        }
        for (l, layer) in view.before.iter().enumerate() {
            let grad = view.grads.param(layer.weight_id).ok_or_else(|| {
                Error::Contract(format!("no weight gradient for layer {}", layer.name))
            })?;
            let mask = layer.mask.tensor().as_slice();
            let w = layer.weight.as_slice();
            for (e, (acc, g)) in self.sums[l].as_mut_slice().iter_mut().zip(grad.as_slice()).enumerate() {
                *acc += g * w[e];
                if mask[e] != 1.0 {
                    self.always_kept[l][e] = false;
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Counts unmasked entries where `sign(ΔS) ≠ sign(W·ΔW)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SignProperty {
    pub checked: usize,
    pub violations: usize,
}

impl SignProperty {
    pub fn holds(&self) -> bool {
        self.checked > 0 && self.violations == 0
    }

    pub fn agreement(&self) -> f64 {
        if self.checked == 0 {
            f64::NAN
        } else {
            1.0 - self.violations as f64 / self.checked as f64
        }
    }
}

impl StepObserver for SignProperty {
    fn observe(&mut self, view: &StepView<'_>) -> Result<()> {
        for (before, after) in view.before.iter().zip(view.after) {
            let mask = before.mask.tensor().as_slice();
            let w0 = before.weight.as_slice();
            let w1 = after.weight.as_slice();
            let s0 = before.scores.as_slice();
            let s1 = after.scores.as_slice();
            for e in 0..mask.len() {
                if mask[e] != 1.0 {
                    continue;
                }
                let ds = s1[e] - s0[e];
                let dw = w1[e] - w0[e];
                if ds == 0.0 || dw == 0.0 {
                    continue;
                }
                self.checked += 1;
                if ds.signum() != (w0[e] * dw).signum() {
                    self.violations += 1;
                }
            }
        }
        Ok(())
    }
}

/// Feeds every step to several observers.
pub struct ObserverSet<'a>(pub Vec<&'a mut dyn StepObserver>);

impl StepObserver for ObserverSet<'_> {
    fn observe(&mut self, view: &StepView<'_>) -> Result<()> {
        for o in self.0.iter_mut() {
            o.observe(view)?;
        }
        Ok(())
    }
}
