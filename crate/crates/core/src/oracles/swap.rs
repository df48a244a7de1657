//! Loss behaviour when the selected connections change.
//!
//! A single output unit `a = Σ_j W_j M_j x_j` is trained with plain SGD on
//! both weights and scores under the logistic loss `softplus(−y·a)`, with a
//! fresh input `x ∈ [−1, 1]ⁿ` and label `y ∈ {±1}` at every step. Whenever
//! the mask changes with at least one connection leaving and one entering,
//! the loss on that step's input is compared before and after the update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SwapMasking {
    /// The `k` largest scores, ties to the lowest index.
    TopK(usize),
    /// `S ≥ τ`.
    Threshold(f64),
    /// `S < τ` with `τ < 0`: selection by the most negative scores.
    NegativeThreshold(f64),
}

impl SwapMasking {
    fn mask(&self, scores: &[f64]) -> Vec<bool> {
        match *self {
            SwapMasking::TopK(k) => {
                let mut order: Vec<usize> = (0..scores.len()).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                let mut m = vec![false; scores.len()];
                for &i in order.iter().take(k) {
                    m[i] = true;
                }
                m
            }
            SwapMasking::Threshold(t) => scores.iter().map(|&s| s >= t).collect(),
            SwapMasking::NegativeThreshold(t) => scores.iter().map(|&s| s < t).collect(),
        }
    }

    fn validate(&self, inputs: usize) -> Result<()> {
        match *self {
            SwapMasking::TopK(k) if k == 0 || k >= inputs => Err(Error::config(format!(
                "TopK needs 0 < k < {inputs}, got {k}"
            ))),
            SwapMasking::NegativeThreshold(t) if !(t < 0.0) => {
                Err(Error::config(format!("negative threshold must be < 0, got {t}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapHarnessConfig {
    pub inputs: usize,
    pub masking: SwapMasking,
    pub weight_lr: f64,
    pub score_lr: f64,
    pub steps: usize,
    /// Scores start at `center + spread·N(0, 1)`.
    pub score_center: f64,
    pub score_spread: f64,
}

impl SwapHarnessConfig {
    /// The single-survivor setting: two inputs, TopK with k = 1, scores
    /// starting at zero.
    pub fn top1() -> Self {
        Self {
            inputs: 2,
            masking: SwapMasking::TopK(1),
            weight_lr: 1e-4,
            score_lr: 0.5,
            steps: 200,
            score_center: 0.0,
            score_spread: 0.0,
        }
    }
}

/// One input position of the single output unit.
pub type Connection = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct SwapEvent {
    pub step: usize,
    pub outgoing: Vec<Connection>,
    pub incoming: Vec<Connection>,
    pub loss_before: f64,
    pub loss_after: f64,
}

impl SwapEvent {
    pub fn loss_decreased(&self) -> bool {
        self.loss_after < self.loss_before
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HarnessStatus {
    Pass,
    Fail,
    /// No swap happened, so nothing was tested.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapHarnessResult {
    pub events: Vec<SwapEvent>,
    pub status: HarnessStatus,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn activation(w: &[f64], m: &[bool], x: &[f64]) -> f64 {
    w.iter()
        .zip(m)
        .zip(x)
        .filter(|((_, &keep), _)| keep)
        .map(|((w, _), x)| w * x)
        .sum()
}

/// Runs one seeded trajectory and records every swap.
pub fn swap_loss_harness(cfg: &SwapHarnessConfig, seed: u64) -> Result<SwapHarnessResult> {
    cfg.masking.validate(cfg.inputs)?;
    if cfg.weight_lr < 0.0 || cfg.score_lr <= 0.0 {
        return Err(Error::config("learning rates must be nonnegative (scores: positive)"));
    }
    let n = cfg.inputs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut s: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            cfg.score_center + cfg.score_spread * z
        })
        .collect();
    let mut m = cfg.masking.mask(&s);
    let mut events = Vec::new();
    for step in 0..cfg.steps {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let a = activation(&w, &m, &x);
        let loss_before = softplus(-y * a);
        let g = -y * logistic(-y * a);
        for j in 0..n {
            let grad_w = if m[j] { g * x[j] } else { 0.0 };
            let grad_s = g * x[j] * w[j];
            w[j] -= cfg.weight_lr * grad_w;
            s[j] -= cfg.score_lr * grad_s;
        }
        let next = cfg.masking.mask(&s);
        let outgoing: Vec<usize> = (0..n).filter(|&j| m[j] && !next[j]).collect();
        let incoming: Vec<usize> = (0..n).filter(|&j| !m[j] && next[j]).collect();
        if !outgoing.is_empty() && !incoming.is_empty() {
            let loss_after = softplus(-y * activation(&w, &next, &x));
            events.push(SwapEvent {
                step,
                outgoing,
                incoming,
                loss_before,
                loss_after,
            });
        }
        m = next;
    }
    let status = if events.is_empty() {
        HarnessStatus::Inconclusive
    } else if events.iter().all(SwapEvent::loss_decreased) {
        HarnessStatus::Pass
    } else {
        HarnessStatus::Fail
    };
    Ok(SwapHarnessResult { events, status })
}

/// Aggregate over many seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwapSweep {
    /// Seeds whose trajectory contained at least one swap.
    pub seeds_with_swaps: usize,
    pub events: usize,
    pub decreasing: usize,
}

impl SwapSweep {
    pub fn pass_rate(&self) -> f64 {
        if self.events == 0 {
            f64::NAN
        } else {
            self.decreasing as f64 / self.events as f64
        }
    }
}

/// Runs seeds `0, 1, …` until `wanted` of them produced a swap (or
/// `max_seeds` were tried).
pub fn swap_sweep(cfg: &SwapHarnessConfig, wanted: usize, max_seeds: u64) -> Result<SwapSweep> {
    let mut out = SwapSweep {
        seeds_with_swaps: 0,
        events: 0,
        decreasing: 0,
    };
    for seed in 0..max_seeds {
        if out.seeds_with_swaps >= wanted {
            break;
        }
        let r = swap_loss_harness(cfg, seed)?;
        if r.events.is_empty() {
            continue;
        }
        out.seeds_with_swaps += 1;
        out.events += r.events.len();
        out.decreasing += r.events.iter().filter(|e| e.loss_decreased()).count();
    }
    Ok(out)
}

/// Searches seeds for a swap under `cfg` whose loss went up.
pub fn find_loss_increase(cfg: &SwapHarnessConfig, max_seeds: u64) -> Result<Option<(u64, SwapEvent)>> {
    for seed in 0..max_seeds {
        let r = swap_loss_harness(cfg, seed)?;
        if let Some(e) = r.events.into_iter().find(|e| e.loss_after > e.loss_before) {
            return Ok(Some((seed, e)));
        }
    }
    Ok(None)
}

/// Negative-threshold masking with scores starting around the threshold,
/// so connections cross it in both directions.
pub fn negative_threshold_config() -> SwapHarnessConfig {
    SwapHarnessConfig {
        inputs: 2,
        masking: SwapMasking::NegativeThreshold(-0.05),
        weight_lr: 1e-4,
        score_lr: 1.0,
        steps: 200,
        score_center: -0.05,
        score_spread: 0.02,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn engineered_swap_lowers_loss() {
        // Connection 1 is masked but its score grows faster than connection 0's.
        let (w, x, y) = ([0.2, 1.0], [0.5, 0.5], 1.0);
        let mut s = [0.01, 0.0];
        let top1 = SwapMasking::TopK(1);
        let m = top1.mask(&s);
        assert_eq!(m, vec![true, false]);
        let a = activation(&w, &m, &x);
        let g = -y * logistic(-y * a);
        for j in 0..2 {
            s[j] -= g * x[j] * w[j];
        }
        let next = top1.mask(&s);
        assert_eq!(next, vec![false, true]);
        let before = softplus(-y * a);
        let after = softplus(-y * activation(&w, &next, &x));
        assert!(after < before);
    }

    #[test]
    fn no_swaps_is_inconclusive() {
        let cfg = SwapHarnessConfig {
            score_center: 0.0,
            score_spread: 0.0,
            steps: 0,
            ..SwapHarnessConfig::top1()
        };
        assert_eq!(swap_loss_harness(&cfg, 0).unwrap().status, HarnessStatus::Inconclusive);
    }

    #[test]
    fn rejects_bad_masking() {
        let cfg = SwapHarnessConfig {
            masking: SwapMasking::TopK(2),
            ..SwapHarnessConfig::top1()
        };
        assert!(swap_loss_harness(&cfg, 0).is_err());
    }
}
