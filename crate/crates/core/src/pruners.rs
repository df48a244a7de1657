//! The four pruning strategies as interchangeable policies over a set of
//! [`MaskedLayer`]s.
//!
//! | strategy       | scores                   | mask                      | objective            |
//! |----------------|--------------------------|---------------------------|----------------------|
//! | magnitude      | `|W|`, recomputed        | Top-v                     | `L`                  |
//! | movement       | learned, straight-through| Top-v                     | `L`                  |
//! | soft movement  | learned, straight-through| `S > τ`                   | `L + λ_mvp Σ σ(S)`   |
//! | L0             | learned through gates    | hard-concrete             | `L + λ_l0 E[L0]`     |

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{ComputeGraph, GradientStore, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::masking::{
    self, hard_concrete_sample, hard_concrete_test_mask, threshold_mask, topv_global, topv_local,
    uniform_noise, HardConcreteParams, Mask,
};
use crate::optim::Optimizer;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrunerKind {
    Magnitude,
    Movement,
    SoftMovement,
    L0,
}

impl PrunerKind {
    pub const ALL: [PrunerKind; 4] = [
        PrunerKind::Magnitude,
        PrunerKind::Movement,
        PrunerKind::SoftMovement,
        PrunerKind::L0,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrunerKind::Magnitude => "magnitude",
            PrunerKind::Movement => "movement",
            PrunerKind::SoftMovement => "soft_movement",
            PrunerKind::L0 => "l0",
        }
    }

    /// Whether the kept fraction comes from the sparsity schedule (Top-v) or
    /// from the regularization strength.
    pub fn uses_schedule(self) -> bool {
        matches!(self, PrunerKind::Magnitude | PrunerKind::Movement)
    }

    pub fn has_trainable_scores(self) -> bool {
        !matches!(self, PrunerKind::Magnitude)
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            PrunerKind::Magnitude => 1,
            PrunerKind::Movement => 2,
            PrunerKind::SoftMovement => 3,
            PrunerKind::L0 => 4,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

impl fmt::Display for PrunerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrunerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown pruner '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Locality {
    Local,
    Global,
}

impl FromStr for Locality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Locality::Local),
            "global" => Ok(Locality::Global),
            other => Err(Error::config(format!("unknown locality '{other}'"))),
        }
    }
}

impl fmt::Display for Locality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Locality::Local => "local",
            Locality::Global => "global",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunerConfig {
    pub kind: PrunerKind,
    pub locality: Locality,
    /// `τ` of the soft-movement mask `S > τ`.
    pub threshold: f64,
    pub lambda_mvp: f64,
    pub lambda_l0: f64,
    /// Steps over which λ ramps linearly from 0; 0 means constant.
    pub lambda_warmup: usize,
    pub hard_concrete: HardConcreteParams,
    pub score_init: f64,
    /// Fault injection for the verification suite: negates the score
    /// gradient before the update.
    #[doc(hidden)]
    pub flip_score_gradient: bool,
}

impl PrunerConfig {
    pub fn new(kind: PrunerKind) -> Self {
        Self {
            kind,
            locality: Locality::Local,
            threshold: 0.0,
            lambda_mvp: 1.0,
            lambda_l0: 1.0,
            lambda_warmup: 0,
            hard_concrete: HardConcreteParams::default(),
            score_init: Self::default_score_init(kind),
            flip_score_gradient: false,
        }
    }

    /// Soft movement starts above its threshold so the network is dense at
    /// step 0; the other learned-score variants start at zero.
    pub fn default_score_init(kind: PrunerKind) -> f64 {
        match kind {
            PrunerKind::SoftMovement => 0.01,
            _ => 0.0,
        }
    }

    pub fn with_locality(mut self, locality: Locality) -> Self {
        self.locality = locality;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_mvp < 0.0 || self.lambda_l0 < 0.0 {
            return Err(Error::config("regularization coefficients must be nonnegative"));
        }
        if !self.threshold.is_finite() || !self.score_init.is_finite() {
            return Err(Error::config("threshold and score_init must be finite"));
        }
        self.hard_concrete.validate()
    }

    /// Regularization coefficient in effect at `step` (linear warm-up).
    pub fn lambda_at(&self, step: usize) -> f64 {
        let base = match self.kind {
            PrunerKind::SoftMovement => self.lambda_mvp,
            PrunerKind::L0 => self.lambda_l0,
            _ => 0.0,
        };
        if self.lambda_warmup == 0 {
            base
        } else {
            base * ((step + 1) as f64 / self.lambda_warmup as f64).min(1.0)
        }
    }

    /// Gate parameters the forward pass needs, if the masks are stochastic.
    pub fn gates(&self) -> Option<HardConcreteParams> {
        (self.kind == PrunerKind::L0).then_some(self.hard_concrete)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A prunable weight matrix (`out × in`) with its scores and current mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLayer {
    pub name: String,
    pub weight_id: ParamId,
    pub score_id: ParamId,
    pub weight: Tensor2D,
    pub scores: Tensor2D,
    pub mask: Mask,
    /// Frozen hard-concrete noise used by the next training forward pass.
    pub noise: Option<Tensor2D>,
}

impl MaskedLayer {
    pub fn new(name: impl Into<String>, weight_id: ParamId, score_id: ParamId, weight: Tensor2D) -> Self {
        let (r, c) = weight.shape();
        Self {
            name: name.into(),
            weight_id,
            score_id,
            scores: Tensor2D::zeros(r, c),
            mask: Mask::ones(r, c),
            weight,
            noise: None,
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }

    /// Mask and optional `∂M/∂S` used by a forward pass.
    pub fn forward_mask(
        &self,
        gates: Option<&HardConcreteParams>,
        mode: Mode,
    ) -> Result<(Tensor2D, Option<Tensor2D>)> {
        match (gates, mode) {
            (None, _) => Ok((self.mask.tensor().clone(), None)),
            (Some(p), Mode::Eval) => Ok((hard_concrete_test_mask(&self.scores, p).into_tensor(), None)),
            (Some(p), Mode::Train) => {
                let noise = self.noise.as_ref().ok_or_else(|| {
                    Error::Contract(format!("layer {} has no hard-concrete noise drawn", self.name))
                })?;
                let sample = hard_concrete_sample(&self.scores, p, noise)?;
                let factor = sample.score_factor(p);
                Ok((sample.mask.into_tensor(), Some(factor)))
            }
        }
    }

    /// Mask used for reporting: the current selection mask, or the
    /// deterministic gate for L0.
    pub fn report_mask(&self, gates: Option<&HardConcreteParams>) -> Mask {
        match gates {
            Some(p) => hard_concrete_test_mask(&self.scores, p),
            None => self.mask.clone(),
        }
    }
}

/// Sets the initial scores of every layer.
pub fn init_scores(layers: &mut [MaskedLayer], config: &PrunerConfig) {
    for layer in layers {
        layer.scores = match config.kind {
            PrunerKind::Magnitude => layer.weight.map(f64::abs),
            _ => {
                let (r, c) = layer.shape();
                Tensor2D::filled(r, c, config.score_init)
            }
        };
    }
}

/// Masks for every layer. `keep` is required for the Top-v variants. For L0
/// in training mode the layers' frozen noise is used.
pub fn compute_masks(
    layers: &[MaskedLayer],
    config: &PrunerConfig,
    keep: Option<f64>,
    mode: Mode,
) -> Result<Vec<Mask>> {
    match config.kind {
        PrunerKind::Magnitude | PrunerKind::Movement => {
            let keep = keep.ok_or_else(|| {
                Error::config(format!("{} pruning needs a kept fraction", config.kind))
            })?;
            let magnitudes: Vec<Tensor2D>;
            let scores: Vec<&Tensor2D> = if config.kind == PrunerKind::Magnitude {
                magnitudes = layers.iter().map(|l| l.weight.map(f64::abs)).collect();
                magnitudes.iter().collect()
            } else {
                layers.iter().map(|l| &l.scores).collect()
            };
            match config.locality {
                Locality::Local => scores.iter().map(|s| topv_local(s, keep)).collect(),
                Locality::Global => topv_global(&scores, keep),
            }
        }
        PrunerKind::SoftMovement => Ok(layers
            .iter()
            .map(|l| threshold_mask(&l.scores, config.threshold))
            .collect()),
        PrunerKind::L0 => layers
            .iter()
            .map(|l| {
                let (m, _) = l.forward_mask(Some(&config.hard_concrete), mode)?;
                Mask::new(m)
            })
            .collect(),
    }
}

/// Draws fresh gate noise (L0 only) and stores the next masks on the layers.
pub fn refresh_masks<R: Rng + ?Sized>(
    layers: &mut [MaskedLayer],
    config: &PrunerConfig,
    keep: Option<f64>,
    rng: &mut R,
) -> Result<()> {
    if config.kind == PrunerKind::L0 {
        for layer in layers.iter_mut() {
            let (r, c) = layer.shape();
            layer.noise = Some(uniform_noise(r, c, rng));
        }
    }
    let masks = compute_masks(layers, config, keep, Mode::Train)?;
    for (layer, mask) in layers.iter_mut().zip(masks) {
        layer.mask = mask;
    }
    Ok(())
}

/// Regularization node over the score nodes, or `None` when the variant has
/// no regularizer (or λ is zero).
pub fn regularization_term(
    graph: &mut ComputeGraph,
    score_nodes: &[NodeId],
    config: &PrunerConfig,
    step: usize,
) -> Result<Option<NodeId>> {
    let lambda = config.lambda_at(step);
    if lambda == 0.0 || !matches!(config.kind, PrunerKind::SoftMovement | PrunerKind::L0) {
        return Ok(None);
    }
    let mut total: Option<NodeId> = None;
    for &s in score_nodes {
        let term = match config.kind {
            PrunerKind::SoftMovement => {
                let sig = graph.sigmoid(s);
                graph.sum(sig)
            }
            _ => masking::expected_l0_node(graph, s, &config.hard_concrete),
        };
        total = Some(match total {
            Some(acc) => graph.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.map(|t| graph.scale(t, lambda)))
}

/// Value of the regularizer for the current scores, for reporting.
pub fn regularization_value(layers: &[MaskedLayer], config: &PrunerConfig, step: usize) -> f64 {
    let lambda = config.lambda_at(step);
    let raw: f64 = match config.kind {
        PrunerKind::SoftMovement => layers
            .iter()
            .flat_map(|l| l.scores.as_slice())
            .map(|&s| masking::logistic(s))
            .sum(),
        PrunerKind::L0 => layers
            .iter()
            .map(|l| masking::expected_l0(&l.scores, &config.hard_concrete))
            .sum(),
        _ => 0.0,
    };
    lambda * raw
}

/// Post-weight-update pruning step: moves learned scores along `−∂L/∂S`
/// (or resets them to `|W|` for magnitude pruning) and then refreshes masks.
pub fn pruner_step<R: Rng + ?Sized>(
    layers: &mut [MaskedLayer],
    grads: &GradientStore,
    config: &PrunerConfig,
    optimizer: &mut Optimizer,
    score_lr: f64,
    keep: Option<f64>,
    rng: &mut R,
) -> Result<()> {
    if config.kind.has_trainable_scores() {
        for layer in layers.iter_mut() {
            let grad = grads.param(layer.score_id).ok_or_else(|| {
                Error::Contract(format!("no score gradient for layer {}", layer.name))
            })?;
            if config.flip_score_gradient {
                optimizer.step(layer.score_id, &mut layer.scores, &grad.scale(-1.0), score_lr);
            } else {
                optimizer.step(layer.score_id, &mut layer.scores, grad, score_lr);
            }
        }
    } else {
        for layer in layers.iter_mut() {
            layer.scores = layer.weight.map(f64::abs);
        }
    }
    refresh_masks(layers, config, keep, rng)
}
