//! Small prunable networks built from [`MaskedLayer`]s.
//!
//! Only the hidden weight matrices are prunable. Biases, the classification
//! head and (for the transformer) the input embeddings stay dense; the
//! embeddings are frozen as well.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ComputeGraph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::masking::{HardConcreteParams, Mask};
use crate::pruners::{MaskedLayer, Mode};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub classes: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_width: 64,
            hidden_layers: 6,
            classes: 8,
        }
    }
}

/// Single-head encoder. The input vector is cut into `seq_len` tokens of
/// `input_dim / seq_len` features each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub seq_len: usize,
    pub blocks: usize,
    pub classes: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            d_model: 32,
            seq_len: 16,
            blocks: 2,
            classes: 8,
        }
    }
}

impl TransformerConfig {
    pub fn token_dim(&self) -> usize {
        self.input_dim / self.seq_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Mlp(MlpConfig),
    MiniTransformer(TransformerConfig),
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Mlp(c) => c.input_dim,
            Architecture::MiniTransformer(c) => c.input_dim,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Architecture::Mlp(c) => c.classes,
            Architecture::MiniTransformer(c) => c.classes,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Mlp(_) => "mlp",
            Architecture::MiniTransformer(_) => "mini_transformer",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        match self {
            Architecture::Mlp(c) => {
                positive("input_dim", c.input_dim)?;
                positive("hidden_width", c.hidden_width)?;
                positive("hidden_layers", c.hidden_layers)?;
            }
            Architecture::MiniTransformer(c) => {
                positive("input_dim", c.input_dim)?;
                positive("d_model", c.d_model)?;
                positive("seq_len", c.seq_len)?;
                positive("blocks", c.blocks)?;
                if c.input_dim % c.seq_len != 0 {
                    return Err(Error::config(format!(
                        "input_dim {} is not a multiple of seq_len {}",
                        c.input_dim, c.seq_len
                    )));
                }
            }
        }
        if self.classes() < 2 {
            return Err(Error::config("need at least two classes"));
        }
        Ok(())
    }
}

/// A parameter that is never pruned.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParam {
    pub name: String,
    pub id: ParamId,
    pub value: Tensor2D,
    pub trainable: bool,
}

/// Per-layer entry of the remaining-weights report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSparsity {
    pub layer: String,
    pub kept: usize,
    pub total: usize,
}

impl LayerSparsity {
    pub fn kept_fraction(&self) -> f64 {
        self.kept as f64 / self.total as f64
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: NodeId,
    /// Input node of each masked layer.
    pub layer_inputs: Vec<NodeId>,
    /// Pre-bias output node `a` of each masked layer.
    pub layer_outputs: Vec<NodeId>,
    pub weight_nodes: Vec<NodeId>,
    pub score_nodes: Vec<NodeId>,
}

#[derive(Default)]
struct Trace {
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    weights: Vec<NodeId>,
    scores: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    pub layers: Vec<MaskedLayer>,
    pub dense: Vec<DenseParam>,
    /// Hard-concrete parameters when masks are L0 gates.
    pub gates: Option<HardConcreteParams>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor2D {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor2D::from_fn(rows, cols, |_, _| dist.sample(&mut self.rng))
    }
}

impl Model {
    /// Randomly initialized dense model.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut layers = Vec::new();
        let mut dense = Vec::new();
        let add_layer = |layers: &mut Vec<MaskedLayer>, name: String, w: Tensor2D| {
            let l = layers.len();
            layers.push(MaskedLayer::new(name, ParamId(2 * l), ParamId(2 * l + 1), w));
        };
        let mut pending_dense: Vec<(String, Tensor2D, bool)> = Vec::new();
        match arch {
            Architecture::Mlp(c) => {
                let mut fan_in = c.input_dim;
                for l in 0..c.hidden_layers {
                    let w = init.normal(c.hidden_width, fan_in, (2.0 / fan_in as f64).sqrt());
                    add_layer(&mut layers, format!("hidden{l}"), w);
                    pending_dense.push((format!("hidden{l}.bias"), Tensor2D::zeros(1, c.hidden_width), true));
                    fan_in = c.hidden_width;
                }
                let head = init.normal(c.classes, fan_in, (1.0 / fan_in as f64).sqrt());
                pending_dense.push(("head.weight".into(), head, true));
                pending_dense.push(("head.bias".into(), Tensor2D::zeros(1, c.classes), true));
            }
            Architecture::MiniTransformer(c) => {
                let d = c.d_model;
                let ff = 4 * d;
                let token = init.normal(c.token_dim(), d, 0.5);
                let position = init.normal(c.seq_len, d, 0.25);
                pending_dense.push(("embed.token".into(), token, false));
                pending_dense.push(("embed.position".into(), position, false));
                let proj_std = (1.0 / d as f64).sqrt();
                for b in 0..c.blocks {
                    for part in ["query", "key", "value", "output"] {
                        let w = init.normal(d, d, proj_std);
                        add_layer(&mut layers, format!("block{b}.{part}"), w);
                    }
                    let w_in = init.normal(ff, d, (2.0 / d as f64).sqrt());
                    add_layer(&mut layers, format!("block{b}.ffn_in"), w_in);
                    let w_out = init.normal(d, ff, 0.5 * (1.0 / ff as f64).sqrt());
                    add_layer(&mut layers, format!("block{b}.ffn_out"), w_out);
                    pending_dense.push((format!("block{b}.ffn_in.bias"), Tensor2D::zeros(1, ff), true));
                    pending_dense.push((format!("block{b}.ffn_out.bias"), Tensor2D::zeros(1, d), true));
                }
                let head = init.normal(c.classes, d, proj_std);
                pending_dense.push(("head.weight".into(), head, true));
                pending_dense.push(("head.bias".into(), Tensor2D::zeros(1, c.classes), true));
            }
        }
        let base = 2 * layers.len();
        for (i, (name, value, trainable)) in pending_dense.into_iter().enumerate() {
            dense.push(DenseParam {
                name,
                id: ParamId(base + i),
                value,
                trainable,
            });
        }
        Ok(Self {
            arch,
            layers,
            dense,
            gates: None,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    /// Total number of prunable weights.
    pub fn prunable_count(&self) -> usize {
        self.layers.iter().map(MaskedLayer::len).sum()
    }

    pub fn dense_param(&self, name: &str) -> Option<&DenseParam> {
        self.dense.iter().find(|p| p.name == name)
    }

    fn dense_value(&self, name: &str) -> &Tensor2D {
        &self
            .dense_param(name)
            .unwrap_or_else(|| panic!("model is missing dense parameter {name}"))
            .value
    }

    fn dense_node(&self, graph: &mut ComputeGraph, name: &str) -> NodeId {
        let p = self
            .dense_param(name)
            .unwrap_or_else(|| panic!("model is missing dense parameter {name}"));
        if p.trainable {
            graph.param(p.id, p.value.clone())
        } else {
            graph.constant(p.value.clone())
        }
    }

    /// Replaces every mask (no pruning).
    pub fn reset_masks(&mut self) {
        for l in &mut self.layers {
            let (r, c) = l.shape();
            l.mask = Mask::ones(r, c);
        }
    }

    fn masked(
        &self,
        graph: &mut ComputeGraph,
        pass: &mut Trace,
        layer: usize,
        input: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let l = &self.layers[layer];
        let (mask, factor) = l.forward_mask(self.gates.as_ref(), mode)?;
        let w = graph.param(l.weight_id, l.weight.clone());
        let s = graph.param(l.score_id, l.scores.clone());
        let a = graph.masked_linear(input, w, Some(s), &mask, factor.as_ref())?;
        pass.inputs.push(input);
        pass.outputs.push(a);
        pass.weights.push(w);
        pass.scores.push(s);
        Ok(a)
    }

    /// Builds the forward pass for a batch `x` (one example per row).
    pub fn forward(&self, graph: &mut ComputeGraph, x: &Tensor2D, mode: Mode) -> Result<ForwardPass> {
        if x.cols() != self.arch.input_dim() {
            return Err(Error::Dimension {
                op: "model input",
                left: x.shape(),
                right: (x.rows(), self.arch.input_dim()),
            });
        }
        let mut pass = Trace::default();
        let features = match self.arch {
            Architecture::Mlp(c) => {
                let mut h = graph.constant(x.clone());
                for l in 0..c.hidden_layers {
                    let a = self.masked(graph, &mut pass, l, h, mode)?;
                    let b = self.dense_node(graph, &format!("hidden{l}.bias"));
                    let z = graph.add_row_bias(a, b)?;
                    h = graph.relu(z);
                }
                h
            }
            Architecture::MiniTransformer(c) => self.encoder(graph, &mut pass, x, &c, mode)?,
        };
        let head_w = self.dense_node(graph, "head.weight");
        let head_b = self.dense_node(graph, "head.bias");
        let z = graph.matmul_transposed(features, head_w)?;
        let logits = graph.add_row_bias(z, head_b)?;
        Ok(ForwardPass {
            logits,
            layer_inputs: pass.inputs,
            layer_outputs: pass.outputs,
            weight_nodes: pass.weights,
            score_nodes: pass.scores,
        })
    }

    fn encoder(
        &self,
        graph: &mut ComputeGraph,
        pass: &mut Trace,
        x: &Tensor2D,
        c: &TransformerConfig,
        mode: Mode,
    ) -> Result<NodeId> {
        let (batch, td, len) = (x.rows(), c.token_dim(), c.seq_len);
        let tokens = Tensor2D::from_fn(batch * len, td, |r, j| x.get(r / len, (r % len) * td + j));
        let position = self.dense_value("embed.position");
        let tiled = Tensor2D::from_fn(batch * len, c.d_model, |r, j| position.get(r % len, j));
        let tokens = graph.constant(tokens);
        let embed = self.dense_node(graph, "embed.token");
        let projected = graph.matmul(tokens, embed)?;
        let tiled = graph.constant(tiled);
        let mut h = graph.add(projected, tiled)?;
        let scale = 1.0 / (c.d_model as f64).sqrt();
        for b in 0..c.blocks {
            let base = 6 * b;
            let q = self.masked(graph, pass, base, h, mode)?;
            let k = self.masked(graph, pass, base + 1, h, mode)?;
            let v = self.masked(graph, pass, base + 2, h, mode)?;
            let scores = graph.segment_scores(q, k, len, scale)?;
            let attn = graph.row_softmax(scores);
            let ctx = graph.segment_mix(attn, v, len)?;
            let o = self.masked(graph, pass, base + 3, ctx, mode)?;
            let h1 = graph.add(h, o)?;
            let f = self.masked(graph, pass, base + 4, h1, mode)?;
            let bias_in = self.dense_node(graph, &format!("block{b}.ffn_in.bias"));
            let f = graph.add_row_bias(f, bias_in)?;
            let f = graph.relu(f);
            let f2 = self.masked(graph, pass, base + 5, f, mode)?;
            let bias_out = self.dense_node(graph, &format!("block{b}.ffn_out.bias"));
            let f2 = graph.add_row_bias(f2, bias_out)?;
            h = graph.add(h1, f2)?;
        }
        graph.segment_mean_pool(h, len)
    }

    /// Logits for a batch without keeping the graph.
    pub fn logits(&self, x: &Tensor2D, mode: Mode) -> Result<Tensor2D> {
        let mut graph = ComputeGraph::new();
        let pass = self.forward(&mut graph, x, mode)?;
        Ok(graph.value(pass.logits).clone())
    }

    /// Kept and total entries of each prunable matrix, using the evaluation
    /// mask (the deterministic gate for L0).
    pub fn remaining_weights_report(&self) -> Vec<LayerSparsity> {
        self.layers
            .iter()
            .map(|l| LayerSparsity {
                layer: l.name.clone(),
                kept: l.report_mask(self.gates.as_ref()).kept(),
                total: l.len(),
            })
            .collect()
    }

    /// Fraction of prunable weights that are kept.
    pub fn kept_fraction(&self) -> f64 {
        let kept: usize = self.remaining_weights_report().iter().map(|r| r.kept).sum();
        kept as f64 / self.prunable_count() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_mlp() -> Model {
        Model::new(
            Architecture::Mlp(MlpConfig {
                input_dim: 5,
                hidden_width: 4,
                hidden_layers: 3,
                classes: 3,
            }),
            7,
        )
        .unwrap()
    }

    fn batch(rows: usize, cols: usize) -> Tensor2D {
        Tensor2D::from_fn(rows, cols, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0)
    }

    #[test]
    fn default_mlp_has_six_masked_layers() {
        let m = Model::new(Architecture::Mlp(MlpConfig::default()), 0).unwrap();
        assert_eq!(m.layers.len(), 6);
        assert_eq!(m.prunable_count(), 32 * 64 + 5 * 64 * 64);
    }

    #[test]
    fn transformer_has_twelve_masked_layers() {
        let m = Model::new(Architecture::MiniTransformer(TransformerConfig::default()), 0).unwrap();
        assert_eq!(m.layers.len(), 12);
        assert_eq!(m.prunable_count(), 2 * (4 * 32 * 32 + 2 * 32 * 128));
        let logits = m.logits(&batch(3, 32), Mode::Eval).unwrap();
        assert_eq!(logits.shape(), (3, 8));
        assert!(logits.is_finite());
    }

    #[test]
    fn zero_masks_give_bias_only_logits() {
        let mut m = small_mlp();
        for l in &mut m.layers {
            let (r, c) = l.shape();
            l.mask = Mask::zeros(r, c);
        }
        for p in &mut m.dense {
            if p.name.ends_with(".bias") {
                p.value = p.value.map(|_| 0.25);
            }
        }
        let logits = m.logits(&batch(2, 5), Mode::Eval).unwrap();
        // Every hidden unit is relu(0.25); the head then sees a constant vector.
        let head = &m.dense_param("head.weight").unwrap().value;
        for i in 0..2 {
            for k in 0..3 {
                let expected: f64 = (0..4).map(|j| head.get(k, j) * 0.25).sum::<f64>() + 0.25;
                assert!((logits.get(i, k) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let m = small_mlp();
        assert!(matches!(
            m.logits(&batch(2, 4), Mode::Eval),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn fresh_model_reports_full_density() {
        let m = small_mlp();
        for r in m.remaining_weights_report() {
            assert_eq!(r.kept, r.total);
        }
        assert_eq!(m.kept_fraction(), 1.0);
    }
}
