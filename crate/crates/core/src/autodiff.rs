//! Reverse-mode automatic differentiation over [`Tensor2D`] values.
//!
//! A [`ComputeGraph`] is an append-only tape. Every operation evaluates
//! eagerly, caches its output in a new node and remembers its parents, so
//! parents always precede children and [`ComputeGraph::backward`] is a single
//! sweep in reverse insertion order.
//!
//! Besides the usual arithmetic, the tape has a fused [`ComputeGraph::masked_linear`]
//! node whose backward pass routes gradients to a score matrix that takes no
//! part in the forward computation (the straight-through estimator), and a
//! handful of segment operations used by single-head attention over batches
//! of fixed-length sequences.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Position of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable tensor, chosen by the owner of the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Constant,
    MatMul(NodeId, NodeId),
    MatMulTransposed(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor2D,
    },
    KdDivergence {
        student: NodeId,
        teacher_probs: Tensor2D,
        student_probs: Tensor2D,
        temperature: f64,
    },
    MaskedLinear {
        input: NodeId,
        weight: NodeId,
        score: Option<NodeId>,
        mask: Tensor2D,
        score_factor: Option<Tensor2D>,
    },
    RowSoftmax(NodeId),
    SegmentScores {
        query: NodeId,
        key: NodeId,
        seg_len: usize,
        scale: f64,
    },
    SegmentMix {
        attn: NodeId,
        value: NodeId,
        seg_len: usize,
    },
    SegmentMeanPool {
        input: NodeId,
        seg_len: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor2D,
}

#[derive(Debug, Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    differentiated: bool,
}

/// Gradients produced by one backward pass.
///
/// Parameter gradients are keyed by [`ParamId`]; intermediate node gradients
/// (e.g. `∂L/∂a` for a layer output) are kept as well so tests and oracles can
/// inspect them.
#[derive(Debug, Clone)]
pub struct GradientStore {
    params: BTreeMap<ParamId, Tensor2D>,
    nodes: Vec<Option<Tensor2D>>,
}

impl GradientStore {
    pub fn param(&self, id: ParamId) -> Option<&Tensor2D> {
        self.params.get(&id)
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor2D> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor2D)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor2D::is_finite)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `logits / temperature` with the max subtracted.
pub fn softmax_rows(logits: &Tensor2D, temperature: f64) -> Tensor2D {
    let (rows, cols) = logits.shape();
    let mut out = Tensor2D::zeros(rows, cols);
    for i in 0..rows {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v / temperature - max).exp();
            out.set(i, j, e);
            total += e;
        }
        for j in 0..cols {
            out.set(i, j, out.get(i, j) / total);
        }
    }
    out
}

/// Row-wise log-softmax of `logits / temperature`, via log-sum-exp.
pub fn log_softmax_rows(logits: &Tensor2D, temperature: f64) -> Tensor2D {
    let (rows, cols) = logits.shape();
    let mut out = Tensor2D::zeros(rows, cols);
    for i in 0..rows {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        // The max term contributes exactly 1; summing the rest first keeps
        // precision for confident rows.
        let mut rest = 0.0;
        let mut seen_max = false;
        for &v in row {
            let shifted = v / temperature - max;
            if !seen_max && shifted == 0.0 {
                seen_max = true;
            } else {
                rest += shifted.exp();
            }
        }
        let log_norm = rest.ln_1p();
        for (j, &v) in row.iter().enumerate() {
            out.set(i, j, (v / temperature - max) - log_norm);
        }
    }
    out
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the tape so it can be reused for a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.differentiated = false;
    }

    pub fn value(&self, node: NodeId) -> &Tensor2D {
        &self.nodes[node.0].value
    }

    fn push(&mut self, op: Op, value: Tensor2D) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor2D) -> NodeId {
        self.push(Op::Param(id), value)
    }

    pub fn constant(&mut self, value: Tensor2D) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// `a · bᵀ`.
    pub fn matmul_transposed(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul_transposed(self.value(b))?;
        Ok(self.push(Op::MatMulTransposed(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Adds a `1×C` bias row to every row of an `N×C` input.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Dimension {
                op: "add_row_bias",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let b = bv.row(0).to_vec();
        let value = Tensor2D::from_fn(xv.rows(), xv.cols(), |i, j| xv.get(i, j) + b[j]);
        Ok(self.push(Op::AddRowBias(x, bias), value))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), value))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v + c);
        self.push(Op::AddScalar(a), value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor2D::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, cols) = lv.shape();
        if cols < 2 {
            return Err(Error::config("cross-entropy needs at least two classes"));
        }
        if labels.len() != rows {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                left: (rows, cols),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                len: cols,
            });
        }
        let log_probs = log_softmax_rows(lv, 1.0);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| log_probs.get(i, l))
            .sum::<f64>()
            / rows as f64;
        let probs = log_probs.map(f64::exp);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor2D::scalar(loss),
        ))
    }

    /// `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`, averaged over rows.
    /// The teacher enters as plain data; only the student receives gradient.
    pub fn kd_divergence(
        &mut self,
        teacher_logits: &Tensor2D,
        student: NodeId,
        temperature: f64,
    ) -> Result<NodeId> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config(format!(
                "distillation temperature must be positive, got {temperature}"
            )));
        }
        let sv = self.value(student);
        teacher_logits.check_same_shape(sv, "kd_divergence")?;
        let log_p = log_softmax_rows(teacher_logits, temperature);
        let log_q = log_softmax_rows(sv, temperature);
        let rows = sv.rows();
        let mut kl = 0.0;
        for (lp, lq) in log_p.as_slice().iter().zip(log_q.as_slice()) {
            kl += lp.exp() * (lp - lq);
        }
        let loss = temperature * temperature * kl / rows as f64;
        Ok(self.push(
            Op::KdDivergence {
                student,
                teacher_probs: log_p.map(f64::exp),
                student_probs: log_q.map(f64::exp),
                temperature,
            },
            Tensor2D::scalar(loss),
        ))
    }

    /// `out = input · (weight ⊙ mask)ᵀ`, with `weight` shaped `out × in`.
    ///
    /// Backward gives `∂L/∂weight = (Gᵀ·input) ⊙ mask` and, if a score node is
    /// attached, `∂L/∂score = (Gᵀ·input) ⊙ weight [⊙ score_factor]`: the mask
    /// is bypassed on the score path. `score_factor` carries `∂mask/∂score`
    /// when the mask is a differentiable function of the scores.
    pub fn masked_linear(
        &mut self,
        input: NodeId,
        weight: NodeId,
        score: Option<NodeId>,
        mask: &Tensor2D,
        score_factor: Option<&Tensor2D>,
    ) -> Result<NodeId> {
        let wv = self.value(weight);
        wv.check_same_shape(mask, "masked_linear mask")?;
        if let Some(s) = score {
            wv.check_same_shape(self.value(s), "masked_linear score")?;
        }
        if let Some(f) = score_factor {
            wv.check_same_shape(f, "masked_linear score factor")?;
        }
        let effective = wv.hadamard(mask)?;
        let value = self.value(input).matmul_transposed(&effective)?;
        Ok(self.push(
            Op::MaskedLinear {
                input,
                weight,
                score,
                mask: mask.clone(),
                score_factor: score_factor.cloned(),
            },
            value,
        ))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows(self.value(a), 1.0);
        self.push(Op::RowSoftmax(a), value)
    }

    /// Attention logits within fixed-length segments: for row `r` of segment
    /// `b`, `out[r, m] = scale · ⟨query[r], key[b·L + m]⟩`.
    pub fn segment_scores(
        &mut self,
        query: NodeId,
        key: NodeId,
        seg_len: usize,
        scale: f64,
    ) -> Result<NodeId> {
        let (q, k) = (self.value(query), self.value(key));
        q.check_same_shape(k, "segment_scores")?;
        check_segments(q, seg_len, "segment_scores")?;
        let (n, d) = q.shape();
        let value = Tensor2D::from_fn(n, seg_len, |r, m| {
            let base = (r / seg_len) * seg_len;
            let (qr, kr) = (q.row(r), k.row(base + m));
            scale * (0..d).map(|c| qr[c] * kr[c]).sum::<f64>()
        });
        Ok(self.push(
            Op::SegmentScores {
                query,
                key,
                seg_len,
                scale,
            },
            value,
        ))
    }

    /// `out[r] = Σ_m attn[r, m] · value[b·L + m]` within each segment.
    pub fn segment_mix(&mut self, attn: NodeId, value: NodeId, seg_len: usize) -> Result<NodeId> {
        let (a, v) = (self.value(attn), self.value(value));
        check_segments(v, seg_len, "segment_mix")?;
        if a.shape() != (v.rows(), seg_len) {
            return Err(Error::Dimension {
                op: "segment_mix",
                left: a.shape(),
                right: v.shape(),
            });
        }
        let (n, d) = v.shape();
        let out = Tensor2D::from_fn(n, d, |r, c| {
            let base = (r / seg_len) * seg_len;
            (0..seg_len).map(|m| a.get(r, m) * v.get(base + m, c)).sum()
        });
        Ok(self.push(
            Op::SegmentMix {
                attn,
                value,
                seg_len,
            },
            out,
        ))
    }

    /// Mean of each block of `seg_len` consecutive rows.
    pub fn segment_mean_pool(&mut self, input: NodeId, seg_len: usize) -> Result<NodeId> {
        let x = self.value(input);
        check_segments(x, seg_len, "segment_mean_pool")?;
        let (n, d) = x.shape();
        let out = Tensor2D::from_fn(n / seg_len, d, |b, c| {
            (0..seg_len).map(|l| x.get(b * seg_len + l, c)).sum::<f64>() / seg_len as f64
        });
        Ok(self.push(Op::SegmentMeanPool { input, seg_len }, out))
    }

    fn parents(op: &Op) -> Vec<NodeId> {
        match op {
            Op::Param(_) | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::MatMulTransposed(a, b)
            | Op::Add(a, b)
            | Op::AddRowBias(a, b)
            | Op::Hadamard(a, b) => vec![*a, *b],
            Op::Relu(a) | Op::Sigmoid(a) | Op::AddScalar(a) | Op::Scale(a, _) | Op::Sum(a) => {
                vec![*a]
            }
            Op::RowSoftmax(a) => vec![*a],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::KdDivergence { student, .. } => vec![*student],
            Op::MaskedLinear {
                input,
                weight,
                score,
                ..
            } => {
                let mut p = vec![*input, *weight];
                p.extend(score);
                p
            }
            Op::SegmentScores { query, key, .. } => vec![*query, *key],
            Op::SegmentMix { attn, value, .. } => vec![*attn, *value],
            Op::SegmentMeanPool { input, .. } => vec![*input],
        }
    }

    /// Propagates `∂loss/∂·` through the tape. The loss must be a 1×1 node.
    /// A tape can be differentiated once; call [`reset`](Self::reset) to reuse it.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientStore> {
        if self.differentiated {
            return Err(Error::Contract(
                "backward already ran on this graph; reset it first".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Index {
                what: "graph node",
                index: loss.0,
                len: self.nodes.len(),
            });
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.differentiated = true;

        let n = loss.0 + 1;
        let mut reachable = vec![false; n];
        reachable[loss.0] = true;
        for idx in (0..n).rev() {
            if reachable[idx] {
                for p in Self::parents(&self.nodes[idx].op) {
                    reachable[p.0] = true;
                }
            }
        }

        let mut grads: Vec<Option<Tensor2D>> = vec![None; n];
        grads[loss.0] = Some(Tensor2D::scalar(1.0));
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params: BTreeMap<ParamId, Tensor2D> = BTreeMap::new();
        for idx in 0..n {
            if let Op::Param(id) = self.nodes[idx].op {
                if !reachable[idx] {
                    continue;
                }
                let shape = self.nodes[idx].value.shape();
                let g = grads[idx]
                    .clone()
                    .unwrap_or_else(|| Tensor2D::zeros(shape.0, shape.1));
                params
                    .entry(id)
                    .and_modify(|acc| acc.add_assign(&g))
                    .or_insert(g);
            }
        }
        Ok(GradientStore {
            params,
            nodes: grads,
        })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) {
        fn acc(grads: &mut [Option<Tensor2D>], node: NodeId, contribution: Tensor2D) {
            match &mut grads[node.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot => *slot = Some(contribution),
            }
        }
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Param(_) | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.matmul_transposed(bv).expect("shapes fixed at forward"));
                acc(grads, *b, av.transposed_matmul(g).expect("shapes fixed at forward"));
            }
            Op::MatMulTransposed(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.matmul(bv).expect("shapes fixed at forward"));
                acc(grads, *b, g.transposed_matmul(av).expect("shapes fixed at forward"));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRowBias(x, bias) => {
                acc(grads, *x, g.clone());
                let cols = g.cols();
                let col_sums = Tensor2D::from_fn(1, cols, |_, j| (0..g.rows()).map(|i| g.get(i, j)).sum());
                acc(grads, *bias, col_sums);
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.hadamard(bv).expect("shapes fixed at forward"));
                acc(grads, *b, g.hadamard(av).expect("shapes fixed at forward"));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = g
                    .zip_map(av, "relu backward", |gv, x| if x > 0.0 { gv } else { 0.0 })
                    .expect("shapes fixed at forward");
                acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .zip_map(out, "sigmoid backward", |gv, s| gv * s * (1.0 - s))
                    .expect("shapes fixed at forward");
                acc(grads, *a, d);
            }
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Scale(a, c) => acc(grads, *a, g.scale(*c)),
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, Tensor2D::filled(r, c, g.item()));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let rows = probs.rows() as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d.set(i, l, d.get(i, l) - 1.0);
                }
                acc(grads, *logits, d.scale(g.item() / rows));
            }
            Op::KdDivergence {
                student,
                teacher_probs,
                student_probs,
                temperature,
            } => {
                let rows = student_probs.rows() as f64;
                let d = student_probs
                    .zip_map(teacher_probs, "kd backward", |q, p| q - p)
                    .expect("shapes fixed at forward");
                acc(grads, *student, d.scale(g.item() * temperature / rows));
            }
            Op::MaskedLinear {
                input,
                weight,
                score,
                mask,
                score_factor,
            } => {
                let (xv, wv) = (self.value(*input), self.value(*weight));
                let effective = wv.hadamard(mask).expect("shapes fixed at forward");
                acc(grads, *input, g.matmul(&effective).expect("shapes fixed at forward"));
                // Gᵀ·X is the gradient with respect to the effective weight.
                let outer = g.transposed_matmul(xv).expect("shapes fixed at forward");
                acc(grads, *weight, outer.hadamard(mask).expect("same shape"));
                if let Some(s) = score {
                    let mut ds = outer.hadamard(wv).expect("same shape");
                    if let Some(f) = score_factor {
                        ds = ds.hadamard(f).expect("same shape");
                    }
                    acc(grads, *s, ds);
                }
            }
            Op::RowSoftmax(a) => {
                let (rows, cols) = out.shape();
                let mut d = Tensor2D::zeros(rows, cols);
                for i in 0..rows {
                    let dot: f64 = (0..cols).map(|j| g.get(i, j) * out.get(i, j)).sum();
                    for j in 0..cols {
                        d.set(i, j, out.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                acc(grads, *a, d);
            }
            Op::SegmentScores {
                query,
                key,
                seg_len,
                scale,
            } => {
                let (q, k) = (self.value(*query), self.value(*key));
                let (n, d) = q.shape();
                let mut dq = Tensor2D::zeros(n, d);
                let mut dk = Tensor2D::zeros(n, d);
                for r in 0..n {
                    let base = (r / seg_len) * seg_len;
                    for m in 0..*seg_len {
                        let gm = g.get(r, m) * scale;
                        if gm == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            dq.set(r, c, dq.get(r, c) + gm * k.get(base + m, c));
                            dk.set(base + m, c, dk.get(base + m, c) + gm * q.get(r, c));
                        }
                    }
                }
                acc(grads, *query, dq);
                acc(grads, *key, dk);
            }
            Op::SegmentMix {
                attn,
                value,
                seg_len,
            } => {
                let (a, v) = (self.value(*attn), self.value(*value));
                let (n, d) = v.shape();
                let mut da = Tensor2D::zeros(n, *seg_len);
                let mut dv = Tensor2D::zeros(n, d);
                for r in 0..n {
                    let base = (r / seg_len) * seg_len;
                    for m in 0..*seg_len {
                        let arm = a.get(r, m);
                        let mut dot = 0.0;
                        for c in 0..d {
                            dot += g.get(r, c) * v.get(base + m, c);
                            dv.set(base + m, c, dv.get(base + m, c) + arm * g.get(r, c));
                        }
                        da.set(r, m, dot);
                    }
                }
                acc(grads, *attn, da);
                acc(grads, *value, dv);
            }
            Op::SegmentMeanPool { input, seg_len } => {
                let (n, d) = self.value(*input).shape();
                let inv = 1.0 / *seg_len as f64;
                let dx = Tensor2D::from_fn(n, d, |r, c| g.get(r / seg_len, c) * inv);
                acc(grads, *input, dx);
            }
        }
    }
}

fn check_segments(t: &Tensor2D, seg_len: usize, op: &'static str) -> Result<()> {
    if seg_len == 0 || !t.rows().is_multiple_of(seg_len) {
        return Err(Error::Dimension {
            op,
            left: t.shape(),
            right: (seg_len, 1),
        });
    }
    Ok(())
}
