//! Mask computations: Top-v selection (per matrix or pooled), fixed
//! thresholding, and hard-concrete gates.

use std::cmp::Ordering;

use rand::Rng;

use crate::autodiff::{ComputeGraph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// A mask over a weight matrix. Entries are 0/1 for selection masks and lie
/// in `[0, 1]` for hard-concrete gates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask(Tensor2D);

impl Mask {
    pub fn new(values: Tensor2D) -> Result<Self> {
        if let Some(v) = values.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("mask entry {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self(Tensor2D::ones(rows, cols))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(Tensor2D::zeros(rows, cols))
    }

    pub fn tensor(&self) -> &Tensor2D {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor2D {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    /// Number of strictly positive entries.
    pub fn kept(&self) -> usize {
        self.0.as_slice().iter().filter(|&&v| v > 0.0).count()
    }

    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.0.get(i, j) > 0.0
    }

    pub fn is_binary(&self) -> bool {
        self.0.as_slice().iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Number of entries kept by Top-v: `round(keep · count)` clamped to the count.
pub fn keep_count(keep: f64, count: usize) -> usize {
    ((keep * count as f64).round().max(0.0) as usize).min(count)
}

fn check_fraction(keep: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&keep) {
        return Err(Error::config(format!("kept fraction {keep} outside [0, 1]")));
    }
    Ok(())
}

/// Higher score first; ties go to the smaller position.
fn rank_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Positions of the `k` highest-ranked values under [`rank_order`], found by
/// quickselect.
fn select_top(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order((values[a], a), (values[b], b)));
        idx.truncate(k);
    }
    idx
}

/// Keeps the `round(keep · n)` largest scores of one matrix.
pub fn topv_local(scores: &Tensor2D, keep: f64) -> Result<Mask> {
    check_fraction(keep)?;
    let k = keep_count(keep, scores.len());
    let mut out = Tensor2D::zeros(scores.rows(), scores.cols());
    let slots = out.as_mut_slice();
    for i in select_top(scores.as_slice(), k) {
        slots[i] = 1.0;
    }
    Ok(Mask(out))
}

/// Keeps the `round(keep · Σn)` largest scores pooled over every matrix.
/// Ties are broken by matrix position, then flat index.
pub fn topv_global(scores: &[&Tensor2D], keep: f64) -> Result<Vec<Mask>> {
    if scores.is_empty() {
        return Err(Error::config("global Top-v needs at least one score matrix"));
    }
    check_fraction(keep)?;
    // Concatenation in input order makes the pooled position equal to the
    // (matrix, flat index) lexicographic order.
    let pooled: Vec<f64> = scores.iter().flat_map(|s| s.as_slice().iter().copied()).collect();
    let k = keep_count(keep, pooled.len());
    let mut flags = vec![0.0; pooled.len()];
    for i in select_top(&pooled, k) {
        flags[i] = 1.0;
    }
    let mut offset = 0;
    Ok(scores
        .iter()
        .map(|s| {
            let part = flags[offset..offset + s.len()].to_vec();
            offset += s.len();
            Mask(Tensor2D::new(s.rows(), s.cols(), part).expect("same shape as scores"))
        })
        .collect())
}

/// `M = (S > τ)`, strict.
pub fn threshold_mask(scores: &Tensor2D, threshold: f64) -> Mask {
    Mask(scores.map(|s| if s > threshold { 1.0 } else { 0.0 }))
}

/// Stretch-and-clip parameters of the hard-concrete distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardConcreteParams {
    /// Temperature `b > 0`.
    pub beta: f64,
    /// Lower stretch bound `l < 0`.
    pub lower: f64,
    /// Upper stretch bound `r > 1`.
    pub upper: f64,
}

impl Default for HardConcreteParams {
    fn default() -> Self {
        Self {
            beta: 2.0 / 3.0,
            lower: -0.1,
            upper: 1.1,
        }
    }
}

impl HardConcreteParams {
    pub fn new(beta: f64, lower: f64, upper: f64) -> Result<Self> {
        let p = Self { beta, lower, upper };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.lower < 0.0) || !(self.upper > 1.0) {
            return Err(Error::config(format!(
                "hard-concrete parameters need b > 0, l < 0, r > 1; got b={}, l={}, r={}",
                self.beta, self.lower, self.upper
            )));
        }
        Ok(())
    }

    /// Shift `−b·log(−l/r)` applied to a score in the open-gate probability.
    pub fn l0_shift(&self) -> f64 {
        -self.beta * (-self.lower / self.upper).ln()
    }

    /// Probability that the gate of a score is nonzero.
    pub fn open_probability(&self, score: f64) -> f64 {
        logistic(score + self.l0_shift())
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One hard-concrete draw with all intermediates.
#[derive(Debug, Clone)]
pub struct HardConcreteSample {
    /// `σ((log u − log(1−u) + S)/b)`.
    pub stretched: Tensor2D,
    /// `(r−l)·S̄ + l`.
    pub z: Tensor2D,
    /// `min(1, max(0, Z))`.
    pub mask: Mask,
}

impl HardConcreteSample {
    /// `∂M/∂S = ((r−l)/b)·S̄(1−S̄)·1{0 ≤ Z ≤ 1}`.
    pub fn score_factor(&self, params: &HardConcreteParams) -> Tensor2D {
        let c = (params.upper - params.lower) / params.beta;
        self.stretched
            .zip_map(&self.z, "hard-concrete factor", |s, z| {
                if (0.0..=1.0).contains(&z) {
                    c * s * (1.0 - s)
                } else {
                    0.0
                }
            })
            .expect("same shape by construction")
    }
}

/// Samples gates given uniform noise `u ∈ (0, 1)` of the same shape as `S`.
pub fn hard_concrete_sample(
    scores: &Tensor2D,
    params: &HardConcreteParams,
    noise: &Tensor2D,
) -> Result<HardConcreteSample> {
    params.validate()?;
    scores.check_same_shape(noise, "hard_concrete_sample")?;
    if let Some(u) = noise.as_slice().iter().find(|&&u| !(u > 0.0 && u < 1.0)) {
        return Err(Error::Domain(format!(
            "hard-concrete noise must lie strictly inside (0, 1), got {u}"
        )));
    }
    let stretched = scores
        .zip_map(noise, "hard_concrete_sample", |s, u| {
            logistic((u.ln() - (1.0 - u).ln() + s) / params.beta)
        })?;
    let z = stretched.map(|s| (params.upper - params.lower) * s + params.lower);
    let mask = Mask(z.map(|v| v.clamp(0.0, 1.0)));
    Ok(HardConcreteSample { stretched, z, mask })
}

/// Fresh uniform noise in the open interval (0, 1).
pub fn uniform_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    })
}

/// Deterministic evaluation gate `min(1, ReLU((r−l)σ(S) + l))`.
pub fn hard_concrete_test_mask(scores: &Tensor2D, params: &HardConcreteParams) -> Mask {
    Mask(scores.map(|s| ((params.upper - params.lower) * logistic(s) + params.lower).clamp(0.0, 1.0)))
}

/// Closed-form expected number of open gates, `Σ σ(S − b·log(−l/r))`.
pub fn expected_l0(scores: &Tensor2D, params: &HardConcreteParams) -> f64 {
    scores.as_slice().iter().map(|&s| params.open_probability(s)).sum()
}

/// Graph node for `Σ σ(S − b·log(−l/r))`, differentiable in `S`.
pub fn expected_l0_node(graph: &mut ComputeGraph, scores: NodeId, params: &HardConcreteParams) -> NodeId {
    let shifted = graph.add_scalar(scores, params.l0_shift());
    let open = graph.sigmoid(shifted);
    graph.sum(open)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn topv_local_examples() {
        let s = Tensor2D::from_rows(&[[0.5, -0.2], [0.1, 0.9]]);
        let m = topv_local(&s, 0.5).unwrap();
        assert_eq!(m.tensor(), &Tensor2D::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        assert_eq!(topv_local(&s, 1.0).unwrap(), Mask::ones(2, 2));
        assert_eq!(topv_local(&s, 0.0).unwrap(), Mask::zeros(2, 2));
        assert!(matches!(topv_local(&s, 1.5), Err(Error::Config(_))));
        assert!(matches!(topv_local(&s, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn topv_ties_prefer_low_index() {
        let s = Tensor2D::filled(2, 3, 0.25);
        let m = topv_local(&s, 0.5).unwrap();
        assert_eq!(m.tensor().as_slice(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn topv_global_examples() {
        let a = Tensor2D::from_rows(&[[5.0, 1.0]]);
        let b = Tensor2D::from_rows(&[[3.0, 2.0]]);
        let m = topv_global(&[&a, &b], 0.5).unwrap();
        assert_eq!(m[0].tensor().as_slice(), &[1.0, 0.0]);
        assert_eq!(m[1].tensor().as_slice(), &[1.0, 0.0]);
        let m = topv_global(&[&a, &b], 0.25).unwrap();
        assert_eq!(m[0].tensor().as_slice(), &[1.0, 0.0]);
        assert_eq!(m[1].tensor().as_slice(), &[0.0, 0.0]);
        assert!(matches!(topv_global(&[], 0.5), Err(Error::Config(_))));
        assert_eq!(topv_global(&[&a], 0.5).unwrap()[0], topv_local(&a, 0.5).unwrap());
    }

    #[test]
    fn topv_global_ties_prefer_earlier_matrix() {
        let a = Tensor2D::filled(1, 2, 1.0);
        let b = Tensor2D::filled(1, 2, 1.0);
        let m = topv_global(&[&a, &b], 0.75).unwrap();
        assert_eq!(m[0].kept(), 2);
        assert_eq!(m[1].tensor().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn threshold_examples() {
        let s = Tensor2D::from_rows(&[[0.2, -0.1]]);
        assert_eq!(threshold_mask(&s, 0.0).tensor().as_slice(), &[1.0, 0.0]);
        assert_eq!(threshold_mask(&Tensor2D::filled(2, 2, 0.3), 0.3).kept(), 0);
        assert_eq!(threshold_mask(&s, -1e300).kept(), 2);
    }

    #[test]
    fn hard_concrete_symmetry_point() {
        let p = HardConcreteParams::default();
        let hc = hard_concrete_sample(&Tensor2D::scalar(0.0), &p, &Tensor2D::scalar(0.5)).unwrap();
        assert_eq!(hc.stretched.item(), 0.5);
        assert!((hc.z.item() - 0.5).abs() < 1e-15);
        assert!((hc.mask.tensor().item() - 0.5).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let u = uniform_noise(1, 1, &mut rng);
            let hc = hard_concrete_sample(&Tensor2D::scalar(50.0), &p, &u).unwrap();
            assert_eq!(hc.mask.tensor().item(), 1.0);
        }
    }

    #[test]
    fn hard_concrete_rejects_boundary_noise() {
        let p = HardConcreteParams::default();
        for u in [0.0, 1.0] {
            assert!(matches!(
                hard_concrete_sample(&Tensor2D::scalar(0.0), &p, &Tensor2D::scalar(u)),
                Err(Error::Domain(_))
            ));
        }
        assert!(HardConcreteParams::new(0.5, 0.1, 1.1).is_err());
        assert!(HardConcreteParams::new(0.5, -0.1, 1.0).is_err());
        assert!(HardConcreteParams::new(0.0, -0.1, 1.1).is_err());
    }

    #[test]
    fn test_mask_examples() {
        let p = HardConcreteParams::default();
        let m = hard_concrete_test_mask(&Tensor2D::from_rows(&[[0.0, 1e3, -1e3, -5.0]]), &p);
        let v = m.tensor().as_slice();
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[3], 0.0);
    }

    #[test]
    fn expected_l0_examples() {
        let p = HardConcreteParams::default();
        // σ((2/3)·ln 11), evaluated by hand: ln 11 = 2.397895..., ·2/3 = 1.598597...
        let e = expected_l0(&Tensor2D::scalar(0.0), &p);
        assert!((e - 0.831_822_183_991_690_5).abs() < 1e-12, "{e}");
        assert!(expected_l0(&Tensor2D::scalar(-50.0), &p) < 1e-20);
    }
}
