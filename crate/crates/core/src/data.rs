//! Synthetic source/target classification tasks.
//!
//! The source task is a Gaussian mixture with one mean per class. The
//! target task reuses the same means after a fixed random rotation plus a
//! small per-mean perturbation, so a model pretrained on the source already
//! carries most of the structure the target needs.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_size: usize,
    pub eval_size: usize,
    /// Scale of the class means (standard normal times this).
    pub mean_scale: f64,
    /// How far the target rotation is from the identity: 0 keeps the
    /// source geometry, 1 draws a rotation from a full Gaussian matrix.
    pub rotation_mix: f64,
    /// Scale of the per-mean perturbation applied after rotation.
    pub shift_scale: f64,
    /// Standard deviation of the within-class noise.
    pub noise_std: f64,
    /// Multiplier applied to every generated feature.
    pub feature_scale: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            dim: 32,
            train_size: 4096,
            eval_size: 1024,
            mean_scale: 3.0,
            rotation_mix: 0.15,
            shift_scale: 0.5,
            noise_std: 4.0,
            feature_scale: 0.25,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("tasks need at least two classes"));
        }
        if self.dim == 0 || self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::config("task dimension and sizes must be positive"));
        }
        for (name, v) in [
            ("mean_scale", self.mean_scale),
            ("noise_std", self.noise_std),
            ("feature_scale", self.feature_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.rotation_mix) {
            return Err(Error::config(format!("rotation_mix {} outside [0, 1]", self.rotation_mix)));
        }
        if !(self.shift_scale.is_finite() && self.shift_scale >= 0.0) {
            return Err(Error::config("shift_scale must be nonnegative"));
        }
        Ok(())
    }
}

/// Labeled examples, one per row of `features`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor2D,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor2D, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                len: classes,
            });
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> (Tensor2D, Vec<usize>) {
        let d = self.dim();
        let x = Tensor2D::from_fn(indices.len(), d, |r, j| self.features.get(indices[r], j));
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// A batch drawn without replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> (Tensor2D, Vec<usize>) {
        let size = size.min(self.len());
        let idx = index::sample(rng, self.len(), size).into_vec();
        self.select(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone)]
pub struct TransferPair {
    pub source_train: Dataset,
    pub source_eval: Dataset,
    pub target_train: Dataset,
    pub target_eval: Dataset,
    pub rotation: Tensor2D,
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Tensor2D {
    random_rotation_near_identity(dim, 1.0, rng)
}

/// Orthogonal matrix from Gram-Schmidt on `(1 − mix)·I + mix·G/√dim` with
/// `G` standard normal.
pub fn random_rotation_near_identity<R: Rng + ?Sized>(dim: usize, mix: f64, rng: &mut R) -> Tensor2D {
    let spread = mix / (dim as f64).sqrt();
    loop {
        let mut rows: Vec<Vec<f64>> = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(rng);
                        let base = if i == j { 1.0 - mix } else { 0.0 };
                        base + spread * z
                    })
                    .collect()
            })
            .collect();
        let mut ok = true;
        for i in 0..dim {
            // Two passes keep the basis orthogonal to machine precision.
            for _ in 0..2 {
                for k in 0..i {
                    let dot: f64 = rows[i].iter().zip(&rows[k]).map(|(a, b)| a * b).sum();
                    let (done, rest) = rows.split_at_mut(i);
                    for (a, b) in rest[0].iter_mut().zip(&done[k]) {
                        *a -= dot * b;
                    }
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            return Tensor2D::from_fn(dim, dim, |i, j| rows[i][j]);
        }
    }
}

/// Largest entry of `|QᵀQ − I|`.
pub fn orthogonality_error(q: &Tensor2D) -> f64 {
    let gram = q.transposed_matmul(q).expect("square matrix");
    let mut worst: f64 = 0.0;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.get(i, j) - target).abs());
        }
    }
    worst
}

fn sample_mixture<R: Rng + ?Sized>(means: &Tensor2D, n: usize, cfg: &TaskConfig, rng: &mut R) -> Dataset {
    let classes = means.rows();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut features = Tensor2D::zeros(n, means.cols());
    for (r, &c) in labels.iter().enumerate() {
        for j in 0..means.cols() {
            let eps: f64 = StandardNormal.sample(rng);
            features.set(r, j, cfg.feature_scale * (means.get(c, j) + cfg.noise_std * eps));
        }
    }
    Dataset {
        features,
        labels,
        classes,
    }
}

/// Generates the source and target tasks. Deterministic per `cfg.seed`.
pub fn generate_transfer_pair(cfg: &TaskConfig) -> Result<TransferPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, d) = (cfg.classes, cfg.dim);
    let source_means = Tensor2D::from_fn(c, d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        cfg.mean_scale * z
    });
    let rotation = random_rotation_near_identity(d, cfg.rotation_mix, &mut rng);
    let rotated = source_means.matmul_transposed(&rotation)?;
    let mut target_means = rotated;
    for v in target_means.as_mut_slice() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += cfg.shift_scale * z;
    }
    let source_train = sample_mixture(&source_means, cfg.train_size, cfg, &mut rng);
    let source_eval = sample_mixture(&source_means, cfg.eval_size, cfg, &mut rng);
    let target_train = sample_mixture(&target_means, cfg.train_size, cfg, &mut rng);
    let target_eval = sample_mixture(&target_means, cfg.eval_size, cfg, &mut rng);
    Ok(TransferPair {
        source_train,
        source_eval,
        target_train,
        target_eval,
        rotation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskConfig {
        TaskConfig {
            train_size: 800,
            eval_size: 200,
            ..TaskConfig::default()
        }
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for dim in [2, 8, 32] {
            assert!(orthogonality_error(&random_rotation(dim, &mut rng)) < 1e-12);
            for mix in [0.0, 0.3, 0.7] {
                let q = random_rotation_near_identity(dim, mix, &mut rng);
                assert!(orthogonality_error(&q) < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_transfer_pair(&small()).unwrap();
        let b = generate_transfer_pair(&small()).unwrap();
        assert_eq!(a.target_train, b.target_train);
        let c = generate_transfer_pair(&TaskConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.source_train, c.source_train);
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let x = Tensor2D::zeros(2, 3);
        assert!(Dataset::new(x.clone(), vec![0, 5], 4).is_err());
        assert!(Dataset::new(x, vec![0], 4).is_err());
    }

    #[test]
    fn batches_have_distinct_rows() {
        let pair = generate_transfer_pair(&small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, y) = pair.source_train.sample_batch(32, &mut rng);
        assert_eq!(x.shape(), (32, 32));
        assert_eq!(y.len(), 32);
    }
}
