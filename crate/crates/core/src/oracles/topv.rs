//! Sort-based reference for Top-v selection.

use crate::masking::{keep_count, Mask};
use crate::tensor::Tensor2D;

/// Positions ordered by descending value, ties by ascending position.
fn ranking(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Keeps the `round(keep·n)` largest entries after a full sort.
pub fn brute_force_topv(scores: &Tensor2D, keep: f64) -> Mask {
    let k = keep_count(keep, scores.len());
    let mut out = vec![0.0; scores.len()];
    for &i in ranking(scores.as_slice()).iter().take(k) {
        out[i] = 1.0;
    }
    Mask::new(Tensor2D::new(scores.rows(), scores.cols(), out).expect("same shape")).expect("binary")
}

/// Pools every matrix in order (row-major within each) and keeps the
/// `round(keep·N)` largest entries overall.
pub fn brute_force_topv_global(scores: &[&Tensor2D], keep: f64) -> Vec<Mask> {
    let pooled: Vec<f64> = scores.iter().flat_map(|s| s.as_slice().iter().copied()).collect();
    let k = keep_count(keep, pooled.len());
    let mut flags = vec![0.0; pooled.len()];
    for &i in ranking(&pooled).iter().take(k) {
        flags[i] = 1.0;
    }
    let mut offset = 0;
    scores
        .iter()
        .map(|s| {
            let part = flags[offset..offset + s.len()].to_vec();
            offset += s.len();
            Mask::new(Tensor2D::new(s.rows(), s.cols(), part).expect("same shape")).expect("binary")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_keep_lowest_positions() {
        let m = brute_force_topv(&Tensor2D::filled(2, 2, 0.3), 0.5);
        assert_eq!(m.tensor().as_slice(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_and_full() {
        let s = Tensor2D::from_rows(&[[0.5, -0.2], [0.1, 0.9]]);
        assert_eq!(brute_force_topv(&s, 0.0).kept(), 0);
        assert_eq!(brute_force_topv(&s, 1.0).kept(), 4);
        assert_eq!(brute_force_topv(&s, 0.5).tensor(), &Tensor2D::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
    }
}
