//! Cubic sparsity schedule with warm-up and cool-down.
//!
//! `v` is the pruned fraction. It holds at `initial` for the first `warmup`
//! steps, ramps cubically to `final_` over `D = total − warmup − cooldown`
//! steps, then stays at `final_` for the last `cooldown` steps:
//!
//! ```text
//! v(t) = v_f + (v_i − v_f)·(1 − (t − t_i)/D)³    for t_i ≤ t < T − t_f
//! ```
//!
//! The ramp variable is measured from the end of warm-up so the curve is
//! continuous at both junctions.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsitySchedule {
    pub initial: f64,
    pub final_: f64,
    pub warmup: usize,
    pub cooldown: usize,
    pub total: usize,
}

impl SparsitySchedule {
    pub fn new(initial: f64, final_: f64, warmup: usize, cooldown: usize, total: usize) -> Result<Self> {
        let s = Self {
            initial,
            final_,
            warmup,
            cooldown,
            total,
        };
        s.validate()?;
        Ok(s)
    }

    /// Warm-up of 5% and cool-down of 20% of the run.
    pub fn with_default_phases(initial: f64, final_: f64, total: usize) -> Result<Self> {
        Self::new(initial, final_, total / 20, total / 5, total)
    }

    /// No pruning at all.
    pub fn dense(total: usize) -> Self {
        Self {
            initial: 0.0,
            final_: 0.0,
            warmup: 0,
            cooldown: 0,
            total,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("initial", self.initial), ("final", self.final_)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} sparsity {v} outside [0, 1]")));
            }
        }
        if self.warmup + self.cooldown > self.total {
            return Err(Error::config(format!(
                "warm-up ({}) plus cool-down ({}) exceed total steps ({})",
                self.warmup, self.cooldown, self.total
            )));
        }
        Ok(())
    }

    fn ramp_len(&self) -> usize {
        self.total - self.warmup - self.cooldown
    }

    /// Pruned fraction at step `t ∈ [0, total]`.
    pub fn sparsity_at(&self, t: usize) -> Result<f64> {
        if t > self.total {
            return Err(Error::Range {
                step: t,
                total: self.total,
            });
        }
        if t < self.warmup {
            return Ok(self.initial);
        }
        if t >= self.total - self.cooldown {
            return Ok(self.final_);
        }
        if t == self.warmup {
            return Ok(self.initial);
        }
        let progress = (t - self.warmup) as f64 / self.ramp_len() as f64;
        let v = self.final_ + (self.initial - self.final_) * (1.0 - progress).powi(3);
        let (lo, hi) = if self.initial <= self.final_ {
            (self.initial, self.final_)
        } else {
            (self.final_, self.initial)
        };
        Ok(v.clamp(lo, hi))
    }

    /// Kept fraction handed to Top-v at step `t`, i.e. `1 − v(t)`.
    pub fn kept_at(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.sparsity_at(t)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> SparsitySchedule {
        SparsitySchedule::new(0.0, 0.9, 100, 200, 1100).unwrap()
    }

    #[test]
    fn hand_evaluated_points() {
        let s = example();
        assert_eq!(s.sparsity_at(0).unwrap(), 0.0);
        assert_eq!(s.sparsity_at(100).unwrap(), 0.0);
        assert!((s.sparsity_at(500).unwrap() - 0.7875).abs() < 1e-15);
        for t in 900..=1100 {
            assert_eq!(s.sparsity_at(t).unwrap(), 0.9);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        let s = example();
        assert!(matches!(s.sparsity_at(1101), Err(Error::Range { step: 1101, total: 1100 })));
        assert!(SparsitySchedule::new(0.0, 1.2, 0, 0, 10).is_err());
        assert!(SparsitySchedule::new(0.0, 0.5, 6, 5, 10).is_err());
    }

    #[test]
    fn kept_fraction_is_complement() {
        let s = example();
        assert!((s.kept_at(1100).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_length_ramp_is_a_step() {
        let s = SparsitySchedule::new(0.1, 0.5, 5, 5, 10).unwrap();
        assert_eq!(s.sparsity_at(4).unwrap(), 0.1);
        assert_eq!(s.sparsity_at(5).unwrap(), 0.5);
    }
}
