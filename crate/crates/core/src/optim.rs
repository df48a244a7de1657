use std::collections::BTreeMap;

use crate::autodiff::ParamId;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// SGD, with heavy-ball momentum when `momentum > 0`.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn plain_sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// True for memoryless SGD, the only setting under which scores are an
    /// exact sum of past `−α_S·∂L/∂S`.
    pub fn is_plain_sgd(&self) -> bool {
        matches!(self, OptimizerKind::Sgd { momentum } if *momentum == 0.0)
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Velocity(Tensor2D),
    Moments { m: Tensor2D, v: Tensor2D, t: i32 },
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    slots: BTreeMap<ParamId, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            slots: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, id: ParamId, param: &mut Tensor2D, grad: &Tensor2D, lr: f64) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape differs from parameter");
        match self.kind {
            OptimizerKind::Sgd { momentum: 0.0 } => {
                for (p, g) in param.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Sgd { momentum } => {
                let slot = self
                    .slots
                    .entry(id)
                    .or_insert_with(|| Slot::Velocity(Tensor2D::zeros(grad.rows(), grad.cols())));
                let Slot::Velocity(vel) = slot else { unreachable!() };
                for ((p, v), g) in param
                    .as_mut_slice()
                    .iter_mut()
                    .zip(vel.as_mut_slice())
                    .zip(grad.as_slice())
                {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let slot = self.slots.entry(id).or_insert_with(|| Slot::Moments {
                    m: Tensor2D::zeros(grad.rows(), grad.cols()),
                    v: Tensor2D::zeros(grad.rows(), grad.cols()),
                    t: 0,
                });
                let Slot::Moments { m, v, t } = slot else { unreachable!() };
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (((p, m), v), g) in param
                    .as_mut_slice()
                    .iter_mut()
                    .zip(m.as_mut_slice())
                    .zip(v.as_mut_slice())
                    .zip(grad.as_slice())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut opt = Optimizer::new(OptimizerKind::plain_sgd());
        let mut p = Tensor2D::from_rows(&[[1.0, -2.0]]);
        opt.step(ParamId(0), &mut p, &Tensor2D::from_rows(&[[0.5, 0.0]]), 0.1);
        assert_eq!(p.as_slice(), &[0.95, -2.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.5 });
        let mut p = Tensor2D::scalar(0.0);
        let g = Tensor2D::scalar(1.0);
        opt.step(ParamId(0), &mut p, &g, 1.0);
        opt.step(ParamId(0), &mut p, &g, 1.0);
        assert_eq!(p.item(), -2.5);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut opt = Optimizer::new(OptimizerKind::adam());
        let mut p = Tensor2D::scalar(0.0);
        opt.step(ParamId(0), &mut p, &Tensor2D::scalar(3.0), 0.01);
        assert!((p.item() + 0.01).abs() < 1e-8);
    }
}
