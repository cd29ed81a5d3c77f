//! First-order optimizers over [`NetParams`].

use serde::{Deserialize, Serialize};

use crate::net::NetParams;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam
    }
}

pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: NetParams<T>,
    v: NetParams<T>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, shape_like: &NetParams<T>) -> Self {
        let mut m = shape_like.clone();
        m.fill_zero();
        let v = m.clone();
        Self {
            kind,
            lr,
            step: 0,
            m,
            v,
        }
    }

    /// Applies one update with `grad` already averaged over the minibatch.
    pub fn step(&mut self, params: &mut NetParams<T>, grad: &NetParams<T>) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = T::from_f64(momentum);
                let lr = T::from_f64(self.lr);
                for ((p, g), m) in params
                    .values_mut()
                    .zip(grad.values())
                    .zip(self.m.values_mut())
                {
                    *m = mu * *m + *g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::from_f64(BETA1);
                let b2 = T::from_f64(BETA2);
                let c1 = T::from_f64(1.0 - BETA1.powi(self.step));
                let c2 = T::from_f64(1.0 - BETA2.powi(self.step));
                let lr = T::from_f64(self.lr);
                let eps = T::from_f64(EPS);
                let one = T::one();
                for (((p, g), m), v) in params
                    .values_mut()
                    .zip(grad.values())
                    .zip(self.m.values_mut())
                    .zip(self.v.values_mut())
                {
                    *m = b1 * *m + (one - b1) * *g;
                    *v = b2 * *v + (one - b2) * *g * *g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Adam over a plain vector; used by the C&W attack.
pub struct VecAdam {
    lr: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl VecAdam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for (((x, &g), m), v) in x.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = VecAdam::new(0.1, 2);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }
}
