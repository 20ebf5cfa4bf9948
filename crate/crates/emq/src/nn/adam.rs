//! Adam optimizer with bias correction.

use crate::error::{EmqError, Result};
use crate::linalg::Matrix;
use crate::nn::mlp::{Gradients, Layer, Mlp};

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Layer>,
    v: Vec<Layer>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Canonical defaults: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(mlp: &Mlp) -> Self {
        let zeros = || -> Vec<Layer> {
            mlp.layers()
                .iter()
                .map(|l| Layer {
                    w: Matrix::zeros(l.w.rows(), l.w.cols()),
                    b: vec![0.0; l.b.len()],
                })
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update in place. Rejects non-finite gradients so training
    /// can abort with a diagnostic instead of poisoning the parameters.
    pub fn step(&mut self, mlp: &mut Mlp, grads: &Gradients, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(EmqError::Numeric(
                "non-finite gradient encountered; training aborted".into(),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (li, layer) in mlp.layers_mut().iter_mut().enumerate() {
            let g = &grads.layers[li];
            let m = &mut self.m[li];
            let v = &mut self.v[li];
            for ((p, gv), (mv, vv)) in layer
                .w
                .data_mut()
                .iter_mut()
                .zip(g.w.data())
                .zip(m.w.data_mut().iter_mut().zip(v.w.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *p -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
            for ((p, gv), (mv, vv)) in layer
                .b
                .iter_mut()
                .zip(&g.b)
                .zip(m.b.iter_mut().zip(v.b.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *p -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
