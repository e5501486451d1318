//! Named parameters and the Adam optimizer with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named model parameter. Frozen parameters keep flowing values through
/// the forward pass but are skipped by the optimizer and receive no grads.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
    /// Per-parameter learning-rate multiplier (param-group style); the
    /// effective step is `lr * lr_scale`.
    pub lr_scale: f64,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
            grad: None,
            trainable: true,
            lr_scale: 1.0,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
            grad: None,
            trainable: false,
            lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// One Adam step over `params`. Frozen parameters are left bit-identical;
    /// trainable parameters must carry a gradient. Gradients are cleared.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            if !p.trainable {
                p.grad = None;
                continue;
            }
            let grad = p
                .grad
                .take()
                .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            if grad.shape() != p.value.shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let n = p.value.len();
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let lr = self.lr * p.lr_scale;
            let data = p.value.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                // decoupled weight decay, then the Adam update
                data[i] -= lr * self.weight_decay * data[i];
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
