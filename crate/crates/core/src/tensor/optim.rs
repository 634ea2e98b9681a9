use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{FcosError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Method {
    pub fn adam() -> Self {
        Method::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A parameter handed to the optimizer for one step.
pub struct ParamMut<'a, T: Scalar> {
    pub name: String,
    pub tensor: &'a mut Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer with per-parameter moment buffers keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    lr: f64,
    method: Method,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl Optimizer {
    pub fn new(lr: f64, method: Method) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(FcosError::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Optimizer {
            lr,
            method,
            moments: BTreeMap::new(),
            step: 0,
        })
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(lr, Method::adam())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies one update to every trainable parameter and clears all grads.
    pub fn step<T: Scalar>(&mut self, params: Vec<ParamMut<'_, T>>) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.trainable && p.tensor.grad().is_none()) {
            return Err(FcosError::Usage(format!(
                "trainable parameter {} has no gradient",
                p.name
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        for p in params {
            if !p.trainable {
                p.tensor.clear_grad();
                continue;
            }
            let n = p.tensor.len();
            let m = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            if m.first.len() != n {
                return Err(FcosError::Usage(format!(
                    "moment buffer for {} has length {}, parameter has {n}",
                    p.name,
                    m.first.len()
                )));
            }
            let (data, grad) = p.tensor.data_and_grad_mut();
            let grad = grad.expect("checked above");
            match self.method {
                Method::SgdMomentum { momentum } => {
                    for i in 0..n {
                        let g = grad[i].as_f64();
                        let v = momentum * m.first[i] + g;
                        m.first[i] = v;
                        data[i] = T::from_f64(data[i].as_f64() - self.lr * v);
                    }
                }
                Method::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    for i in 0..n {
                        let g = grad[i].as_f64();
                        m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
                        m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                        let mh = m.first[i] / c1;
                        let vh = m.second[i] / c2;
                        data[i] = T::from_f64(data[i].as_f64() - self.lr * mh / (vh.sqrt() + eps));
                    }
                }
            }
            p.tensor.clear_grad();
        }
        Ok(())
    }
}
