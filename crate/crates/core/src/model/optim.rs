use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::MlpParams;

fn check_grads(params: &MlpParams, grads: &[Tensor], lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if grads.len() != params.tensors().len() {
        return Err(Error::Dimension {
            what: "gradient tensors",
            expected: params.tensors().len(),
            found: grads.len(),
        });
    }
    for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
        if g.shape() != p.shape() {
            return Err(Error::Config(format!(
                "gradient {i} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient tensor {i}")));
        }
    }
    Ok(())
}

/// `theta - lr * grad`.
pub fn sgd_step(params: &MlpParams, grads: &[Tensor], lr: f64) -> Result<MlpParams> {
    check_grads(params, grads, lr)?;
    let tensors = params
        .tensors()
        .iter()
        .zip(grads)
        .map(|(p, g)| p.zip_map(g, |p, g| p - lr * g))
        .collect();
    MlpParams::from_tensors(params.config().clone(), tensors)
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &MlpParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &MlpParams, grads: &[Tensor], lr: f64) -> Result<MlpParams> {
        check_grads(params, grads, lr)?;
        if self.m.len() != grads.len() {
            return Err(Error::Dimension {
                what: "optimizer state tensors",
                expected: self.m.len(),
                found: grads.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);

        let mut tensors = Vec::with_capacity(grads.len());
        for ((p, g), (m, v)) in params
            .tensors()
            .iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = m.zip_map(g, |m, g| b1 * m + (1.0 - b1) * g);
            *v = v.zip_map(g, |v, g| b2 * v + (1.0 - b2) * g * g);
            let data = p
                .data()
                .iter()
                .zip(m.data().iter().zip(v.data()))
                .map(|(&p, (&m, &v))| p - lr * (m / c1) / ((v / c2).sqrt() + eps))
                .collect();
            tensors.push(Tensor::new(p.shape().to_vec(), data)?);
        }
        MlpParams::from_tensors(params.config().clone(), tensors)
    }
}
