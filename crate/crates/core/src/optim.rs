//! Adam with decoupled weight decay, plus global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay }
    }
}

/// Per-parameter moment estimates for one network.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Weight decay is applied as `p ← p − lr·wd·p` before the
    /// bias-corrected Adam step `p ← p − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("adam_step", format!("{} params vs {} grads", params.len(), grads.len())));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::dim(
                "adam_step",
                format!("state for {} params, got {}", self.first.len(), params.len()),
            ));
        }
        self.step += 1;
        let c = self.config;
        let (lr, b1, b2, eps, wd) =
            (S::of(c.lr), S::of(c.beta1), S::of(c.beta2), S::of(c.epsilon), S::of(c.weight_decay));
        let t = self.step as i32;
        let bias1 = S::one() - b1.powi(t);
        let bias2 = S::one() - b2.powi(t);

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("param {:?} grad {:?} moment {:?}", p.shape(), g.shape(), m.shape()),
                ));
            }
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (S::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (S::one() - b2) * gi * gi;
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                pd[i] = pd[i] - lr * wd * pd[i];
                pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> S {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<S>().sqrt();
    let max = S::of(max_norm);
    if max_norm > 0.0 && norm > max {
        let k = max / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * k;
            }
        }
    }
    norm
}
