use rap_autodiff::{Float, ParamStore, Tensor};

use crate::error::{RapError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers are aligned with the
/// entries of the parameter store; buffers (non-trainable entries) get
/// empty moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F: Float = f32> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<F>) -> Self {
        let zeros: Vec<Tensor<F>> = params
            .entries()
            .iter()
            .map(|e| {
                if e.trainable {
                    Tensor::zeros(e.value.shape())
                } else {
                    Tensor::zeros(&[0])
                }
            })
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &[Option<Tensor<F>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(RapError::InvalidConfig(format!(
                "optimizer holds {} slots, store {} entries, {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = |x: f64| F::from_f64_lossy(x);
        let (b1, b2) = (c(self.cfg.beta1), c(self.cfg.beta2));
        let bc1 = c(1.0 - self.cfg.beta1.powi(t));
        let bc2 = c(1.0 - self.cfg.beta2.powi(t));
        let (lr, eps) = (c(self.cfg.lr), c(self.cfg.eps));
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if !entry.trainable {
                continue;
            }
            if g.shape() != entry.value.shape() {
                return Err(RapError::InvalidConfig(format!(
                    "gradient {:?} for `{}` of shape {:?}",
                    g.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, p) in entry.value.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (F::one() - b1) * gk;
                v[k] = b2 * v[k] + (F::one() - b2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
