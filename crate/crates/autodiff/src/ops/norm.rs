//! Batch normalization over the trailing (channel) axis.

use crate::error::{mismatch, AutodiffError, Result};
use crate::float::Float;
use crate::tape::{NodeId, Op, Var};
use crate::tensor::Tensor;

use super::Contributions;

/// Per-channel statistics of one training-mode batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Unbiased variance (the form folded into running statistics).
    pub var: Vec<F>,
}

fn channels<F: Float>(x: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>) -> Result<usize> {
    let c = *x.shape().last().ok_or(AutodiffError::InvalidShape {
        op: "batch_norm",
        reason: "scalar input".into(),
    })?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(mismatch("batch_norm", x.shape(), gamma.shape()));
    }
    if c == 0 || x.len() / c == 0 {
        return Err(AutodiffError::InvalidShape {
            op: "batch_norm",
            reason: format!("no elements to normalize in {:?}", x.shape()),
        });
    }
    Ok(c)
}

impl<'t, F: Float> Var<'t, F> {
    /// Training mode: normalizes with the statistics of this batch and
    /// returns them so the caller can fold them into running averages.
    pub fn batch_norm(&self, gamma: &Var<'t, F>, beta: &Var<'t, F>, eps: F) -> Result<(Var<'t, F>, BatchStats<F>)> {
        self.check_pair(gamma)?;
        self.check_pair(beta)?;
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let c = channels(&x, &gv, &bv)?;
        let n = x.len() / c;
        let nf = F::from_usize(n).unwrap();
        let mut mean = vec![F::zero(); c];
        for px in x.data().chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += *v;
            }
        }
        for m in mean.iter_mut() {
            *m /= nf;
        }
        let mut var = vec![F::zero(); c];
        for px in x.data().chunks_exact(c) {
            for k in 0..c {
                let d = px[k] - mean[k];
                var[k] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= nf;
        }
        let inv_std: Vec<F> = var.iter().map(|v| F::one() / (*v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for px in x.data().chunks_exact(c) {
            for k in 0..c {
                let h = (px[k] - mean[k]) * inv_std[k];
                xhat.push(h);
                out.push(h * gv.data()[k] + bv.data()[k]);
            }
        }
        let unbiased = if n > 1 {
            let scale = nf / F::from_usize(n - 1).unwrap();
            var.iter().map(|v| *v * scale).collect()
        } else {
            var.clone()
        };
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            batch_stats: true,
        };
        Ok((self.tape.push(value, op, rg), BatchStats { mean, var: unbiased }))
    }

    /// Evaluation mode: normalizes with frozen running statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<'t, F>,
        beta: &Var<'t, F>,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
    ) -> Result<Var<'t, F>> {
        self.check_pair(gamma)?;
        self.check_pair(beta)?;
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let c = channels(&x, &gv, &bv)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(mismatch("batch_norm_eval", &[c], &[running_mean.len(), running_var.len()]));
        }
        let inv_std: Vec<F> = running_var.iter().map(|v| F::one() / (*v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for px in x.data().chunks_exact(c) {
            for k in 0..c {
                let h = (px[k] - running_mean[k]) * inv_std[k];
                xhat.push(h);
                out.push(h * gv.data()[k] + bv.data()[k]);
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            batch_stats: false,
        };
        Ok(self.tape.push(value, op, rg))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_backward<F: Float>(
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    gv: &Tensor<F>,
    xhat: &[F],
    inv_std: &[F],
    batch_stats: bool,
    g: &Tensor<F>,
) -> Contributions<F> {
    let c = gv.len();
    let n = xhat.len() / c;
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for (gp, hp) in g.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for k in 0..c {
            dgamma[k] += gp[k] * hp[k];
            dbeta[k] += gp[k];
        }
    }
    let mut dx = Vec::with_capacity(xhat.len());
    if batch_stats {
        // dx = inv_std / n * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat)),
        // with dxhat = g * gamma; the two sums are gamma * dbeta and gamma * dgamma.
        let nf = F::from_usize(n).unwrap();
        for (gp, hp) in g.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for k in 0..c {
                let gk = gv.data()[k];
                let v = gk * inv_std[k] / nf * (nf * gp[k] - dbeta[k] - hp[k] * dgamma[k]);
                dx.push(v);
            }
        }
    } else {
        for gp in g.data().chunks_exact(c) {
            for k in 0..c {
                dx.push(gp[k] * gv.data()[k] * inv_std[k]);
            }
        }
    }
    vec![
        (x, Tensor::new(g.shape().to_vec(), dx).unwrap()),
        (gamma, Tensor::new(vec![c], dgamma).unwrap()),
        (beta, Tensor::new(vec![c], dbeta).unwrap()),
    ]
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn training_mode_standardizes_each_channel() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[4, 3, 3, 2], |i| ((i * 37 % 17) as f64) * 0.3 - 1.0));
        let gamma = tape.leaf(Tensor::ones(&[2]));
        let beta = tape.leaf(Tensor::zeros(&[2]));
        let (y, stats) = x.batch_norm(&gamma, &beta, 1e-5).unwrap();
        let y = y.value();
        for k in 0..2 {
            let vals: Vec<f64> = y.data().iter().skip(k).step_by(2).copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert_eq!(stats.mean.len(), 2);
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 1, 1]));
        let gamma = tape.constant(Tensor::ones(&[1]));
        let beta = tape.constant(Tensor::zeros(&[1]));
        let y = x.batch_norm_eval(&gamma, &beta, &[0.0], &[1.0], 1e-5).unwrap();
        assert!(y.value().all_finite());
        assert_eq!(y.value().data(), &[0.0, 0.0]);
    }
}
