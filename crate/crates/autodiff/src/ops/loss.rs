use crate::error::{mismatch, AutodiffError, Result};
use crate::float::Float;
use crate::tape::{NodeId, Op, Var};
use crate::tensor::Tensor;

use super::Contributions;

/// Row-wise softmax of a `[rows, classes]` buffer.
pub fn softmax_rows<F: Float>(logits: &[F], classes: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let start = out.len();
        let mut total = F::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for p in out[start..].iter_mut() {
            *p /= total;
        }
    }
    out
}

/// `ln(sigma * sqrt(2 pi))`.
pub fn gaussian_log_norm<F: Float>(sigma: F) -> F {
    let two_pi = F::from_f64_lossy(std::f64::consts::TAU);
    (sigma * two_pi.sqrt()).ln()
}

impl<'t, F: Float> Var<'t, F> {
    /// Mean cross-entropy of `softmax(self)` against integer labels.
    /// `self` is `[rows, classes]`; the result is a scalar.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, F>> {
        self.check()?;
        let x = self.value();
        let [rows, classes] = x.shape() else {
            return Err(AutodiffError::InvalidShape {
                op: "softmax_cross_entropy",
                reason: format!("expected [rows, classes], got {:?}", x.shape()),
            });
        };
        let (rows, classes) = (*rows, *classes);
        if labels.len() != rows || rows == 0 {
            return Err(mismatch("softmax_cross_entropy", x.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::LabelOutOfRange {
                op: "softmax_cross_entropy",
                label: bad,
                classes,
            });
        }
        let probs = softmax_rows(x.data(), classes);
        let mut loss = F::zero();
        for (r, row) in x.data().chunks_exact(classes).enumerate() {
            // log-sum-exp form keeps the loss finite even when a probability underflows
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            loss += lse - row[labels[r]];
        }
        loss /= F::from_usize(rows).unwrap();
        let op = Op::SoftmaxCrossEntropy {
            logits: self.id,
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.unary(Tensor::scalar(loss), op))
    }

    /// Squared Euclidean distances `[q, d] x [n, d] -> [q, n]`.
    pub fn sq_dist(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_pair(other)?;
        let (a, b) = (self.value(), other.value());
        let (&[q, d], &[n, d2]) = (a.shape(), b.shape()) else {
            return Err(mismatch("sq_dist", a.shape(), b.shape()));
        };
        if d != d2 {
            return Err(mismatch("sq_dist", a.shape(), b.shape()));
        }
        let mut out = Vec::with_capacity(q * n);
        for i in 0..q {
            let ai = &a.data()[i * d..(i + 1) * d];
            for j in 0..n {
                let bj = &b.data()[j * d..(j + 1) * d];
                out.push(ai.iter().zip(bj).map(|(x, y)| (*x - *y) * (*x - *y)).sum());
            }
        }
        let value = Tensor::new(vec![q, n], out)?;
        Ok(self.binary(other, value, Op::SqDist(self.id, other.id)))
    }

    /// Per-row log-density of a constant `sample` under an isotropic
    /// Gaussian with mean `self` and standard deviation `sigma`:
    /// `[rows, dim] -> [rows]`.
    pub fn gaussian_log_prob(&self, sample: &Tensor<F>, sigma: F) -> Result<Var<'t, F>> {
        self.check()?;
        let mean = self.value();
        if mean.rank() != 2 || sample.shape() != mean.shape() {
            return Err(mismatch("gaussian_log_prob", mean.shape(), sample.shape()));
        }
        if !(sigma > F::zero()) {
            return Err(AutodiffError::InvalidArgument {
                op: "gaussian_log_prob",
                reason: format!("sigma must be positive, got {sigma}"),
            });
        }
        let dim = mean.shape()[1];
        let norm = gaussian_log_norm(sigma);
        let two_var = F::from_f64_lossy(2.0) * sigma * sigma;
        let mut out = Vec::with_capacity(mean.shape()[0]);
        for (mr, sr) in mean
            .data()
            .chunks_exact(dim.max(1))
            .zip(sample.data().chunks_exact(dim.max(1)))
        {
            let mut lp = F::zero();
            for (m, s) in mr.iter().zip(sr) {
                let d = *s - *m;
                lp += -(d * d) / two_var - norm;
            }
            out.push(lp);
        }
        if dim == 0 {
            out = vec![F::zero(); mean.shape()[0]];
        }
        let value = Tensor::new(vec![mean.shape()[0]], out)?;
        let op = Op::GaussianLogProb {
            mean: self.id,
            sample: sample.data().to_vec(),
            sigma,
        };
        Ok(self.unary(value, op))
    }

    pub fn sum(&self) -> Result<Var<'t, F>> {
        self.check()?;
        let v = self.value().sum();
        Ok(self.unary(Tensor::scalar(v), Op::Sum(self.id)))
    }

    pub fn mean(&self) -> Result<Var<'t, F>> {
        self.check()?;
        let x = self.value();
        if x.is_empty() {
            return Err(AutodiffError::InvalidShape {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let v = x.sum() / F::from_usize(x.len()).unwrap();
        Ok(self.unary(Tensor::scalar(v), Op::Mean(self.id)))
    }
}

pub(super) fn softmax_ce_backward<F: Float>(
    logits: NodeId,
    xv: &Tensor<F>,
    probs: &[F],
    labels: &[usize],
    g: &Tensor<F>,
) -> Contributions<F> {
    let classes = xv.shape()[1];
    let rows = labels.len();
    let scale = g.data()[0] / F::from_usize(rows).unwrap();
    let mut d = probs.to_vec();
    for (r, &l) in labels.iter().enumerate() {
        d[r * classes + l] -= F::one();
    }
    for v in d.iter_mut() {
        *v *= scale;
    }
    vec![(logits, Tensor::new(xv.shape().to_vec(), d).unwrap())]
}

pub(super) fn sq_dist_backward<F: Float>(
    a: NodeId,
    b: NodeId,
    av: &Tensor<F>,
    bv: &Tensor<F>,
    g: &Tensor<F>,
) -> Contributions<F> {
    let (q, d) = (av.shape()[0], av.shape()[1]);
    let n = bv.shape()[0];
    let two = F::from_f64_lossy(2.0);
    let mut da = vec![F::zero(); q * d];
    let mut db = vec![F::zero(); n * d];
    for i in 0..q {
        for j in 0..n {
            let gij = g.data()[i * n + j] * two;
            if gij == F::zero() {
                continue;
            }
            for k in 0..d {
                let diff = av.data()[i * d + k] - bv.data()[j * d + k];
                da[i * d + k] += gij * diff;
                db[j * d + k] -= gij * diff;
            }
        }
    }
    vec![
        (a, Tensor::new(vec![q, d], da).unwrap()),
        (b, Tensor::new(vec![n, d], db).unwrap()),
    ]
}

pub(super) fn gaussian_log_prob_backward<F: Float>(
    mean: NodeId,
    mv: &Tensor<F>,
    sample: &[F],
    sigma: F,
    g: &Tensor<F>,
) -> Contributions<F> {
    let dim = mv.shape()[1];
    let inv_var = F::one() / (sigma * sigma);
    let mut d = Vec::with_capacity(mv.len());
    for (r, (mr, sr)) in mv
        .data()
        .chunks_exact(dim.max(1))
        .zip(sample.chunks_exact(dim.max(1)))
        .enumerate()
    {
        let gr = g.data()[r];
        for (m, s) in mr.iter().zip(sr) {
            d.push(gr * (*s - *m) * inv_var);
        }
    }
    if dim == 0 {
        d.clear();
    }
    vec![(mean, Tensor::new(mv.shape().to_vec(), d).unwrap())]
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn uniform_logits_give_log_classes() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3, 5]));
        let loss = x.softmax_cross_entropy(&[0, 2, 4]).unwrap();
        assert!((loss.value().data()[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_label_out_of_range() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2]));
        assert!(x.softmax_cross_entropy(&[2]).is_err());
    }

    #[test]
    fn large_margin_loss_is_near_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![100.0, 0.0, 0.0]).unwrap());
        let loss = x.softmax_cross_entropy(&[0]).unwrap().value().data()[0];
        assert!(loss < 1e-30);
    }

    #[test]
    fn log_prob_at_mean_unit_sigma() {
        let tape = Tape::<f64>::new();
        let m = tape.leaf(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
        let lp = m
            .gaussian_log_prob(&Tensor::new(vec![1, 1], vec![0.3]).unwrap(), 1.0)
            .unwrap();
        assert!((lp.value().data()[0] + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn log_prob_gradient_is_scaled_residual() {
        let tape = Tape::<f64>::new();
        let m = tape.leaf(Tensor::new(vec![1, 2], vec![0.3, 0.6]).unwrap());
        let s = Tensor::new(vec![1, 2], vec![0.45, 0.5]).unwrap();
        let lp = m.gaussian_log_prob(&s, 0.1).unwrap();
        let grads = tape.backward(lp.sum().unwrap()).unwrap();
        let g = grads.wrt(&m);
        assert!((g.data()[0] - 15.0).abs() < 1e-9);
        assert!((g.data()[1] + 10.0).abs() < 1e-9);
    }

    #[test]
    fn sq_dist_matches_hand_value() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![3.0, 4.0, 1.0, 1.0]).unwrap());
        assert_eq!(a.sq_dist(&b).unwrap().value().data(), &[25.0, 2.0]);
    }
}
