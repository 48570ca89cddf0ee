use crate::error::{mismatch, Result};
use crate::float::Float;
use crate::tape::{NodeId, Op, Var};
use crate::tensor::Tensor;

use super::Contributions;

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl<'t, F: Float> Var<'t, F> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_pair(other)?;
        let (a, b) = (self.value(), other.value());
        let (Some((m, k)), Some((k2, n))) = (dims2(a.shape()), dims2(b.shape())) else {
            return Err(mismatch("matmul", a.shape(), b.shape()));
        };
        if k != k2 {
            return Err(mismatch("matmul", a.shape(), b.shape()));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(false, false, m, k, n, a.data(), b.data(), F::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(other, value, Op::Matmul(self.id, other.id)))
    }

    /// `x w + b` for `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&self, w: &Var<'t, F>, b: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_pair(w)?;
        self.check_pair(b)?;
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (Some((m, k)), Some((k2, n))) = (dims2(xv.shape()), dims2(wv.shape())) else {
            return Err(mismatch("affine", xv.shape(), wv.shape()));
        };
        if k != k2 {
            return Err(mismatch("affine", xv.shape(), wv.shape()));
        }
        if bv.shape() != [n] {
            return Err(mismatch("affine", wv.shape(), bv.shape()));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        F::gemm(false, false, m, k, n, xv.data(), wv.data(), F::one(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Affine {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            rg,
        ))
    }
}

pub(super) fn matmul_backward<F: Float>(a: NodeId, b: NodeId, av: &Tensor<F>, bv: &Tensor<F>, g: &Tensor<F>) -> Contributions<F> {
    let (m, k) = (av.shape()[0], av.shape()[1]);
    let n = bv.shape()[1];
    let mut da = vec![F::zero(); m * k];
    F::gemm(false, true, m, n, k, g.data(), bv.data(), F::zero(), &mut da);
    let mut db = vec![F::zero(); k * n];
    F::gemm(true, false, k, m, n, av.data(), g.data(), F::zero(), &mut db);
    vec![
        (a, Tensor::new(vec![m, k], da).unwrap()),
        (b, Tensor::new(vec![k, n], db).unwrap()),
    ]
}

pub(super) fn affine_backward<F: Float>(
    x: NodeId,
    w: NodeId,
    b: NodeId,
    xv: &Tensor<F>,
    wv: &Tensor<F>,
    g: &Tensor<F>,
) -> Contributions<F> {
    let mut out = matmul_backward(x, w, xv, wv, g);
    let n = wv.shape()[1];
    let mut db = vec![F::zero(); n];
    for row in g.data().chunks_exact(n.max(1)) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += *v;
        }
    }
    out.push((b, Tensor::new(vec![n], db).unwrap()));
    out
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn affine_adds_bias_per_row() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1], vec![0.5]).unwrap());
        let y = x.affine(&w, &b).unwrap();
        assert_eq!(y.value().data(), &[2.5, 3.5]);
        let loss = y.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(&b).data(), &[2.0]);
        assert_eq!(grads.wrt(&w).data(), &[1.0, 1.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(a.matmul(&b).is_err());
    }
}
