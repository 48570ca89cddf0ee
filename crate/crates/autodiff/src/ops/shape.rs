use crate::error::{mismatch, AutodiffError, Result};
use crate::float::Float;
use crate::tape::{NodeId, Op, Var};
use crate::tensor::{row_stride, Tensor};

use super::Contributions;

impl<'t, F: Float> Var<'t, F> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        self.check()?;
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Concatenates two `[rows, *]` matrices along the column axis.
    pub fn concat_cols(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_pair(other)?;
        let (a, b) = (self.value(), other.value());
        let (&[ra, ca], &[rb, cb]) = (a.shape(), b.shape()) else {
            return Err(mismatch("concat_cols", a.shape(), b.shape()));
        };
        if ra != rb {
            return Err(mismatch("concat_cols", a.shape(), b.shape()));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![ra, ca + cb], out)?;
        Ok(self.binary(other, value, Op::Concat(self.id, other.id)))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t, F>> {
        self.check()?;
        let v = self.value().slice_rows(start, end)?;
        Ok(self.unary(v, Op::SliceRows { x: self.id, start }))
    }

    /// Rows of the leading axis in the order given; indices may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t, F>> {
        self.check()?;
        if self.value().rank() == 0 {
            return Err(AutodiffError::InvalidShape {
                op: "gather_rows",
                reason: "scalar input".into(),
            });
        }
        let v = self.value().gather_rows(indices)?;
        let op = Op::GatherRows {
            x: self.id,
            indices: indices.to_vec(),
        };
        Ok(self.unary(v, op))
    }
}

pub(super) fn concat_backward<F: Float>(a: NodeId, b: NodeId, av: &Tensor<F>, bv: &Tensor<F>, g: &Tensor<F>) -> Contributions<F> {
    let (rows, ca, cb) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
    let mut da = Vec::with_capacity(rows * ca);
    let mut db = Vec::with_capacity(rows * cb);
    for row in g.data().chunks_exact((ca + cb).max(1)) {
        da.extend_from_slice(&row[..ca]);
        db.extend_from_slice(&row[ca..]);
    }
    vec![
        (a, Tensor::new(av.shape().to_vec(), da).unwrap()),
        (b, Tensor::new(bv.shape().to_vec(), db).unwrap()),
    ]
}

pub(super) fn slice_rows_backward<F: Float>(x: NodeId, xv: &Tensor<F>, start: usize, g: &Tensor<F>) -> Contributions<F> {
    let stride = row_stride(xv.shape());
    let mut dx = Tensor::zeros(xv.shape());
    dx.data_mut()[start * stride..start * stride + g.len()].copy_from_slice(g.data());
    vec![(x, dx)]
}

pub(super) fn gather_rows_backward<F: Float>(x: NodeId, xv: &Tensor<F>, indices: &[usize], g: &Tensor<F>) -> Contributions<F> {
    let stride = row_stride(xv.shape());
    let mut dx = Tensor::zeros(xv.shape());
    let d = dx.data_mut();
    for (k, &i) in indices.iter().enumerate() {
        for (dst, src) in d[i * stride..(i + 1) * stride]
            .iter_mut()
            .zip(&g.data()[k * stride..(k + 1) * stride])
        {
            *dst += *src;
        }
    }
    vec![(x, dx)]
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn concat_interleaves_rows() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = a.concat_cols(&b).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let y = x.gather_rows(&[1, 1, 0]).unwrap();
        let grads = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(&x).data(), &[1.0, 2.0]);
    }
}
