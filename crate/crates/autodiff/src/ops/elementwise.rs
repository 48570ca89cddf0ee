use crate::error::{mismatch, AutodiffError, Result};
use crate::float::Float;
use crate::tape::{NodeId, Op, Var};
use crate::tensor::Tensor;

use super::Contributions;

fn zip_with<F: Float>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn same_shape<F: Float>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'t, F: Float> Var<'t, F> {
    pub fn add(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_pair(other)?;
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        Ok(self.binary(other, zip_with(&a, &b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_pair(other)?;
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        Ok(self.binary(other, zip_with(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    /// Elementwise product of equally shaped operands.
    pub fn mul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_pair(other)?;
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        Ok(self.binary(other, zip_with(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: F) -> Result<Var<'t, F>> {
        self.check()?;
        let v = self.value().map(|x| x * c);
        Ok(self.unary(v, Op::Scale(self.id, c)))
    }

    pub fn neg(&self) -> Result<Var<'t, F>> {
        self.scale(-F::one())
    }

    /// Adds a constant tensor of the same shape.
    pub fn shift(&self, offset: &Tensor<F>) -> Result<Var<'t, F>> {
        self.check()?;
        let a = self.value();
        same_shape("shift", &a, offset)?;
        Ok(self.unary(zip_with(&a, offset, |x, y| x + y), Op::Shift(self.id)))
    }

    pub fn relu(&self) -> Result<Var<'t, F>> {
        self.check()?;
        let v = self.value().map(|x| if x > F::zero() { x } else { F::zero() });
        Ok(self.unary(v, Op::Relu(self.id)))
    }

    pub fn sigmoid(&self) -> Result<Var<'t, F>> {
        self.check()?;
        let v = self.value().map(sigmoid);
        Ok(self.unary(v, Op::Sigmoid(self.id)))
    }

    /// Restricts every element to `[lo, hi]`; the adjoint is zero wherever
    /// the bound is active.
    pub fn clamp(&self, lo: F, hi: F) -> Result<Var<'t, F>> {
        self.check()?;
        if lo > hi {
            return Err(AutodiffError::InvalidArgument {
                op: "clamp",
                reason: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        let v = self.value().map(|x| x.max(lo).min(hi));
        Ok(self.unary(v, Op::Clamp { x: self.id, lo, hi }))
    }

    /// Spatial attention: `out[b,i,j,k] = att[b, i*w + j] * map[b,i,j,k]`.
    ///
    /// `self` is the attention of shape `[batch, h*w]`, `map` is
    /// `[batch, h, w, c]`. This is the only broadcasting op on the tape.
    pub fn mul_channel_broadcast(&self, map: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_pair(map)?;
        let (att, m) = (self.value(), map.value());
        let ms = m.shape();
        if ms.len() != 4 || att.shape() != [ms[0], ms[1] * ms[2]] {
            return Err(mismatch("mul_channel_broadcast", att.shape(), ms));
        }
        let c = ms[3];
        let mut out = Vec::with_capacity(m.len());
        for (p, chunk) in m.data().chunks_exact(c.max(1)).enumerate() {
            let a = att.data()[p];
            out.extend(chunk.iter().map(|&v| a * v));
        }
        if c == 0 {
            out.clear();
        }
        let value = Tensor::new(ms.to_vec(), out)?;
        Ok(self.binary(
            map,
            value,
            Op::MulChannel {
                att: self.id,
                map: map.id,
            },
        ))
    }
}

pub fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(super) fn mul_backward<F: Float>(a: NodeId, b: NodeId, av: &Tensor<F>, bv: &Tensor<F>, g: &Tensor<F>) -> Contributions<F> {
    vec![(a, zip_with(g, bv, |g, y| g * y)), (b, zip_with(g, av, |g, x| g * x))]
}

pub(super) fn relu_backward<F: Float>(a: NodeId, x: &Tensor<F>, g: &Tensor<F>) -> Contributions<F> {
    vec![(a, zip_with(g, x, |g, x| if x > F::zero() { g } else { F::zero() }))]
}

pub(super) fn sigmoid_backward<F: Float>(a: NodeId, y: &Tensor<F>, g: &Tensor<F>) -> Contributions<F> {
    vec![(a, zip_with(g, y, |g, y| g * y * (F::one() - y)))]
}

pub(super) fn clamp_backward<F: Float>(a: NodeId, x: &Tensor<F>, lo: F, hi: F, g: &Tensor<F>) -> Contributions<F> {
    vec![(a, zip_with(g, x, |g, x| if x > lo && x < hi { g } else { F::zero() }))]
}

pub(super) fn mul_channel_backward<F: Float>(
    att: NodeId,
    map: NodeId,
    av: &Tensor<F>,
    mv: &Tensor<F>,
    g: &Tensor<F>,
) -> Contributions<F> {
    let c = mv.shape()[3];
    let mut d_att = Tensor::zeros(av.shape());
    let mut d_map = Tensor::zeros(mv.shape());
    if c > 0 {
        let dm = d_map.data_mut();
        for (p, (gc, mc)) in g.data().chunks_exact(c).zip(mv.data().chunks_exact(c)).enumerate() {
            let a = av.data()[p];
            let mut acc = F::zero();
            for k in 0..c {
                acc += gc[k] * mc[k];
                dm[p * c + k] = gc[k] * a;
            }
            d_att.data_mut()[p] = acc;
        }
    }
    vec![(att, d_att), (map, d_map)]
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn multiply_by_ones_is_identity() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.constant(Tensor::ones(&[3]));
        assert_eq!(x.mul(&y).unwrap().value().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1]));
        assert_eq!(x.sigmoid().unwrap().value().data(), &[0.5]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(super::sigmoid(-1000.0f64), 0.0);
        assert_eq!(super::sigmoid(1000.0f64), 1.0);
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let y = tape.leaf(Tensor::zeros(&[3, 2]));
        let err = x.add(&y).unwrap_err();
        assert_eq!(
            err,
            crate::AutodiffError::ShapeMismatch {
                op: "add",
                left: vec![2, 3],
                right: vec![3, 2]
            }
        );
    }

    #[test]
    fn channel_broadcast_duplicates_across_channels() {
        let tape = Tape::<f32>::new();
        let att = tape.constant(Tensor::new(vec![1, 4], vec![0.5, 1.0, 0.0, 1.0]).unwrap());
        let map = tape.constant(Tensor::ones(&[1, 2, 2, 3]));
        let out = att.mul_channel_broadcast(&map).unwrap().value();
        for k in 0..3 {
            let slice: Vec<f32> = (0..4).map(|p| out.data()[p * 3 + k]).collect();
            assert_eq!(slice, vec![0.5, 1.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn channel_broadcast_checks_spatial_extent() {
        let tape = Tape::<f32>::new();
        let att = tape.constant(Tensor::ones(&[1, 5]));
        let map = tape.constant(Tensor::ones(&[1, 2, 2, 3]));
        assert!(att.mul_channel_broadcast(&map).is_err());
    }
}
