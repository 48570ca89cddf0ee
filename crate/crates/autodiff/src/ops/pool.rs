use crate::error::{AutodiffError, Result};
use crate::float::Float;
use crate::tape::{NodeId, Op, Var};
use crate::tensor::Tensor;

use super::Contributions;

fn nhwc(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [b, h, w, c] => Ok((*b, *h, *w, *c)),
        _ => Err(AutodiffError::InvalidShape {
            op,
            reason: format!("expected [batch, h, w, c], got {shape:?}"),
        }),
    }
}

impl<'t, F: Float> Var<'t, F> {
    /// 2x2 max pooling with stride 2. Height and width must be even.
    pub fn max_pool2(&self) -> Result<Var<'t, F>> {
        self.check()?;
        let x = self.value();
        let (b, h, w, c) = nhwc("max_pool2", x.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutodiffError::InvalidShape {
                op: "max_pool2",
                reason: format!("spatial extent {h}x{w} is not even"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * oh * ow * c);
        let mut argmax = Vec::with_capacity(b * oh * ow * c);
        let data = x.data();
        for n in 0..b {
            for y in 0..oh {
                for xo in 0..ow {
                    for ch in 0..c {
                        let mut best = ((n * h + 2 * y) * w + 2 * xo) * c + ch;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ((n * h + 2 * y + dy) * w + 2 * xo + dx) * c + ch;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                        out.push(data[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, oh, ow, c], out)?;
        Ok(self.unary(value, Op::MaxPool { x: self.id, argmax }))
    }

    /// Mean over the spatial axes: `[batch, h, w, c] -> [batch, c]`.
    pub fn global_avg_pool(&self) -> Result<Var<'t, F>> {
        self.check()?;
        let x = self.value();
        let (b, h, w, c) = nhwc("global_avg_pool", x.shape())?;
        let spatial = h * w;
        if spatial == 0 {
            return Err(AutodiffError::InvalidShape {
                op: "global_avg_pool",
                reason: "empty spatial extent".into(),
            });
        }
        let inv = F::one() / F::from_usize(spatial).unwrap();
        let mut out = vec![F::zero(); b * c];
        for n in 0..b {
            let acc = &mut out[n * c..(n + 1) * c];
            for px in x.data()[n * spatial * c..(n + 1) * spatial * c].chunks_exact(c.max(1)) {
                for (a, v) in acc.iter_mut().zip(px) {
                    *a += *v;
                }
            }
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
        let value = Tensor::new(vec![b, c], out)?;
        Ok(self.unary(value, Op::GlobalAvgPool { x: self.id, spatial }))
    }
}

pub(super) fn max_pool_backward<F: Float>(x: NodeId, xv: &Tensor<F>, argmax: &[usize], g: &Tensor<F>) -> Contributions<F> {
    let mut dx = Tensor::zeros(xv.shape());
    let d = dx.data_mut();
    for (&idx, &gv) in argmax.iter().zip(g.data()) {
        d[idx] += gv;
    }
    vec![(x, dx)]
}

pub(super) fn gap_backward<F: Float>(x: NodeId, xv: &Tensor<F>, spatial: usize, g: &Tensor<F>) -> Contributions<F> {
    let c = xv.shape()[3];
    let inv = F::one() / F::from_usize(spatial).unwrap();
    let mut dx = Tensor::zeros(xv.shape());
    if c > 0 {
        for (n, img) in dx.data_mut().chunks_exact_mut(spatial * c).enumerate() {
            let gr = &g.data()[n * c..(n + 1) * c];
            for px in img.chunks_exact_mut(c) {
                for (d, gv) in px.iter_mut().zip(gr) {
                    *d = *gv * inv;
                }
            }
        }
    }
    vec![(x, dx)]
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn max_pool_picks_block_maximum() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 4.0, 3.0, 2.0]).unwrap());
        let y = x.max_pool2().unwrap();
        assert_eq!(y.value().data(), &[4.0]);
        let grads = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(&x).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_odd_extent() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 2, 1]));
        assert!(x.max_pool2().is_err());
    }

    #[test]
    fn gap_averages_each_channel() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 10.0, 3.0, 20.0]).unwrap());
        assert_eq!(x.global_avg_pool().unwrap().value().data(), &[2.0, 15.0]);
    }
}
