//! 3x3, stride 1, zero "same" padding convolution over NHWC tensors.

use crate::error::{mismatch, Result};
use crate::float::Float;
use crate::tape::{NodeId, Op, Var};
use crate::tensor::Tensor;

use super::Contributions;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvGeom {
    fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }

    fn patch(&self) -> usize {
        TAPS * self.c_in
    }
}

/// Column range of kernel taps that land inside the image for output column `xo`.
fn taps(xo: usize, w: usize) -> (usize, usize) {
    (usize::from(xo == 0), if xo + 1 == w { KERNEL - 1 } else { KERNEL })
}

/// Unrolls every 3x3 neighbourhood into one row of `pixels x (9 * c_in)`.
fn im2col<F: Float>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let (h, w, c) = (g.height, g.width, g.c_in);
    let patch = g.patch();
    let mut cols = vec![F::zero(); g.pixels() * patch];
    for b in 0..g.batch {
        for y in 0..h {
            for ky in 0..KERNEL {
                let iy = y + ky;
                if iy == 0 || iy > h {
                    continue;
                }
                let src_row = (b * h + iy - 1) * w;
                for xo in 0..w {
                    let (lo, hi) = taps(xo, w);
                    let row = ((b * h + y) * w + xo) * patch;
                    let src = (src_row + xo + lo - 1) * c;
                    let dst = row + (ky * KERNEL + lo) * c;
                    let len = (hi - lo) * c;
                    cols[dst..dst + len].copy_from_slice(&x[src..src + len]);
                }
            }
        }
    }
    cols
}

fn col2im<F: Float>(cols: &[F], g: &ConvGeom) -> Vec<F> {
    let (h, w, c) = (g.height, g.width, g.c_in);
    let patch = g.patch();
    let mut dx = vec![F::zero(); g.pixels() * c];
    for b in 0..g.batch {
        for y in 0..h {
            for ky in 0..KERNEL {
                let iy = y + ky;
                if iy == 0 || iy > h {
                    continue;
                }
                let dst_row = (b * h + iy - 1) * w;
                for xo in 0..w {
                    let (lo, hi) = taps(xo, w);
                    let row = ((b * h + y) * w + xo) * patch;
                    let dst = (dst_row + xo + lo - 1) * c;
                    let src = row + (ky * KERNEL + lo) * c;
                    let len = (hi - lo) * c;
                    for (d, s) in dx[dst..dst + len].iter_mut().zip(&cols[src..src + len]) {
                        *d += *s;
                    }
                }
            }
        }
    }
    dx
}

impl<'t, F: Float> Var<'t, F> {
    /// `x: [batch, h, w, c_in]`, `weight: [3, 3, c_in, c_out]` ->
    /// `[batch, h, w, c_out]`. No bias; every conv here feeds a batch norm.
    pub fn conv2d(&self, weight: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_pair(weight)?;
        let (x, wt) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), wt.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != KERNEL || ws[1] != KERNEL || ws[2] != xs[3] {
            return Err(mismatch("conv2d", xs, ws));
        }
        let geom = ConvGeom {
            batch: xs[0],
            height: xs[1],
            width: xs[2],
            c_in: xs[3],
            c_out: ws[3],
        };
        let cols = im2col(x.data(), &geom);
        let mut out = vec![F::zero(); geom.pixels() * geom.c_out];
        F::gemm(
            false,
            false,
            geom.pixels(),
            geom.patch(),
            geom.c_out,
            &cols,
            wt.data(),
            F::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![geom.batch, geom.height, geom.width, geom.c_out], out)?;
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            cols,
            geom,
        };
        Ok(self.binary(weight, value, op))
    }
}

pub(super) fn conv2d_backward<F: Float>(
    x: NodeId,
    w: NodeId,
    wv: &Tensor<F>,
    cols: &[F],
    geom: &ConvGeom,
    g: &Tensor<F>,
    need_x: bool,
) -> Contributions<F> {
    let (p, k, n) = (geom.pixels(), geom.patch(), geom.c_out);
    let mut dw = vec![F::zero(); k * n];
    F::gemm(true, false, k, p, n, cols, g.data(), F::zero(), &mut dw);
    let mut out = vec![(w, Tensor::new(wv.shape().to_vec(), dw).unwrap())];
    if need_x {
        let mut dcols = vec![F::zero(); p * k];
        F::gemm(false, true, p, n, k, g.data(), wv.data(), F::zero(), &mut dcols);
        let dx = col2im(&dcols, geom);
        out.push((
            x,
            Tensor::new(vec![geom.batch, geom.height, geom.width, geom.c_in], dx).unwrap(),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    /// Direct definition of same-padded cross-correlation, used as the oracle.
    fn hand_conv(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
        let (b, h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let co = w.shape()[3];
        let mut out = vec![0.0; b * h * wd * co];
        for n in 0..b {
            for y in 0..h as isize {
                for xx in 0..wd as isize {
                    for o in 0..co {
                        let mut acc = 0.0;
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (iy, ix) = (y + ky - 1, xx + kx - 1);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for c in 0..ci {
                                    let xi = ((n * h + iy as usize) * wd + ix as usize) * ci + c;
                                    let wi = ((ky as usize * 3 + kx as usize) * ci + c) * co + o;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out[((n * h + y as usize) * wd + xx as usize) * co + o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_five_by_five() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 5, 5, 1]));
        let w = tape.constant(Tensor::ones(&[3, 3, 1, 1]));
        let y = x.conv2d(&w).unwrap().value();
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[2], 6.0);
    }

    #[test]
    fn matches_direct_convolution() {
        let x = Tensor::from_fn(&[2, 4, 3, 2], |i| ((i * 7 % 11) as f64 - 5.0) * 0.1);
        let w = Tensor::from_fn(&[3, 3, 2, 3], |i| ((i * 5 % 13) as f64 - 6.0) * 0.05);
        let want = hand_conv(&x, &w);
        let tape = Tape::<f64>::new();
        let y = tape.constant(x).conv2d(&tape.constant(w)).unwrap().value();
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 4, 4, 3]));
        let w = tape.constant(Tensor::ones(&[3, 3, 2, 8]));
        let err = x.conv2d(&w).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }
}
