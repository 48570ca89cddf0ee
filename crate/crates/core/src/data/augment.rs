use rand::Rng;
use rap_autodiff::{Float, Tensor};

const PAD: usize = 4;

/// Random crop from a zero-padded image plus random horizontal flip,
/// per image of an NHWC batch.
pub fn augment_batch<F: Float>(batch: &mut Tensor<F>, rng: &mut impl Rng) {
    let &[n, h, w, c] = batch.shape() else {
        return;
    };
    let size = h * w * c;
    let mut src = vec![F::zero(); size];
    for img in batch.data_mut().chunks_exact_mut(size).take(n) {
        src.copy_from_slice(img);
        let dy = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
        let dx = rng.random_range(0..=2 * PAD) as isize - PAD as isize;
        let flip = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x } as isize + dx;
                let sy = y as isize + dy;
                let dst = &mut img[(y * w + x) * c..(y * w + x + 1) * c];
                if (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx) {
                    let s = (sy as usize * w + sx as usize) * c;
                    dst.copy_from_slice(&src[s..s + c]);
                } else {
                    dst.fill(F::zero());
                }
            }
        }
    }
}
