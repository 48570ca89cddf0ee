use std::f64::consts::TAU;

use rand::Rng;

use super::{Dataset, PatchBox};
use crate::error::{RapError, Result};

const FREQS: [f64; 4] = [0.0, 0.9, 1.8, 2.7];

/// Distinct (pattern, colour) signatures available.
pub const MAX_PATCHCUE_CLASSES: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchCueParams {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub hw: usize,
    pub patch_size: usize,
    /// Amplitude of each low-frequency clutter wave.
    pub clutter: f32,
    /// Half-width of the i.i.d. uniform pixel noise.
    pub noise: f32,
    /// When false the same images are drawn with the patch left out.
    pub with_patch: bool,
}

impl Default for PatchCueParams {
    fn default() -> Self {
        Self {
            num_classes: 25,
            images_per_class: 60,
            hw: 32,
            patch_size: 6,
            clutter: 0.2,
            noise: 0.15,
            with_patch: true,
        }
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The patch of class `class` as bytes `[size, size, 3]`.
///
/// Texture is a separable cosine over distance from the patch centre
/// (mirror symmetric); colour is a sign per channel.
pub fn class_template(class: usize, size: usize) -> Vec<u8> {
    let pattern = class % 16;
    let colour = (class / 16 + class) % 8;
    let (wx, wy) = (FREQS[pattern % 4], FREQS[pattern / 4]);
    let signs = [0, 1, 2].map(|b| if colour >> b & 1 == 1 { 1.0 } else { -1.0 });
    let centre = (size as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let p = (wy * (r as f64 - centre).abs()).cos() * (wx * (c as f64 - centre).abs()).cos();
            for s in signs {
                out.push(to_byte(0.5 + 0.45 * p * s));
            }
        }
    }
    out
}

pub fn generate_patchcue(params: &PatchCueParams, rng: &mut impl Rng) -> Result<Dataset> {
    let &PatchCueParams {
        num_classes,
        images_per_class,
        hw,
        patch_size,
        ..
    } = params;
    if patch_size == 0 || patch_size > hw {
        return Err(RapError::InvalidConfig(format!(
            "patch of size {patch_size} does not fit a {hw}x{hw} image"
        )));
    }
    if num_classes == 0 || num_classes > MAX_PATCHCUE_CLASSES {
        return Err(RapError::InvalidConfig(format!(
            "patch-cue supports 1..={MAX_PATCHCUE_CLASSES} classes, got {num_classes}"
        )));
    }
    let templates: Vec<Vec<u8>> = (0..num_classes).map(|k| class_template(k, patch_size)).collect();
    let count = num_classes * images_per_class;
    let mut pixels = Vec::with_capacity(count * hw * hw * 3);
    let mut labels = Vec::with_capacity(count);
    let mut patches = Vec::with_capacity(count);
    let (clutter, noise) = (params.clutter as f64, params.noise as f64);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..images_per_class {
            let mut waves = Vec::with_capacity(6);
            for _ in 0..3 {
                for _ in 0..2 {
                    let amp = rng.random_range(-1.0..=1.0) * clutter;
                    let fx = rng.random_range(0..3) as f64;
                    let fy = rng.random_range(0..3) as f64;
                    let phase = rng.random_range(0.0..TAU);
                    waves.push((amp, fx, fy, phase));
                }
            }
            let start = pixels.len();
            for y in 0..hw {
                for x in 0..hw {
                    for ch in 0..3 {
                        let mut v = 0.5;
                        for &(amp, fx, fy, phase) in &waves[ch * 2..ch * 2 + 2] {
                            v += amp * (TAU * (fx * x as f64 + fy * y as f64) / hw as f64 + phase).cos();
                        }
                        v += rng.random_range(-1.0..=1.0) * noise;
                        pixels.push(to_byte(v));
                    }
                }
            }
            let row = rng.random_range(0..=hw - patch_size);
            let col = rng.random_range(0..=hw - patch_size);
            if params.with_patch {
                let t = template;
                for r in 0..patch_size {
                    let dst = start + ((row + r) * hw + col) * 3;
                    pixels[dst..dst + patch_size * 3].copy_from_slice(&t[r * patch_size * 3..(r + 1) * patch_size * 3]);
                }
            }
            labels.push(class);
            patches.push(PatchBox {
                row,
                col,
                size: patch_size,
            });
        }
    }
    Dataset::new(hw, pixels, labels, num_classes)?.with_patches(patches)
}

/// Classifies the pixels under `patch` by nearest class template
/// (squared distance); ties go to the lower class id.
pub fn nearest_template(dataset: &Dataset, index: usize, patch: &PatchBox) -> usize {
    let hw = dataset.hw();
    let img = dataset.image_bytes(index);
    let mut region = Vec::with_capacity(patch.size * patch.size * 3);
    for r in 0..patch.size {
        let s = ((patch.row + r) * hw + patch.col) * 3;
        region.extend_from_slice(&img[s..s + patch.size * 3]);
    }
    (0..dataset.num_classes())
        .map(|k| {
            let t = class_template(k, patch.size);
            let d: i64 = t.iter().zip(&region).map(|(&a, &b)| (a as i64 - b as i64).pow(2)).sum();
            (d, k)
        })
        .min()
        .map(|(_, k)| k)
        .unwrap_or(0)
}
