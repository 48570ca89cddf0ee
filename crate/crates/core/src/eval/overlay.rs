use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatchBox};
use crate::error::{RapError, Result};
use crate::model::{ActionMode, RapModel, RolloutOptions};
use crate::nn::Mode;
use crate::policy::write_attention_dump;
use rap_autodiff::Tape;

/// Fraction of each attention cell's pixels covered by `patch`, for a
/// `side x side` grid over an `hw x hw` image.
pub fn cell_cover(side: usize, hw: usize, patch: &PatchBox) -> Vec<f64> {
    let cell = hw / side;
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let mut inside = 0;
            for y in i * cell..(i + 1) * cell {
                for x in j * cell..(j + 1) * cell {
                    inside += patch.contains(y, x) as usize;
                }
            }
            out.push(inside as f64 / (cell * cell) as f64);
        }
    }
    out
}

/// Attention mass on the patch over total mass, with each cell's mass
/// weighted by how much of it the patch covers. Uniform attention scores
/// the patch's share of the image.
pub fn patch_hit_score(attention: &[f64], side: usize, hw: usize, patch: &PatchBox) -> f64 {
    let total: f64 = attention.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let cover = cell_cover(side, hw, patch);
    attention.iter().zip(&cover).map(|(a, c)| a * c).sum::<f64>() / total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOverlay {
    pub index: usize,
    /// Clamped attention per step `t = 1..=T`, row-major `side x side`.
    pub attention: Vec<Vec<f64>>,
    pub hits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayReport {
    pub steps: usize,
    pub side: usize,
    /// Mean hit score per step `t = 1..=T`.
    pub mean_hit: Vec<f64>,
    /// Mean hit score of uniform attention on the same images.
    pub uniform: f64,
    pub images: Vec<ImageOverlay>,
}

impl OverlayReport {
    /// Attention matrices per image: an `image=<index>` line, then
    /// `step=<t>` blocks.
    pub fn write_matrices(&self, out: &mut impl Write) -> std::io::Result<()> {
        for img in &self.images {
            writeln!(out, "image={}", img.index)?;
            let steps: Vec<(usize, &[f64])> = img.attention.iter().enumerate().map(|(t, a)| (t + 1, a.as_slice())).collect();
            write_attention_dump(out, &steps, self.side)?;
        }
        Ok(())
    }
}

/// Deterministic (mean-action) rollouts over patch-cue images, scored
/// against the known patch locations.
pub fn dump_attention_overlay(model: &RapModel, data: &Dataset, indices: &[usize], steps: usize) -> Result<OverlayReport> {
    let patches = data
        .patches()
        .ok_or_else(|| RapError::Dataset("attention overlays need a dataset with patch locations".into()))?;
    let side = model.backbone().config().insertion_side();
    let hw = data.hw();
    let mut images = Vec::with_capacity(indices.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in indices.chunks(64) {
        let tape = Tape::new();
        let ctx = model.ctx(&tape, Mode::Eval);
        let x = tape.constant(data.batch::<f32>(chunk));
        let opts = RolloutOptions {
            mode: ActionMode::Deterministic,
            ..RolloutOptions::eval(steps)
        };
        let ro = model.rollout(&ctx, &x, opts, &mut rng)?;
        let dim = side * side;
        for (k, &index) in chunk.iter().enumerate() {
            let attention: Vec<Vec<f64>> = ro
                .actions
                .iter()
                .map(|a| {
                    a.clamped.value().data()[k * dim..(k + 1) * dim]
                        .iter()
                        .map(|&v| v as f64)
                        .collect()
                })
                .collect();
            let hits = attention
                .iter()
                .map(|a| patch_hit_score(a, side, hw, &patches[index]))
                .collect();
            images.push(ImageOverlay { index, attention, hits });
        }
    }
    let n = images.len().max(1) as f64;
    let mean_hit = (0..steps)
        .map(|t| images.iter().map(|i| i.hits[t]).sum::<f64>() / n)
        .collect();
    let uniform = indices
        .iter()
        .map(|&i| patch_hit_score(&vec![1.0; side * side], side, hw, &patches[i]))
        .sum::<f64>()
        / n;
    Ok(OverlayReport {
        steps,
        side,
        mean_hit,
        uniform,
        images,
    })
}
