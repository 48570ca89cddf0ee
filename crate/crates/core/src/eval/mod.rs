//! Frozen-parameter evaluation with confidence intervals, the ablation
//! harness and attention overlays.

mod ablate;
mod overlay;

pub use ablate::{ablate, AblationCell, AblationGrid, AblationResult, AblationRow, AttentionSetting, TestData};
pub use overlay::{cell_cover, dump_attention_overlay, patch_hit_score, ImageOverlay, OverlayReport};

use std::sync::OnceLock;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, Episode, EpisodeSampler};
use crate::error::Result;
use crate::metalearner::argmax_rows;
use crate::model::{ActionMode, RapModel, RolloutOptions};
use crate::nn::Mode;
use crate::trainer::{head_loss, stream_rng, Targets};
use rap_autodiff::Tape;

/// Random stream for evaluation unit `index` (an episode or a batch).
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    stream_rng(seed, (1 << 32) + index as u64)
}

/// Worker pool for evaluation; `RAP_THREADS` caps its size.
pub fn worker_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("RAP_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionEval {
    Policy,
    /// All-ones attention: the plain backbone.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSpec {
    pub steps: usize,
    pub attention: AttentionEval,
    pub deterministic: bool,
    pub seed: u64,
}

impl EvalSpec {
    pub fn from_config(cfg: &RunConfig, seed: u64) -> Self {
        Self {
            steps: cfg.train.steps,
            attention: if cfg.train.attention {
                AttentionEval::Policy
            } else {
                AttentionEval::Identity
            },
            deterministic: cfg.policy.deterministic_eval,
            seed,
        }
    }

    fn rollout(&self) -> RolloutOptions {
        match self.attention {
            AttentionEval::Identity => RolloutOptions::eval(0),
            AttentionEval::Policy => RolloutOptions {
                mode: if self.deterministic {
                    ActionMode::Deterministic
                } else {
                    ActionMode::Stochastic
                },
                ..RolloutOptions::eval(self.steps)
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    /// Episodes, or images in classification mode.
    pub count: usize,
    pub mean: f64,
    pub half_width: f64,
    /// Accuracy after `t` attention steps, `t = 0..=T`.
    pub per_step: Vec<f64>,
}

impl EvalReport {
    fn from_units(mode: &str, units: &[Vec<f64>]) -> Self {
        let steps = units.first().map_or(1, Vec::len);
        let n = units.len().max(1) as f64;
        let per_step: Vec<f64> = (0..steps).map(|t| units.iter().map(|u| u[t]).sum::<f64>() / n).collect();
        let headline: Vec<f64> = units.iter().map(|u| u[steps - 1]).collect();
        Self {
            mode: mode.to_string(),
            count: units.len(),
            mean: per_step.last().copied().unwrap_or(0.0),
            half_width: confidence_half_width(&headline),
            per_step,
        }
    }
}

/// `1.96 * s / sqrt(n)` with the sample standard deviation `s`.
pub fn confidence_half_width(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

/// Episode `i` is drawn from `episode_rng(seed, i)`.
pub fn sample_eval_episodes(
    data: &Dataset,
    classes: &[usize],
    way: usize,
    shot: usize,
    query: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let sampler = EpisodeSampler::new(data, classes, way, shot, query)?;
    Ok((0..count).map(|i| sampler.sample(&mut episode_rng(seed, i))).collect())
}

/// Per-step accuracy of one episode.
fn episode_accuracy(model: &RapModel, data: &Dataset, ep: &Episode, spec: &EvalSpec, index: usize) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let ctx = model.ctx(&tape, Mode::Eval);
    let x = tape.constant(data.batch::<f32>(&ep.images()));
    let ro = model.rollout(&ctx, &x, spec.rollout(), &mut episode_rng(spec.seed, index))?;
    let targets = Targets::for_episode(ep);
    ro.embeddings
        .iter()
        .map(|e| head_loss(model, &ctx, e, &targets).map(|(_, acc)| acc))
        .collect()
}

pub fn evaluate_episodes(model: &RapModel, data: &Dataset, episodes: &[Episode], spec: &EvalSpec) -> Result<EvalReport> {
    let units: Vec<Vec<f64>> = worker_pool().install(|| {
        episodes
            .par_iter()
            .enumerate()
            .map(|(i, ep)| episode_accuracy(model, data, ep, spec, i))
            .collect::<Result<_>>()
    })?;
    Ok(EvalReport::from_units("few_shot", &units))
}

/// Few-shot evaluation on `classes` with `episodes` freshly drawn episodes.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &RapModel,
    data: &Dataset,
    classes: &[usize],
    way: usize,
    shot: usize,
    query: usize,
    episodes: usize,
    spec: &EvalSpec,
) -> Result<EvalReport> {
    let eps = sample_eval_episodes(data, classes, way, shot, query, episodes, spec.seed)?;
    evaluate_episodes(model, data, &eps, spec)
}

/// Classification accuracy over `indices`, in batches of `batch_size`.
pub fn evaluate_images(
    model: &RapModel,
    data: &Dataset,
    indices: &[usize],
    spec: &EvalSpec,
    batch_size: usize,
) -> Result<EvalReport> {
    let chunks: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();
    let per_chunk: Vec<Vec<Vec<f64>>> = worker_pool().install(|| {
        chunks
            .par_iter()
            .enumerate()
            .map(|(i, idx)| -> Result<Vec<Vec<f64>>> {
                let tape = Tape::new();
                let ctx = model.ctx(&tape, Mode::Eval);
                let x = tape.constant(data.batch::<f32>(idx));
                let ro = model.rollout(&ctx, &x, spec.rollout(), &mut episode_rng(spec.seed, i))?;
                let head = model.arch.head.as_ref().ok_or_else(|| {
                    crate::error::RapError::InvalidConfig("classification needs a model with a linear head".into())
                })?;
                let mut hits = vec![Vec::with_capacity(ro.embeddings.len()); idx.len()];
                for e in &ro.embeddings {
                    let pred = argmax_rows(&head.logits(&ctx, e)?.value());
                    for (k, (&p, &i)) in pred.iter().zip(idx.iter()).enumerate() {
                        hits[k].push(if p == data.labels()[i] { 1.0 } else { 0.0 });
                    }
                }
                Ok(hits)
            })
            .collect::<Result<_>>()
    })?;
    let units: Vec<Vec<f64>> = per_chunk.into_iter().flatten().collect();
    Ok(EvalReport::from_units("classification", &units))
}
