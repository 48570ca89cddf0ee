//! Rollouts with rewards from held-out data, the combined objective,
//! Adam updates, model selection and checkpoints.

mod adam;
mod checkpoint;
mod losses;
mod metrics;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, RngState};
pub use losses::{compute_rewards, reinforce_loss, total_loss};
pub use metrics::{IterationRecord, MetricsWriter};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rap_autodiff::{Float, Tape, Tensor, Var};

use crate::config::{RunConfig, TrainMode};
use crate::data::{augment_batch, Dataset, Episode, EpisodeSampler, SplitSets};
use crate::error::{RapError, Result};
use crate::eval::{evaluate_episodes, evaluate_images, EvalSpec};
use crate::metalearner::{compute_prototypes, linear_head_loss, protonet_loss};
use crate::model::{ActionMode, RapModel, RolloutOptions};
use crate::nn::{apply_stats, Ctx, Mode, PendingStats};
use losses::scalar;

/// Independent random streams of one run.
pub mod streams {
    pub const EPISODES: u64 = 0;
    pub const INIT: u64 = 1;
    pub const VAL_POOL: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const AUGMENT: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Targets for one batch of images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Targets {
    /// Rows are `way * shot` support images followed by the queries.
    Episode {
        way: usize,
        shot: usize,
        support: Vec<usize>,
        query: Vec<usize>,
    },
    Classes(Vec<usize>),
}

impl Targets {
    pub fn for_episode(ep: &Episode) -> Self {
        Targets::Episode {
            way: ep.way,
            shot: ep.shot,
            support: ep.support_labels(),
            query: ep.query_labels(),
        }
    }
}

/// Loss and accuracy of `embeddings` under the model's head.
pub fn head_loss<'t, F: Float>(
    model: &RapModel<F>,
    ctx: &Ctx<'t, '_, F>,
    embeddings: &Var<'t, F>,
    targets: &Targets,
) -> Result<(Var<'t, F>, f64)> {
    match targets {
        Targets::Episode {
            way,
            shot,
            support,
            query,
        } => {
            let ns = support.len();
            let s = embeddings.slice_rows(0, ns)?;
            let q = embeddings.slice_rows(ns, ns + query.len())?;
            let protos = compute_prototypes(&s, support, *way, *shot)?;
            let pred = protonet_loss(&q, query, &protos)?;
            let acc = pred.accuracy(query);
            Ok((pred.loss, acc))
        }
        Targets::Classes(labels) => {
            let head = model
                .arch
                .head
                .as_ref()
                .ok_or_else(|| RapError::InvalidConfig("classification needs a model with a linear head".into()))?;
            linear_head_loss(&head.logits(ctx, embeddings)?, labels)
        }
    }
}

/// Outcome of one forward/backward pass, before the update is applied.
pub struct StepResult<F: Float> {
    pub grads: Vec<Option<Tensor<F>>>,
    pub stats: Vec<PendingStats<F>>,
    pub train_loss: f64,
    pub rein_loss: f64,
    pub val_losses: Vec<f64>,
    pub rewards: Vec<f64>,
}

/// Random streams consumed by a training step.
pub struct StepRngs<'a> {
    pub noise: &'a mut ChaCha8Rng,
}

/// Builds `l_total` for one training batch and one validation batch and
/// differentiates it.
///
/// With attention the training rollout is fully differentiable; the
/// validation rollout feeds the policy constant states so the
/// score-function term only reaches the policy. Without attention the
/// plain backbone is trained on `l_train` (plus `l_val` when
/// `val_objective` is set).
pub fn train_step<F: Float>(
    model: &RapModel<F>,
    cfg: &RunConfig,
    train: (&Tensor<F>, &Targets),
    val: (&Tensor<F>, &Targets),
    baseline: Option<&[f64]>,
    rngs: StepRngs<'_>,
) -> Result<StepResult<F>> {
    let tc = &cfg.train;
    let tape = Tape::new();
    let ctx = model.ctx(&tape, Mode::Train);
    let x = tape.constant(train.0.clone());
    let xv = tape.constant(val.0.clone());
    let (objective, train_loss, rein_loss, val_losses, rewards) = if tc.attention {
        let opts = RolloutOptions {
            steps: tc.steps,
            mode: ActionMode::Stochastic,
            detach_state: false,
            record_stats: true,
        };
        let ro = model.rollout(&ctx, &x, opts, rngs.noise)?;
        let (l_train, _) = head_loss(model, &ctx, &ro.final_embedding(), train.1)?;
        let vopts = RolloutOptions {
            detach_state: true,
            record_stats: false,
            ..opts
        };
        let rv = model.rollout(&ctx, &xv, vopts, rngs.noise)?;
        let mut val_losses = Vec::with_capacity(tc.steps);
        let mut last_val = None;
        for e in &rv.embeddings[1..] {
            let (l, _) = head_loss(model, &ctx, e, val.1)?;
            val_losses.push(scalar(&l));
            last_val = Some(l);
        }
        let rewards = compute_rewards(&val_losses, tc.alpha as f64);
        let log_probs = rv
            .actions
            .iter()
            .map(|a| a.log_prob.sum())
            .collect::<rap_autodiff::Result<Vec<_>>>()?;
        let rein = reinforce_loss(&[log_probs], std::slice::from_ref(&rewards), baseline)?;
        let mut total = total_loss(&rein, &l_train)?;
        if tc.val_objective {
            total = total.add(&last_val.expect("steps >= 1"))?;
        }
        (total, scalar(&l_train), scalar(&rein), val_losses, rewards)
    } else {
        ctx.set_recording(true);
        let e = model.backbone().forward(&ctx, &x)?;
        ctx.set_recording(false);
        let (l_train, _) = head_loss(model, &ctx, &e, train.1)?;
        let mut total = l_train;
        let mut val_losses = Vec::new();
        if tc.val_objective {
            let ev = model.backbone().forward(&ctx, &xv)?;
            let (l_val, _) = head_loss(model, &ctx, &ev, val.1)?;
            val_losses.push(scalar(&l_val));
            total = total.add(&l_val)?;
        }
        (total, scalar(&l_train), 0.0, val_losses, Vec::new())
    };
    let limit = tc.divergence_threshold as f64;
    let checks = [("train loss", train_loss), ("reinforce loss", rein_loss)];
    for (what, v) in checks.into_iter().chain(val_losses.iter().map(|&v| ("validation loss", v))) {
        if !v.is_finite() || v.abs() > limit {
            return Err(RapError::NonFinite { what, value: v });
        }
    }
    let g = tape.backward(objective)?;
    let grads = ctx.bound().grads(&model.params, &g);
    if grads.iter().flatten().any(|t| !t.all_finite()) {
        return Err(RapError::NonFinite {
            what: "gradient",
            value: f64::NAN,
        });
    }
    Ok(StepResult {
        grads,
        stats: ctx.take_stats(),
        train_loss,
        rein_loss,
        val_losses,
        rewards,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_val_acc: f64,
    pub best_iteration: usize,
    pub last: Checkpoint,
    pub records: Vec<IterationRecord>,
}

/// Where batches come from.
enum Source<'a> {
    Episodes {
        train: EpisodeSampler,
        val: EpisodeSampler,
        pool: Vec<Episode>,
    },
    Images {
        train: &'a [usize],
        val: &'a [usize],
        order: Vec<usize>,
        cursor: usize,
    },
}

struct Run<'a> {
    cfg: &'a RunConfig,
    model: RapModel,
    adam: Adam,
    episodes: ChaCha8Rng,
    noise: ChaCha8Rng,
    augment: ChaCha8Rng,
    baseline: Option<Vec<f64>>,
}

impl Run<'_> {
    fn snapshot(&self, iteration: usize, val_acc: Option<f64>) -> Checkpoint {
        let mut meta = vec![("iteration".to_string(), iteration.to_string())];
        if let Some(a) = val_acc {
            meta.push(("val_acc".to_string(), a.to_string()));
        }
        Checkpoint::capture(
            &self.model,
            Some(&self.adam),
            &[&self.episodes, &self.noise, &self.augment],
            self.cfg,
            meta,
        )
    }

    fn eval_spec(&self) -> EvalSpec {
        EvalSpec::from_config(self.cfg, self.cfg.train.seed)
    }
}

/// Trains a model from scratch. In few-shot mode `split` holds class ids;
/// in classification mode it holds image indices (train and val).
///
/// `on_record` sees every iteration's metrics as they are produced.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    split: &SplitSets,
    on_record: &mut dyn FnMut(&IterationRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let seed = tc.seed;
    let classes = match tc.mode {
        TrainMode::FewShot => None,
        TrainMode::Classification => Some(data.num_classes()),
    };
    let model = RapModel::new(&cfg.backbone, &cfg.policy, classes, &mut stream_rng(seed, streams::INIT))?;
    let adam_cfg = AdamConfig {
        lr: tc.lr as f64,
        beta1: tc.beta1 as f64,
        beta2: tc.beta2 as f64,
        eps: tc.adam_eps as f64,
    };
    let adam = Adam::new(adam_cfg, &model.params);
    let mut source = match tc.mode {
        TrainMode::FewShot => {
            // a validation split may hold fewer classes than the training way
            let val_way = tc.way.min(split.val.len()).max(2);
            let val = EpisodeSampler::new(data, &split.val, val_way, tc.shot, tc.query)?;
            let mut pool_rng = stream_rng(seed, streams::VAL_POOL);
            let pool = (0..tc.val_pool).map(|_| val.sample(&mut pool_rng)).collect();
            Source::Episodes {
                train: EpisodeSampler::new(data, &split.train, tc.way, tc.shot, tc.query)?,
                val,
                pool,
            }
        }
        TrainMode::Classification => {
            if split.train.len() < 2 || split.val.len() < 2 {
                return Err(RapError::InsufficientData(
                    "classification needs at least 2 train and 2 val images".into(),
                ));
            }
            Source::Images {
                train: &split.train,
                val: &split.val,
                order: Vec::new(),
                cursor: 0,
            }
        }
    };
    let iterations = match &source {
        Source::Episodes { .. } => tc.iterations,
        Source::Images { train, .. } => tc.epochs * train.len().div_ceil(tc.batch_size),
    };
    let mut run = Run {
        cfg,
        model,
        adam,
        episodes: stream_rng(seed, streams::EPISODES),
        noise: stream_rng(seed, streams::NOISE),
        augment: stream_rng(seed, streams::AUGMENT),
        baseline: None,
    };
    let mut best: Option<(Checkpoint, f64, usize)> = None;
    let mut records = Vec::with_capacity(iterations);
    for it in 1..=iterations {
        let (train_idx, train_t, val_idx, val_t) = match &mut source {
            Source::Episodes { train, val, .. } => {
                let te = train.sample(&mut run.episodes);
                let ve = val.sample(&mut run.episodes);
                (te.images(), Targets::for_episode(&te), ve.images(), Targets::for_episode(&ve))
            }
            Source::Images {
                train,
                val,
                order,
                cursor,
            } => {
                if *cursor >= order.len() {
                    *order = train.to_vec();
                    order.shuffle(&mut run.episodes);
                    *cursor = 0;
                }
                let end = (*cursor + tc.batch_size).min(order.len());
                let mut idx = order[*cursor..end].to_vec();
                *cursor = end;
                if idx.len() < 2 {
                    idx.extend_from_slice(&order[..2 - idx.len()]);
                }
                let n = tc.batch_size.min(val.len());
                let vi: Vec<usize> = index::sample(&mut run.episodes, val.len(), n)
                    .into_iter()
                    .map(|i| val[i])
                    .collect();
                let tl = idx.iter().map(|&i| data.labels()[i]).collect();
                let vl = vi.iter().map(|&i| data.labels()[i]).collect();
                (idx, Targets::Classes(tl), vi, Targets::Classes(vl))
            }
        };
        let mut xt = data.batch::<f32>(&train_idx);
        if cfg.data.augment {
            augment_batch(&mut xt, &mut run.augment);
        }
        let xv = data.batch::<f32>(&val_idx);
        let step = train_step(
            &run.model,
            cfg,
            (&xt, &train_t),
            (&xv, &val_t),
            if tc.baseline_subtraction {
                run.baseline.as_deref()
            } else {
                None
            },
            StepRngs { noise: &mut run.noise },
        );
        let step = match step {
            Ok(s) => s,
            Err(RapError::NonFinite { what, value }) => {
                return Err(RapError::Diverged {
                    iteration: it,
                    what,
                    value,
                    last_good: Some(Box::new(run.snapshot(it - 1, None))),
                })
            }
            Err(e) => return Err(e),
        };
        run.adam.update(&mut run.model.params, &step.grads)?;
        apply_stats(&mut run.model.params, &step.stats, cfg.backbone.bn_momentum);
        if tc.baseline_subtraction && !step.rewards.is_empty() {
            let m = tc.baseline_momentum as f64;
            run.baseline = Some(match run.baseline.take() {
                None => step.rewards.clone(),
                Some(b) => b.iter().zip(&step.rewards).map(|(b, r)| m * b + (1.0 - m) * r).collect(),
            });
        }
        let val_acc = if it % tc.eval_every == 0 || it == iterations {
            let spec = run.eval_spec();
            let report = match &source {
                Source::Episodes { pool, .. } => evaluate_episodes(&run.model, data, pool, &spec)?,
                Source::Images { val, .. } => evaluate_images(&run.model, data, val, &spec, tc.batch_size)?,
            };
            Some(report.mean)
        } else {
            None
        };
        let mean_reward = if step.rewards.is_empty() {
            0.0
        } else {
            step.rewards.iter().sum::<f64>() / step.rewards.len() as f64
        };
        let rec = IterationRecord {
            iteration: it,
            train_loss: step.train_loss,
            rein_loss: step.rein_loss,
            mean_reward,
            val_acc,
        };
        on_record(&rec)?;
        records.push(rec);
        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|b| acc > b.1) {
                best = Some((run.snapshot(it, Some(acc)), acc, it));
            }
        }
    }
    let last = run.snapshot(iterations, None);
    let (best, best_val_acc, best_iteration) = best.unwrap_or_else(|| (last.clone(), f64::NAN, 0));
    Ok(TrainOutcome {
        best,
        best_val_acc,
        best_iteration,
        last,
        records,
    })
}
