//! The assembled model: backbone, attention policy and optional linear head.

use rand::Rng;
use rap_autodiff::{Float, ParamStore, Tape, Var};

use crate::backbone::Backbone;
use crate::config::{BackboneConfig, PolicyConfig};
use crate::error::{RapError, Result};
use crate::metalearner::LinearHead;
use crate::nn::{Ctx, Mode};
use crate::policy::{apply_attention, standard_normal, ActionRule, Policy, StepAction};

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub backbone: Backbone,
    pub policy: Policy,
    pub head: Option<LinearHead>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RapModel<F: Float = f32> {
    pub arch: Architecture,
    pub params: ParamStore<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Stochastic,
    Deterministic,
    /// All-ones attention at every step.
    Identity,
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions {
    pub steps: usize,
    pub mode: ActionMode,
    /// Feed embeddings to the policy as constants.
    pub detach_state: bool,
    /// Log batch statistics of the pre-insertion blocks, the policy convs
    /// and the final step's post-insertion blocks.
    pub record_stats: bool,
}

impl RolloutOptions {
    pub fn eval(steps: usize) -> Self {
        Self {
            steps,
            mode: ActionMode::Deterministic,
            detach_state: false,
            record_stats: false,
        }
    }
}

/// Embeddings `e_0..e_T` and the `T` actions that produced `e_1..e_T`.
#[derive(Debug, Clone)]
pub struct Rollout<'t, F: Float> {
    pub embeddings: Vec<Var<'t, F>>,
    pub actions: Vec<StepAction<'t, F>>,
}

impl<'t, F: Float> Rollout<'t, F> {
    pub fn final_embedding(&self) -> Var<'t, F> {
        *self.embeddings.last().expect("rollout always holds e_0")
    }
}

impl<F: Float> RapModel<F> {
    /// Builds a freshly initialized model; `classes` adds a linear head.
    pub fn new(backbone: &BackboneConfig, policy: &PolicyConfig, classes: Option<usize>, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let bb = Backbone::new(backbone, &mut params, rng)?;
        let pol = Policy::new(policy, backbone.embedding_dim(), backbone.attention_dim(), &mut params, rng)?;
        let block1 = bb.blocks()[0].trainable_scalars();
        if pol.conv_scalars() >= block1 {
            return Err(RapError::InvalidConfig(format!(
                "policy conv block has {} parameters, must be fewer than the backbone's first block ({block1})",
                pol.conv_scalars()
            )));
        }
        let head = classes.map(|c| LinearHead::new(&mut params, backbone.embedding_dim(), c, rng));
        Ok(Self {
            arch: Architecture {
                backbone: bb,
                policy: pol,
                head,
            },
            params,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.arch.backbone
    }

    pub fn policy(&self) -> &Policy {
        &self.arch.policy
    }

    pub fn cast<G: Float>(&self) -> RapModel<G> {
        RapModel {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    pub fn ctx<'t, 'p>(&'p self, tape: &'t Tape<F>, mode: Mode) -> Ctx<'t, 'p, F> {
        Ctx::new(tape, &self.params, mode, self.backbone().config().bn_eps)
    }

    /// Runs the attention recurrence on `images` (`[batch, hw, hw, 3]`).
    ///
    /// Every step attends the original insertion map.
    pub fn rollout<'t>(
        &self,
        ctx: &Ctx<'t, '_, F>,
        images: &Var<'t, F>,
        opts: RolloutOptions,
        rng: &mut impl Rng,
    ) -> Result<Rollout<'t, F>> {
        let (bb, pol) = (self.backbone(), self.policy());
        ctx.set_recording(opts.record_stats);
        let map = bb.forward_to_insertion(ctx, images)?;
        let features = match opts.mode {
            ActionMode::Identity => None,
            _ => Some(pol.image_features(ctx, images)?),
        };
        ctx.set_recording(opts.record_stats && opts.steps == 0);
        let e0 = bb.forward_from_insertion(ctx, &map)?;
        let mut embeddings = vec![e0];
        let mut actions = Vec::with_capacity(opts.steps);
        for t in 1..=opts.steps {
            let prev = embeddings[t - 1];
            let state = if opts.detach_state { prev.detach()? } else { prev };
            let action = match (&features, opts.mode) {
                (Some(f), mode) => {
                    let mean = pol.mean(ctx, f, &state)?;
                    match mode {
                        ActionMode::Stochastic => {
                            let eps = standard_normal::<F>(&mean.shape(), rng);
                            pol.act(&mean, ActionRule::Noise(&eps))?
                        }
                        _ => pol.act(&mean, ActionRule::Mean)?,
                    }
                }
                (None, _) => {
                    let batch = map.batch();
                    let zeros = ctx.tape.constant(rap_autodiff::Tensor::zeros(&[batch, pol.attention_dim()]));
                    pol.act(&zeros, ActionRule::Identity)?
                }
            };
            let refined = bb.wrap_map(apply_attention(&action.clamped, &map)?)?;
            ctx.set_recording(opts.record_stats && t == opts.steps);
            embeddings.push(bb.forward_from_insertion(ctx, &refined)?);
            actions.push(action);
        }
        ctx.set_recording(false);
        Ok(Rollout { embeddings, actions })
    }
}
