//! Shared building blocks: the forward context and the conv block.

use std::cell::{Cell, RefCell};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rap_autodiff::{BatchStats, Bound, Float, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Batch statistics observed during a forward pass, waiting to be folded
/// into the running buffers.
#[derive(Debug, Clone)]
pub struct PendingStats<F> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats<F>,
}

/// Everything a forward pass needs: the tape, the parameters bound on it
/// and the batch-norm mode.
pub struct Ctx<'t, 'p, F: Float> {
    pub tape: &'t Tape<F>,
    pub params: &'p ParamStore<F>,
    bound: Bound<'t, F>,
    mode: Mode,
    bn_eps: F,
    record: Cell<bool>,
    pending: RefCell<Vec<PendingStats<F>>>,
}

impl<'t, 'p, F: Float> Ctx<'t, 'p, F> {
    pub fn new(tape: &'t Tape<F>, params: &'p ParamStore<F>, mode: Mode, bn_eps: f32) -> Self {
        Self {
            tape,
            params,
            bound: params.bind(tape),
            mode,
            bn_eps: F::from_f64_lossy(bn_eps as f64),
            record: Cell::new(false),
            pending: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn bound(&self) -> &Bound<'t, F> {
        &self.bound
    }

    pub fn var(&self, id: ParamId) -> Var<'t, F> {
        self.bound.var(id)
    }

    /// Whether train-mode batch norm layers log their batch statistics.
    pub fn set_recording(&self, on: bool) {
        self.record.set(on);
    }

    pub fn take_stats(&self) -> Vec<PendingStats<F>> {
        std::mem::take(&mut self.pending.borrow_mut())
    }

    pub fn batch_norm(&self, x: &Var<'t, F>, bn: &BatchNormIds) -> Result<Var<'t, F>> {
        let (gamma, beta) = (self.var(bn.gamma), self.var(bn.beta));
        match self.mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm(&gamma, &beta, self.bn_eps)?;
                if self.record.get() {
                    self.pending.borrow_mut().push(PendingStats {
                        running_mean: bn.running_mean,
                        running_var: bn.running_var,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => Ok(x.batch_norm_eval(
                &gamma,
                &beta,
                self.params.get(bn.running_mean).data(),
                self.params.get(bn.running_var).data(),
                self.bn_eps,
            )?),
        }
    }
}

/// Folds logged batch statistics into the running buffers:
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn apply_stats<F: Float>(params: &mut ParamStore<F>, pending: &[PendingStats<F>], momentum: f32) {
    let m = F::from_f64_lossy(momentum as f64);
    let one_m = F::one() - m;
    for p in pending {
        for (r, b) in params.get_mut(p.running_mean).data_mut().iter_mut().zip(&p.stats.mean) {
            *r = m * *r + one_m * *b;
        }
        for (r, b) in params.get_mut(p.running_var).data_mut().iter_mut().zip(&p.stats.var) {
            *r = m * *r + one_m * *b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormIds {
    pub fn new<F: Float>(store: &mut ParamStore<F>, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{prefix}.running_var"), Tensor::ones(&[channels]), false),
        }
    }
}

/// 3x3 conv (no bias) -> batch norm -> ReLU -> 2x2 max pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bn: BatchNormIds,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvBlock {
    pub fn new<F: Float>(store: &mut ParamStore<F>, prefix: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (9 * c_in) as f64).sqrt();
        let weight = store.add(format!("{prefix}.conv.weight"), normal(&[3, 3, c_in, c_out], std, rng), true);
        let bn = BatchNormIds::new(store, &format!("{prefix}.bn"), c_out);
        Self { weight, bn, c_in, c_out }
    }

    /// Trainable scalars: conv weights plus batch-norm scale and shift.
    pub fn trainable_scalars(&self) -> usize {
        9 * self.c_in * self.c_out + 2 * self.c_out
    }

    pub fn forward<'t, F: Float>(&self, ctx: &Ctx<'t, '_, F>, x: &Var<'t, F>) -> Result<Var<'t, F>> {
        let y = x.conv2d(&ctx.var(self.weight))?;
        let y = ctx.batch_norm(&y, &self.bn)?;
        Ok(y.relu()?.max_pool2()?)
    }
}

pub(crate) fn normal<F: Float>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| F::from_f64_lossy(dist.sample(rng)))
}

pub(crate) fn uniform<F: Float>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<F> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| F::from_f64_lossy(dist.sample(rng)))
}
