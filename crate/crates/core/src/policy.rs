//! The attention agent: state -> Gaussian mean over spatial attention,
//! sampling, log-density and application to the feature map.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rap_autodiff::{gaussian_log_norm, Float, ParamId, ParamStore, Tensor, Var};

use crate::backbone::FeatureMap;
use crate::config::PolicyConfig;
use crate::error::{RapError, Result};
use crate::nn::{uniform, ConvBlock, Ctx};

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    cfg: PolicyConfig,
    convs: Vec<ConvBlock>,
    fc_weight: ParamId,
    fc_bias: ParamId,
    attention_dim: usize,
    embedding_dim: usize,
}

impl Policy {
    pub fn new<F: Float>(
        cfg: &PolicyConfig,
        embedding_dim: usize,
        attention_dim: usize,
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = 3;
        let convs = (0..3)
            .map(|i| {
                let b = ConvBlock::new(store, &format!("policy.conv{}", i + 1), c_in, cfg.conv_channels[i], rng);
                c_in = cfg.conv_channels[i];
                b
            })
            .collect();
        let fan_in = cfg.conv_channels[2] + embedding_dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let fc_weight = store.add("policy.fc.weight", uniform(&[fan_in, attention_dim], bound, rng), true);
        let fc_bias = store.add("policy.fc.bias", Tensor::zeros(&[attention_dim]), true);
        Ok(Self {
            cfg: cfg.clone(),
            convs,
            fc_weight,
            fc_bias,
            attention_dim,
            embedding_dim,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn attention_dim(&self) -> usize {
        self.attention_dim
    }

    pub fn fc_weight(&self) -> ParamId {
        self.fc_weight
    }

    pub fn fc_bias(&self) -> ParamId {
        self.fc_bias
    }

    /// Trainable scalars of the convolutional part.
    pub fn conv_scalars(&self) -> usize {
        self.convs.iter().map(ConvBlock::trainable_scalars).sum()
    }

    /// Image features `[batch, conv_channels[2]]`; computed once per sequence.
    pub fn image_features<'t, F: Float>(&self, ctx: &Ctx<'t, '_, F>, images: &Var<'t, F>) -> Result<Var<'t, F>> {
        let mut x = *images;
        for b in &self.convs {
            x = b.forward(ctx, &x)?;
        }
        Ok(x.global_avg_pool()?)
    }

    /// Mean of the attention distribution, strictly inside `(0, 1)`.
    pub fn mean<'t, F: Float>(&self, ctx: &Ctx<'t, '_, F>, features: &Var<'t, F>, embedding: &Var<'t, F>) -> Result<Var<'t, F>> {
        if embedding.shape().get(1) != Some(&self.embedding_dim) {
            return Err(RapError::InvalidConfig(format!(
                "policy expects embeddings of width {}, got {:?}",
                self.embedding_dim,
                embedding.shape()
            )));
        }
        let joint = features.concat_cols(embedding)?;
        Ok(joint.affine(&ctx.var(self.fc_weight), &ctx.var(self.fc_bias))?.sigmoid()?)
    }

    /// Turns a mean into an action on the tape.
    ///
    /// The clamped action keeps the pathwise dependence on the mean; the
    /// log-density is taken at the pre-clamp sample.
    pub fn act<'t, F: Float>(&self, mean: &Var<'t, F>, rule: ActionRule<'_, F>) -> Result<StepAction<'t, F>> {
        let sigma = F::from_f64_lossy(self.cfg.sigma as f64);
        let (sample, clamped) = match rule {
            ActionRule::Mean => ((*mean.value()).clone(), *mean),
            ActionRule::Noise(eps) => {
                let offset = eps.map(|e| e * sigma);
                let shifted = mean.shift(&offset)?;
                ((*shifted.value()).clone(), shifted.clamp(F::zero(), F::one())?)
            }
            ActionRule::Identity => {
                let ones = Tensor::ones(&mean.shape());
                (ones.clone(), mean.tape().constant(ones))
            }
        };
        let log_prob = mean.gaussian_log_prob(&sample, sigma)?;
        Ok(StepAction {
            mean: *mean,
            sample,
            clamped,
            log_prob,
        })
    }
}

/// How an action is formed from the policy mean.
#[derive(Debug, Clone, Copy)]
pub enum ActionRule<'a, F> {
    Mean,
    /// Standard-normal noise, scaled by sigma and added to the mean.
    Noise(&'a Tensor<F>),
    /// All-ones attention regardless of the mean.
    Identity,
}

/// One step's action as it lives on the tape.
#[derive(Debug, Clone)]
pub struct StepAction<'t, F: Float> {
    pub mean: Var<'t, F>,
    pub sample: Tensor<F>,
    pub clamped: Var<'t, F>,
    /// Per-image log-density `[batch]`.
    pub log_prob: Var<'t, F>,
}

/// Plain-value attention action for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionAction<F> {
    pub mean: Tensor<F>,
    pub sample: Tensor<F>,
    pub clamped: Tensor<F>,
    pub log_prob: Vec<F>,
}

impl<F: Float> AttentionAction<F> {
    /// `[batch, h, w, channels]` with every channel equal to the clamped
    /// action reshaped to `h x w`.
    pub fn broadcast(&self, side: usize, channels: usize) -> Result<Tensor<F>> {
        let batch = self.clamped.shape()[0];
        if self.clamped.shape() != [batch, side * side] {
            return Err(RapError::InvalidConfig(format!(
                "action {:?} does not fit a {side}x{side} map",
                self.clamped.shape()
            )));
        }
        let mut out = Vec::with_capacity(self.clamped.len() * channels);
        for &a in self.clamped.data() {
            out.extend(std::iter::repeat_n(a, channels));
        }
        Ok(Tensor::new(vec![batch, side, side, channels], out)?)
    }
}

/// Standard-normal tensor drawn in row-major order.
pub fn standard_normal<F: Float>(shape: &[usize], rng: &mut impl Rng) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
}

/// Samples an action around `mean` (`[batch, hw]`).
pub fn sample_action<F: Float>(
    mean: &Tensor<F>,
    sigma: F,
    deterministic: bool,
    rng: &mut impl Rng,
) -> Result<AttentionAction<F>> {
    if !(sigma > F::zero()) {
        return Err(RapError::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let sample = if deterministic {
        mean.clone()
    } else {
        let eps = standard_normal::<F>(mean.shape(), rng);
        let mut s = mean.clone();
        for (v, e) in s.data_mut().iter_mut().zip(eps.data()) {
            *v += sigma * *e;
        }
        s
    };
    let clamped = sample.map(|v| v.max(F::zero()).min(F::one()));
    let dim = mean.shape().last().copied().unwrap_or(0).max(1);
    let norm = gaussian_log_norm(sigma);
    let two_var = F::from_f64_lossy(2.0) * sigma * sigma;
    let log_prob = mean
        .data()
        .chunks_exact(dim)
        .zip(sample.data().chunks_exact(dim))
        .map(|(m, s)| m.iter().zip(s).map(|(m, s)| -(*s - *m) * (*s - *m) / two_var - norm).sum())
        .collect();
    Ok(AttentionAction {
        mean: mean.clone(),
        sample,
        clamped,
        log_prob,
    })
}

/// `m_t = a_t (broadcast over channels) * m`.
pub fn apply_attention<'t, F: Float>(clamped: &Var<'t, F>, map: &FeatureMap<'t, F>) -> Result<Var<'t, F>> {
    Ok(clamped.mul_channel_broadcast(&map.values())?)
}

/// Writes per-step attention as `side x side` text matrices, each block
/// headed by `step=<t>`.
pub fn write_attention_dump<F: Float>(out: &mut impl Write, steps: &[(usize, &[F])], side: usize) -> std::io::Result<()> {
    for (t, att) in steps {
        writeln!(out, "step={t}")?;
        for row in att.chunks_exact(side.max(1)) {
            let cells: Vec<String> = row.iter().map(|v| format!("{:.6}", v.as_f64())).collect();
            writeln!(out, "{}", cells.join(" "))?;
        }
    }
    Ok(())
}

/// Parses the format written by [`write_attention_dump`].
pub fn read_attention_dump(text: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut steps: Vec<(usize, Vec<f64>)> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if line.starts_with('#') || line.starts_with("image=") {
            continue;
        }
        if let Some(t) = line.strip_prefix("step=") {
            let t = t
                .parse()
                .map_err(|_| RapError::Dataset(format!("bad step header `{line}`")))?;
            steps.push((t, Vec::new()));
        } else if let Some((_, vals)) = steps.last_mut() {
            for v in line.split_whitespace() {
                vals.push(v.parse().map_err(|_| RapError::Dataset(format!("bad value `{v}`")))?);
            }
        } else {
            return Err(RapError::Dataset("attention values before a step header".into()));
        }
    }
    Ok(steps)
}
