//! Classification heads: prototypes for episodes, a linear head for plain
//! classification.

use rand::Rng;
use rap_autodiff::{Float, ParamId, ParamStore, Tensor, Var};

use crate::error::{RapError, Result};
use crate::nn::{uniform, Ctx};

#[derive(Debug, Clone)]
pub struct PrototypeSet<'t, F: Float> {
    /// `[way, embedding_dim]`.
    pub prototypes: Var<'t, F>,
    pub class_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EpisodePrediction<'t, F: Float> {
    /// Negative squared distances `[queries, way]`.
    pub logits: Var<'t, F>,
    pub predicted: Vec<usize>,
    pub loss: Var<'t, F>,
}

impl<F: Float> EpisodePrediction<'_, F> {
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        accuracy(&self.predicted, labels)
    }
}

/// Per-class means of the support embeddings. `labels` are episode-local
/// (`0..way`) and each must occur exactly `shot` times.
pub fn compute_prototypes<'t, F: Float>(
    support: &Var<'t, F>,
    labels: &[usize],
    way: usize,
    shot: usize,
) -> Result<PrototypeSet<'t, F>> {
    let rows = support.shape()[0];
    if rows != labels.len() || rows != way * shot {
        return Err(RapError::Episode(format!(
            "expected {way}x{shot} support embeddings, got {rows} with {} labels",
            labels.len()
        )));
    }
    let mut counts = vec![0usize; way];
    for &l in labels {
        if l >= way {
            return Err(RapError::Episode(format!("support label {l} outside 0..{way}")));
        }
        counts[l] += 1;
    }
    if let Some(n) = counts.iter().position(|&c| c != shot) {
        return Err(RapError::Episode(format!(
            "class {n} has {} support embeddings, expected {shot}",
            counts[n]
        )));
    }
    let inv = F::one() / F::from_usize(shot).unwrap();
    let mut avg = Tensor::zeros(&[way, rows]);
    for (i, &l) in labels.iter().enumerate() {
        avg.data_mut()[l * rows + i] = inv;
    }
    let prototypes = support.tape().constant(avg).matmul(support)?;
    Ok(PrototypeSet {
        prototypes,
        class_ids: (0..way).collect(),
    })
}

pub fn protonet_loss<'t, F: Float>(
    query: &Var<'t, F>,
    labels: &[usize],
    protos: &PrototypeSet<'t, F>,
) -> Result<EpisodePrediction<'t, F>> {
    let logits = query.sq_dist(&protos.prototypes)?.neg()?;
    let loss = logits.softmax_cross_entropy(labels)?;
    let predicted = argmax_rows(&logits.value());
    Ok(EpisodePrediction { logits, predicted, loss })
}

/// Affine map from embeddings to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

impl LinearHead {
    pub fn new<F: Float>(store: &mut ParamStore<F>, embedding_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (embedding_dim as f64).sqrt();
        Self {
            weight: store.add("head.weight", uniform(&[embedding_dim, classes], bound, rng), true),
            bias: store.add("head.bias", Tensor::zeros(&[classes]), true),
            classes,
        }
    }

    pub fn logits<'t, F: Float>(&self, ctx: &Ctx<'t, '_, F>, embeddings: &Var<'t, F>) -> Result<Var<'t, F>> {
        Ok(embeddings.affine(&ctx.var(self.weight), &ctx.var(self.bias))?)
    }
}

/// Softmax cross-entropy of `logits` against `labels`, plus accuracy.
pub fn linear_head_loss<'t, F: Float>(logits: &Var<'t, F>, labels: &[usize]) -> Result<(Var<'t, F>, f64)> {
    let loss = logits.softmax_cross_entropy(labels)?;
    Ok((loss, accuracy(&argmax_rows(&logits.value()), labels)))
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows<F: Float>(m: &Tensor<F>) -> Vec<usize> {
    let cols = m.shape().last().copied().unwrap_or(1).max(1);
    m.data()
        .chunks_exact(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, F::neg_infinity()),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}
