//! Conv-4 embedding network split at the attention insertion point.

use rand::Rng;
use rap_autodiff::{Float, ParamStore, Var};

use crate::config::BackboneConfig;
use crate::error::{RapError, Result};
use crate::nn::{ConvBlock, Ctx};

/// Feature map `[batch, h, w, c]` at the insertion point.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap<'t, F: Float>(Var<'t, F>);

impl<'t, F: Float> FeatureMap<'t, F> {
    pub fn values(&self) -> Var<'t, F> {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
    blocks: Vec<ConvBlock>,
}

impl Backbone {
    pub fn new<F: Float>(cfg: &BackboneConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = 3;
        let blocks = (0..4)
            .map(|i| {
                let b = ConvBlock::new(store, &format!("backbone.block{}", i + 1), c_in, cfg.channels[i], rng);
                c_in = cfg.channels[i];
                b
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    /// Shape of the insertion feature map for a batch of `batch` images.
    pub fn insertion_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.cfg.insertion_side();
        [batch, s, s, self.cfg.insertion_channels()]
    }

    pub fn forward_to_insertion<'t, F: Float>(&self, ctx: &Ctx<'t, '_, F>, images: &Var<'t, F>) -> Result<FeatureMap<'t, F>> {
        let shape = images.shape();
        let hw = self.cfg.input_hw;
        if shape.len() != 4 || shape[1] != hw || shape[2] != hw || shape[3] != 3 {
            return Err(RapError::InvalidConfig(format!(
                "expected images [batch, {hw}, {hw}, 3], got {shape:?}"
            )));
        }
        let mut x = *images;
        for b in &self.blocks[..self.cfg.insertion_block] {
            x = b.forward(ctx, &x)?;
        }
        Ok(FeatureMap(x))
    }

    /// Accepts any map of the insertion shape (refined or not).
    pub fn wrap_map<'t, F: Float>(&self, map: Var<'t, F>) -> Result<FeatureMap<'t, F>> {
        let shape = map.shape();
        if shape.len() != 4 || shape[1..] != self.insertion_shape(shape[0])[1..] {
            return Err(RapError::InvalidConfig(format!(
                "feature map {shape:?} does not match insertion shape {:?}",
                &self.insertion_shape(0)[1..]
            )));
        }
        Ok(FeatureMap(map))
    }

    /// Remaining blocks and global average pooling: `[batch, embedding_dim]`.
    pub fn forward_from_insertion<'t, F: Float>(&self, ctx: &Ctx<'t, '_, F>, refined: &FeatureMap<'t, F>) -> Result<Var<'t, F>> {
        let mut x = self.wrap_map(refined.0)?.0;
        for b in &self.blocks[self.cfg.insertion_block..] {
            x = b.forward(ctx, &x)?;
        }
        Ok(x.global_avg_pool()?)
    }

    /// Unsplit forward pass of the plain network.
    pub fn forward<'t, F: Float>(&self, ctx: &Ctx<'t, '_, F>, images: &Var<'t, F>) -> Result<Var<'t, F>> {
        let m = self.forward_to_insertion(ctx, images)?;
        self.forward_from_insertion(ctx, &m)
    }
}
