//! Hierarchical shifted-window neck.
//!
//! Starting from C5, each of the three stages runs a stack of window
//! attention blocks (small windows, alternating plain/shifted), upsamples
//! 2x with [`UpMerging`] and fuses the same-resolution backbone feature with
//! [`SkipMerge`]. Channel ladder for backbone width `D`:
//!
//! ```text
//! 8D -> up -> 4D (+C4) -> 4D -> up -> 2D (+C3) -> 2D -> up -> D (+C2) -> D
//! ```

use crate::backbone::{PyramidFeatures, SwinBlock};
use crate::config::{BackboneConfig, NeckConfig};
use crate::error::{dim_err, Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{layout, Float, Graph, Init, ParamStore, Var};

/// Inverse of patch merging: a stride-2 sub-pixel shuffle `[H, W, 4c]` to
/// `[2H, 2W, c]`, layer norm, then a `c -> 2c` projection.
#[derive(Clone, Debug)]
pub struct UpMerging {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub in_dim: usize,
}

/// Sub-pixel rearrangement alone (no norm or projection).
pub fn pixel_shuffle<T: Float>(g: &Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x);
    match s[..] {
        [h, w, c4] if c4 % 4 == 0 => g.gather(x, layout::pixel_shuffle_2x(h, w, c4), &[2 * h, 2 * w, c4 / 4]),
        _ => Err(Error::Config(format!("up merging needs [H, W, 4c] input, got {s:?}"))),
    }
}

impl UpMerging {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, in_dim: usize) -> Result<Self> {
        if !in_dim.is_multiple_of(4) {
            return Err(Error::Config(format!("up merging input channels {in_dim} not divisible by 4")));
        }
        let c = in_dim / 4;
        Ok(UpMerging {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            expand: Linear::new(store, init, &format!("{name}.expand"), c, 2 * c, false)?,
            in_dim,
        })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let up = pixel_shuffle(g, x)?;
        let up = self.norm.forward(g, store, up)?;
        self.expand.forward(g, store, up)
    }
}

/// Channel concatenation of the upsampled and backbone features followed by
/// a `2K -> K` projection.
#[derive(Clone, Debug)]
pub struct SkipMerge {
    pub fuse: Linear,
    pub dim: usize,
}

impl SkipMerge {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        Ok(SkipMerge {
            fuse: Linear::new(store, init, &format!("{name}.fuse"), 2 * dim, dim, true)?,
            dim,
        })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, up: Var, skip: Var) -> Result<Var> {
        let (su, ss) = (g.shape(up), g.shape(skip));
        if su != ss || su.last() != Some(&self.dim) {
            return dim_err(format!("skip merge (dim {}) got {su:?} and {ss:?}", self.dim));
        }
        let cat = g.concat_last(up, skip)?;
        self.fuse.forward(g, store, cat)
    }
}

#[derive(Clone, Debug)]
pub struct NeckStage {
    pub blocks: Vec<SwinBlock>,
    pub up: UpMerging,
    pub skip: SkipMerge,
}

#[derive(Clone, Debug)]
pub struct Neck {
    pub stages: Vec<NeckStage>,
    pub out_dim: usize,
}

impl Neck {
    /// Stage `s` works at the width of backbone stage `3 - s` and reuses that
    /// stage's head count.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        cfg: &NeckConfig,
        backbone: &BackboneConfig,
    ) -> Result<Self> {
        let d = backbone.embed_dim;
        let mut stages = Vec::new();
        for s in 0..3 {
            let level = 3 - s;
            let dim = d << level;
            let heads = backbone.num_heads[level];
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                blocks.push(SwinBlock::new(
                    store,
                    init,
                    &format!("neck.stage{s}.blk{b}"),
                    dim,
                    heads,
                    cfg.window,
                    b % 2 == 1,
                    backbone.mlp_ratio,
                    cfg.use_rel_bias,
                )?);
            }
            let up = UpMerging::new(store, init, &format!("neck.stage{s}.up"), dim)?;
            let skip = SkipMerge::new(store, init, &format!("neck.stage{s}.skip"), dim / 2)?;
            stages.push(NeckStage { blocks, up, skip });
        }
        Ok(Neck { stages, out_dim: d })
    }

    /// Returns the fused stride-4 map `[H/4, W/4, D]`.
    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, feats: &PyramidFeatures) -> Result<Var> {
        let skips = [feats.c4, feats.c3, feats.c2];
        let mut x = feats.c5;
        for (stage, skip) in self.stages.iter().zip(skips) {
            for blk in &stage.blocks {
                x = blk.forward(g, store, x)?;
            }
            let up = stage.up.forward(g, store, x)?;
            x = stage.skip.forward(g, store, up, skip)?;
        }
        Ok(x)
    }
}
