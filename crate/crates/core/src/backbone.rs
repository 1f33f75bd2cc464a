//! Hierarchical shifted-window backbone producing C2..C5 at strides 4..32.

use crate::config::BackboneConfig;
use crate::error::{dim_err, Result};
use crate::nn::{Conv2d, LayerNorm, Linear, INIT_STD};
use crate::tensor::{layout, Float, Graph, Init, ParamStore, Tensor, Var};
use crate::window::{attention_mask, WindowAttention, WindowGrid};

pub const PATCH: usize = 4;

/// One transformer block: windowed attention and an MLP, each pre-normed
/// with a residual connection. Shifted blocks roll the map by `-M/2` before
/// partitioning and roll it back afterwards.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
    pub window: usize,
    pub shifted: bool,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shifted: bool,
        mlp_ratio: usize,
        use_rel_bias: bool,
    ) -> Result<Self> {
        Ok(SwinBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: WindowAttention::new(store, init, &format!("{name}.attn"), dim, heads, window, use_rel_bias)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(store, init, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim, true)?,
            fc2: Linear::new(store, init, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim, true)?,
            dim,
            window,
            shifted,
        })
    }

    /// Zeroes both residual output projections, turning the block into the identity.
    pub fn zero_residual<T: Float>(&self, store: &mut ParamStore<T>) {
        self.attn.proj.zero_weight(store);
        self.fc2.zero_weight(store);
    }

    /// `x: [H, W, C]` to `[H, W, C]`.
    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        let (h, w, c) = match s[..] {
            [h, w, c] if c == self.dim => (h, w, c),
            _ => return dim_err(format!("swin block (dim {}) got input {s:?}", self.dim)),
        };
        let grid = WindowGrid::new(h, w, self.window, self.shifted)?;
        let mask = attention_mask(&grid)?;
        let xn = self.norm1.forward(g, store, x)?;
        let windows = g.gather(
            xn,
            grid.forward_map(c),
            &[grid.num_windows(), grid.tokens_per_window(), c],
        )?;
        let attended = self.attn.forward(g, store, windows, mask.as_ref())?;
        let back = g.gather(attended, grid.reverse_map(c), &[h, w, c])?;
        let x = g.add(x, back)?;
        let y = self.norm2.forward(g, store, x)?;
        let y = self.fc1.forward(g, store, y)?;
        let y = g.gelu(y);
        let y = self.fc2.forward(g, store, y)?;
        g.add(x, y)
    }
}

/// 2x2 neighbourhood concatenation, layer norm, then a `4C -> 2C` projection.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub dim: usize,
}

impl PatchMerging {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        Ok(PatchMerging {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim)?,
            reduction: Linear::new(store, init, &format!("{name}.reduction"), 4 * dim, 2 * dim, false)?,
            dim,
        })
    }

    /// `[H, W, C]` to `[ceil(H/2), ceil(W/2), 2C]`; odd extents are zero-padded.
    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        let (h, w, c) = match s[..] {
            [h, w, c] if c == self.dim => (h, w, c),
            _ => return dim_err(format!("patch merging (dim {}) got {s:?}", self.dim)),
        };
        let (hp, wp) = (h.div_ceil(2) * 2, w.div_ceil(2) * 2);
        let mut map = layout::merge_2x2(hp, wp, c);
        if (hp, wp) != (h, w) {
            map = layout::compose(&map, &layout::pad_hw(h, w, c, hp, wp));
        }
        let merged = g.gather(x, map, &[hp / 2, wp / 2, 4 * c])?;
        let merged = self.norm.forward(g, store, merged)?;
        self.reduction.forward(g, store, merged)
    }
}

/// Multi-scale backbone outputs, all `[H, W, C]` nodes on one graph.
#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    pub c2: Var,
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<SwinBlock>,
    pub merge: Option<PatchMerging>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch_embed: Conv2d,
    pub patch_norm: LayerNorm,
    pub stages: Vec<Stage>,
    pub embed_dim: usize,
}

impl Backbone {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, cfg: &BackboneConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        // patch embedding: 4x4 stride-4 projection, truncated-normal like the linears
        let patch_embed = Conv2d {
            weight: store.add("backbone.patch_embed.proj.weight", init.trunc_normal(&[d, 3, PATCH, PATCH], INIT_STD))?,
            bias: store.add("backbone.patch_embed.proj.bias", Tensor::zeros(&[d]))?,
            stride: PATCH,
            pad: 0,
        };
        let patch_norm = LayerNorm::new(store, "backbone.patch_embed.norm", d)?;
        let mut stages = Vec::new();
        for (i, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.num_heads).enumerate() {
            let dim = d << i;
            let mut blocks = Vec::new();
            for b in 0..depth {
                let blk = SwinBlock::new(
                    store,
                    init,
                    &format!("backbone.stage{i}.blk{b}"),
                    dim,
                    heads,
                    cfg.window,
                    b % 2 == 1,
                    cfg.mlp_ratio,
                    cfg.use_rel_bias,
                )?;
                if cfg.zero_init_residual {
                    blk.zero_residual(store);
                }
                blocks.push(blk);
            }
            let merge = if i + 1 < cfg.depths.len() {
                Some(PatchMerging::new(store, init, &format!("backbone.stage{i}.merge"), dim)?)
            } else {
                None
            };
            stages.push(Stage { blocks, merge });
        }
        Ok(Backbone {
            patch_embed,
            patch_norm,
            stages,
            embed_dim: d,
        })
    }

    /// `img: [3, H, W]` to `[H/4, W/4, D]`.
    pub fn patch_embed<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, img: Var) -> Result<Var> {
        let s = g.shape(img);
        let (h, w) = match s[..] {
            [3, h, w] if h % PATCH == 0 && w % PATCH == 0 => (h, w),
            _ => return dim_err(format!("patch embedding needs [3, H, W] with H, W divisible by {PATCH}, got {s:?}")),
        };
        let x = g.reshape(img, &[1, 3, h, w])?;
        let x = self.patch_embed.forward(g, store, x)?;
        let x = g.reshape(x, &[self.embed_dim, h / PATCH, w / PATCH])?;
        let x = g.permute(x, &[1, 2, 0])?;
        self.patch_norm.forward(g, store, x)
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, img: Var) -> Result<PyramidFeatures> {
        let s = g.shape(img);
        if s.len() != 3 || !s[1].is_multiple_of(32) || !s[2].is_multiple_of(32) {
            return dim_err(format!("backbone input must be [3, H, W] with H, W divisible by 32, got {s:?}"));
        }
        let mut x = self.patch_embed(g, store, img)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for blk in &stage.blocks {
                x = blk.forward(g, store, x)?;
            }
            outs.push(x);
            if let Some(m) = &stage.merge {
                x = m.forward(g, store, x)?;
            }
        }
        Ok(PyramidFeatures {
            c2: outs[0],
            c3: outs[1],
            c4: outs[2],
            c5: outs[3],
        })
    }
}
