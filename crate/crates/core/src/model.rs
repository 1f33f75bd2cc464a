//! The full detector: backbone, shifted-window neck and center-point head
//! over one shared parameter store.

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::{dim_err, Error, Result};
use crate::head::{decode, Detection, Head, HeadOutput, STRIDE};
use crate::neck::Neck;
use crate::tensor::{cst, Checkpoint, Float, Graph, Init, ParamStore, Tensor, Var};

pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct Detector<T: Float> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
}

impl<T: Float> Detector<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.init_seed);
        let backbone = Backbone::new(&mut store, &mut init, &cfg.backbone)?;
        let neck = Neck::new(&mut store, &mut init, &cfg.neck, &cfg.backbone)?;
        let head = Head::new(&mut store, &mut init, cfg.backbone.embed_dim)?;
        Ok(Detector {
            cfg: cfg.clone(),
            store,
            backbone,
            neck,
            head,
        })
    }

    /// Maps `[0, 1]` pixels to roughly zero mean, unit scale.
    pub fn normalize(img: &Tensor<T>) -> Tensor<T> {
        let (m, s) = (cst::<T>(PIXEL_MEAN), cst::<T>(1.0 / PIXEL_STD));
        img.map(|v| (v - m) * s)
    }

    /// `img: [3, H, W]` already normalised.
    pub fn forward_var(&self, g: &Graph<T>, store: &ParamStore<T>, img: Var) -> Result<HeadOutput> {
        let feats = self.backbone.forward(g, store, img)?;
        let fused = self.neck.forward(g, store, &feats)?;
        self.head.forward(g, store, fused)
    }

    /// `img: [3, H, W]` with values in `[0, 1]`.
    pub fn forward(&self, g: &Graph<T>, img: &Tensor<T>) -> Result<HeadOutput> {
        let s = img.shape();
        if s.len() != 3 || s[0] != 3 {
            return dim_err(format!("detector expects a [3, H, W] image, got {s:?}"));
        }
        let x = g.constant(Self::normalize(img));
        self.forward_var(g, &self.store, x)
    }

    pub fn predict(&self, img: &Tensor<T>, k: usize, score_thresh: f64) -> Result<Vec<Detection>> {
        let g = Graph::new();
        let out = self.forward(&g, img)?;
        decode(&g.value(out.hm), &g.value(out.wh), &g.value(out.off), k, score_thresh, STRIDE)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    /// Every parameter under its name plus the model config in the metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (_, p) in self.store.iter() {
            ck.insert(p.name.clone(), p.value());
        }
        ck.metadata = serde_json::json!({ "model": self.cfg });
        ck
    }

    /// Rebuilds the model from the config stored in the checkpoint and loads
    /// every parameter. Missing or misshapen tensors are errors.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(ck.metadata.get("model").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("checkpoint has no usable model config: {e}")))?;
        let mut model = Self::new(&cfg)?;
        model.load_params(ck)?;
        Ok(model)
    }

    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            if !ck.contains(&name) {
                return Err(Error::Checkpoint(format!("missing tensor {name}")));
            }
            let t = ck.get::<T>(&name)?;
            self.store
                .set_value(id, t)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        }
        Ok(())
    }
}
