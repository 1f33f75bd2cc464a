//! Run configuration: model, loss, data, training, evaluation and
//! hard-negative settings, with named presets.
//!
//! Config files are JSON. A top-level `"preset"` key names a base preset;
//! the file's own keys are deep-merged over it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
    pub use_rel_bias: bool,
    /// Zero-initialise the output projections of every residual branch.
    pub zero_init_residual: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            embed_dim: 32,
            depths: vec![2, 2, 2, 2],
            num_heads: vec![2, 4, 8, 16],
            window: 4,
            mlp_ratio: 4,
            use_rel_bias: true,
            zero_init_residual: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeckConfig {
    pub window: usize,
    pub blocks_per_stage: usize,
    pub use_rel_bias: bool,
}

impl Default for NeckConfig {
    fn default() -> Self {
        NeckConfig {
            window: 2,
            blocks_per_stage: 2,
            use_rel_bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub init_seed: u64,
}


impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        let bad = |m: String| Err(Error::Config(m));
        if b.depths.len() != 4 || b.num_heads.len() != 4 {
            return bad("backbone needs exactly 4 stages (depths and num_heads)".into());
        }
        if b.depths.iter().any(|d| d % 2 != 0 || *d == 0) {
            return bad(format!("stage depths must be even and positive, got {:?}", b.depths));
        }
        if b.embed_dim < 2 || !b.embed_dim.is_multiple_of(2) {
            return bad(format!("embed_dim must be even, got {}", b.embed_dim));
        }
        for (i, &h) in b.num_heads.iter().enumerate() {
            let dim = b.embed_dim << i;
            if h == 0 || !dim.is_multiple_of(h) {
                return bad(format!("stage {i}: dim {dim} not divisible by {h} heads"));
            }
        }
        if b.window < 2 {
            return bad(format!("backbone window must be >= 2, got {}", b.window));
        }
        if self.neck.window < 2 {
            return bad(format!("neck window must be >= 2, got {}", self.neck.window));
        }
        if !self.neck.blocks_per_stage.is_multiple_of(2) {
            return bad(format!(
                "neck blocks_per_stage must be even, got {}",
                self.neck.blocks_per_stage
            ));
        }
        Ok(())
    }

    /// Small model used by the end-to-end gradient check.
    pub fn micro() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                embed_dim: 4,
                depths: vec![2, 2, 2, 2],
                num_heads: vec![1, 1, 2, 2],
                window: 2,
                mlp_ratio: 4,
                use_rel_bias: true,
                zero_init_residual: false,
            },
            neck: NeckConfig::default(),
            init_seed: 1,
        }
    }
}

/// Loss weights for the center-point head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub hm_alpha: f64,
    pub hm_gamma: f64,
    pub wh_weight: f64,
    pub off_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            hm_alpha: 2.0,
            hm_gamma: 6.0,
            wh_weight: 0.2,
            off_weight: 1.0,
        }
    }
}

/// Synthetic scene generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub birds_per_image: (usize, usize),
    pub bird_size_px: (usize, usize),
    pub clutter_density: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 128,
            birds_per_image: (1, 6),
            bird_size_px: (4, 24),
            clutter_density: 0.3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (bmin, bmax) = self.bird_size_px;
        if bmin < 2 || bmin > bmax {
            return Err(Error::Config(format!("bad bird size range {bmin}..{bmax}")));
        }
        if bmax >= 32 {
            return Err(Error::Config(format!(
                "bird size must stay below 32 px, got max {bmax}"
            )));
        }
        if self.birds_per_image.0 > self.birds_per_image.1 {
            return Err(Error::Config("birds_per_image range is inverted".into()));
        }
        if self.image_size < 2 * bmax + 4 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image_size {} must be a multiple of 32 and leave room for {bmax}px birds",
                self.image_size
            )));
        }
        if !(0.0..=10.0).contains(&self.clutter_density) {
            return Err(Error::Config("clutter_density out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub root: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneConfig::default(),
            root: PathBuf::from("data"),
            n_train: 600,
            n_val: 100,
        }
    }
}

impl DataConfig {
    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn val_dir(&self) -> PathBuf {
        self.root.join("val")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Evaluate on the validation split after each epoch.
    pub val_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 8,
            lr: 3e-4,
            weight_decay: 0.05,
            grad_clip: 5.0,
            warmup_steps: 50,
            seed: 0,
            precision: Precision::F32,
            val_every_epoch: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_thresh: 0.05,
            top_k: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardNegativeConfig {
    pub enabled: bool,
    /// Fraction of every batch drawn from images carrying mined negatives.
    pub rate: f64,
    /// Minimum detection score for a mined negative.
    pub mine_score_thresh: f64,
    /// Detections overlapping every ground-truth box below this IoU are negatives.
    pub mine_iou_thresh: f64,
    pub epochs: usize,
}

impl Default for HardNegativeConfig {
    fn default() -> Self {
        HardNegativeConfig {
            enabled: false,
            rate: 0.3,
            mine_score_thresh: 0.3,
            mine_iou_thresh: 0.3,
            epochs: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub hard_negative: HardNegativeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// CPU-sized default: 128 px scenes, tiny model, 15 epochs.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            hard_negative: HardNegativeConfig::default(),
        }
    }

    /// Swin-S sized reference settings (window 7, D = 96, depths 2/2/18/2,
    /// 150 epochs at 5e-6 then hard-negative training).
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.model.backbone = BackboneConfig {
            embed_dim: 96,
            depths: vec![2, 2, 18, 2],
            num_heads: vec![3, 6, 12, 24],
            window: 7,
            ..BackboneConfig::default()
        };
        c.train.epochs = 150;
        c.train.lr = 5e-6;
        c.data.scene.image_size = 224;
        c.hard_negative = HardNegativeConfig {
            enabled: true,
            epochs: 100,
            ..HardNegativeConfig::default()
        };
        c
    }

    /// Seconds-scale preset for tests and smoke runs.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.data.scene.image_size = 64;
        c.data.scene.bird_size_px = (6, 14);
        c.data.n_train = 16;
        c.data.n_val = 8;
        c.model.backbone.embed_dim = 8;
        c.model.backbone.num_heads = vec![1, 1, 2, 2];
        c.model.backbone.window = 2;
        c.train.epochs = 2;
        c.train.batch_size = 4;
        c.train.warmup_steps = 0;
        c.hard_negative.epochs = 1;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::Config(format!("unknown preset {other}"))),
        }
    }

    /// Parses a JSON config, resolving the optional `"preset"` base.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut user: Value = serde_json::from_str(text)?;
        let base_name = match user.as_object_mut().and_then(|o| o.remove("preset")) {
            Some(Value::String(s)) => s,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => "desk".to_string(),
        };
        let mut base = serde_json::to_value(Self::preset(&base_name)?)?;
        merge(&mut base, user);
        let cfg: RunConfig = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.scene.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_negative.rate) {
            return Err(Error::Config("hard-negative rate must lie in [0, 1]".into()));
        }
        let w = &self.loss;
        if [w.hm_alpha, w.hm_gamma, w.wh_weight, w.off_weight].iter().any(|v| *v < 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Stable hash of everything except the neck window, used to show that
    /// ablation rows differ only in that knob.
    pub fn hash_without_window(&self) -> String {
        let mut c = self.clone();
        c.model.neck.window = 0;
        let bytes = serde_json::to_vec(&c).expect("serialisable");
        // FNV-1a, 64 bit
        let mut h: u64 = 0xcbf29ce484222325;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_desk_preset() {
        let c = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(c, RunConfig::desk());
        assert_eq!(c.loss.hm_gamma, 6.0);
        assert_eq!(c.loss.wh_weight, 0.2);
        assert_eq!(c.model.neck.window, 2);
        assert_eq!(c.hard_negative.rate, 0.3);
    }

    #[test]
    fn preset_inheritance_merges_nested_keys() {
        let c = RunConfig::from_json_str(r#"{"preset": "smoke", "model": {"neck": {"window": 3}}}"#).unwrap();
        assert_eq!(c.model.neck.window, 3);
        assert_eq!(c.model.backbone.embed_dim, 8);
        assert_eq!(c.data.n_train, 16);
    }

    #[test]
    fn unknown_keys_and_presets_are_rejected() {
        assert!(RunConfig::from_json_str(r#"{"train": {"epochz": 3}}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"preset": "huge"}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"data": {"scene": {"bird_size_px": [4, 40]}}}"#).is_err());
    }

    #[test]
    fn reference_preset_is_valid() {
        RunConfig::full().model.validate().unwrap();
        ModelConfig::micro().validate().unwrap();
    }

    #[test]
    fn window_hash_ignores_only_the_window() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.model.neck.window = 5;
        assert_eq!(a.hash_without_window(), b.hash_without_window());
        b.train.lr = 1e-3;
        assert_ne!(a.hash_without_window(), b.hash_without_window());
    }
}
