//! Training loop, evaluation, hard-negative phase and the neck-window
//! ablation.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{EvalConfig, Precision, RunConfig};
use crate::data::{mine_hard_negatives, Dataset, HardNegative, HardNegativeSampler};
use crate::error::{Error, Result};
use crate::head::{encode_targets, total_loss, Detection, STRIDE};
use crate::metrics::{coco_suite, APReport};
use crate::model::Detector;
use crate::optim::{adam_step, clip_grad_norm, lr_at, AdamConfig, AdamState};
use crate::tensor::{load_checkpoint, save_checkpoint, Float, Graph};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
const MA_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValSummary {
    pub ap50: f64,
    pub ap75: f64,
    pub ap: f64,
    pub ap_s: f64,
}

impl From<&APReport> for ValSummary {
    fn from(r: &APReport) -> Self {
        ValSummary {
            ap50: r.ap50,
            ap75: r.ap75,
            ap: r.ap,
            ap_s: r.ap_s,
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: String,
    pub steps: u64,
    pub loss: f64,
    pub focal: f64,
    pub wh: f64,
    pub off: f64,
    /// Mean of the last 50 step losses at the end of the epoch.
    pub loss_ma50: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub hard_negative_fraction: f64,
    pub val: Option<ValSummary>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub focal: f64,
    pub wh: f64,
    pub off: f64,
    pub grad_norm: f64,
}

fn mix_seed(seed: u64, epoch: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 33)).wrapping_mul(0xff51afd7ed558ccd);
    z ^ (z >> 33)
}

/// Model, optimiser state and step counters for one run.
pub struct Trainer<T: Float> {
    pub cfg: RunConfig,
    pub model: Detector<T>,
    pub adam: AdamState<T>,
    /// Epochs completed so far.
    pub epoch: usize,
    pub step: u64,
    pub recent: VecDeque<f64>,
    /// Use mined negatives from the dataset when sampling and encoding.
    pub hard_negatives: bool,
}

impl<T: Float> Trainer<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Detector::new(&cfg.model)?;
        let adam = AdamState::new(&model.store);
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            adam,
            epoch: 0,
            step: 0,
            recent: VecDeque::new(),
            hard_negatives: cfg.hard_negative.enabled,
        })
    }

    /// Starts a new run from the weights of an existing checkpoint (fresh
    /// optimiser state and counters).
    pub fn fine_tune(cfg: &RunConfig, init: &Path) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        let ck = load_checkpoint(init)?;
        t.model.load_params(&ck)?;
        Ok(t)
    }

    /// Restores everything written by [`Trainer::save`].
    pub fn resume(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let meta = &ck.metadata;
        let cfg: RunConfig = serde_json::from_value(meta.get("run").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("no run config in {}: {e}", path.display())))?;
        let mut t = Self::new(&cfg)?;
        t.model.load_params(&ck)?;
        let num = |k: &str| {
            meta.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {k}")))
        };
        t.epoch = num("epoch")? as usize;
        t.step = num("step")?;
        t.adam = AdamState::read_from(&t.model.store, &ck, t.step)?;
        t.recent = serde_json::from_value(meta.get("recent_losses").cloned().unwrap_or_default())?;
        t.hard_negatives = meta.get("hard_negatives").and_then(|v| v.as_bool()).unwrap_or(false);
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = self.model.to_checkpoint();
        self.adam.write_into(&self.model.store, &mut ck);
        ck.metadata = json!({
            "model": self.cfg.model,
            "run": self.cfg,
            "epoch": self.epoch,
            "step": self.step,
            "recent_losses": self.recent,
            "hard_negatives": self.hard_negatives,
        });
        save_checkpoint(path, &ck)
    }

    pub fn save_model(&self, path: &Path) -> Result<()> {
        let mut ck = self.model.to_checkpoint();
        ck.metadata["epoch"] = json!(self.epoch);
        save_checkpoint(path, &ck)
    }

    pub fn loss_ma(&self) -> f64 {
        if self.recent.is_empty() {
            return f64::NAN;
        }
        self.recent.iter().sum::<f64>() / self.recent.len() as f64
    }

    /// Forward/backward over `batch` (indices into `data`), clip, update.
    pub fn train_step(&mut self, data: &Dataset, batch: &[usize], batch_no: usize) -> Result<StepLoss> {
        self.model.store.zero_grad();
        let inv_b = 1.0 / batch.len() as f64;
        let mut acc = StepLoss::default();
        for &i in batch {
            let s = &data.samples[i];
            let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
            let mut targets = encode_targets::<T>(&s.boxes, h / STRIDE, w / STRIDE, STRIDE);
            if self.hard_negatives {
                targets.suppress(&s.hard_negatives, STRIDE);
            }
            let g = Graph::new();
            let out = self.model.forward(&g, &s.image.cast())?;
            let parts = total_loss(&g, &out, &targets, &self.cfg.loss)?;
            let f = |v| g.scalar(v).to_f64().unwrap_or(f64::NAN);
            let total = f(parts.total);
            if !total.is_finite() {
                return Err(Error::NanLoss {
                    epoch: self.epoch,
                    batch: batch_no,
                    detail: format!("image {} (sample index {i}) gave loss {total}", s.id),
                });
            }
            acc.total += total * inv_b;
            acc.focal += f(parts.focal) * inv_b;
            acc.wh += f(parts.wh) * inv_b;
            acc.off += f(parts.off) * inv_b;
            let scaled = g.scale(parts.total, inv_b);
            let grads = g.backward(scaled)?;
            self.model.store.accumulate(&g, &grads);
        }
        acc.grad_norm = clip_grad_norm(&mut self.model.store, self.cfg.train.grad_clip);
        if !acc.grad_norm.is_finite() {
            return Err(Error::NanLoss {
                epoch: self.epoch,
                batch: batch_no,
                detail: format!("gradient norm {} for samples {batch:?}", acc.grad_norm),
            });
        }
        let adam_cfg = AdamConfig {
            lr: lr_at(self.cfg.train.lr, self.cfg.train.warmup_steps, self.step),
            weight_decay: self.cfg.train.weight_decay,
            ..AdamConfig::default()
        };
        adam_step(&mut self.model.store, &mut self.adam, &adam_cfg);
        self.step += 1;
        self.recent.push_back(acc.total);
        if self.recent.len() > MA_WINDOW {
            self.recent.pop_front();
        }
        Ok(acc)
    }

    /// One pass of `ceil(n / batch)` steps. Batch composition depends only
    /// on the seed and the epoch number.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let b = self.cfg.train.batch_size;
        let flags: Vec<bool> = data.samples.iter().map(|s| !s.hard_negatives.is_empty()).collect();
        let rate = if self.hard_negatives { self.cfg.hard_negative.rate } else { 0.0 };
        let mut sampler = HardNegativeSampler::new(&flags, rate, mix_seed(self.cfg.train.seed, self.epoch));
        let n_batches = data.len().div_ceil(b);
        let mut sum = StepLoss::default();
        let mut hn_drawn = 0usize;
        for k in 0..n_batches {
            let batch = sampler.next_batch(b.min(data.len()));
            hn_drawn += batch.iter().filter(|&&i| flags[i]).count();
            let s = self.train_step(data, &batch, k)?;
            sum.total += s.total;
            sum.focal += s.focal;
            sum.wh += s.wh;
            sum.off += s.off;
            sum.grad_norm += s.grad_norm;
        }
        let nb = n_batches as f64;
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            phase: if self.hard_negatives { "hard-negative" } else { "base" }.into(),
            steps: self.step,
            loss: sum.total / nb,
            focal: sum.focal / nb,
            wh: sum.wh / nb,
            off: sum.off / nb,
            loss_ma50: self.loss_ma(),
            lr: lr_at(self.cfg.train.lr, self.cfg.train.warmup_steps, self.step),
            grad_norm: sum.grad_norm / nb,
            hard_negative_fraction: hn_drawn as f64 / (nb * b.min(data.len()) as f64),
            val: None,
        })
    }
}

/// Decoded detections for every sample, in dataset order.
pub fn predict_all<T: Float>(model: &Detector<T>, data: &Dataset, eval: &EvalConfig) -> Result<Vec<Vec<Detection>>> {
    data.samples
        .iter()
        .map(|s| model.predict(&s.image.cast(), eval.top_k, eval.score_thresh))
        .collect()
}

pub fn evaluate<T: Float>(model: &Detector<T>, data: &Dataset, eval: &EvalConfig) -> Result<(APReport, Vec<Vec<Detection>>)> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let dets = predict_all(model, data, eval)?;
    let gts: Vec<_> = data.samples.iter().map(|s| s.boxes.clone()).collect();
    Ok((coco_suite(&dets, &gts), dets))
}

/// Loads a checkpoint (either a model or a full training state) for
/// inference.
pub fn load_model(path: &Path) -> Result<Detector<f32>> {
    let ck = load_checkpoint(path)?;
    Detector::from_checkpoint(&ck)
}

/// `{image_id, x1, y1, x2, y2, score}` per line.
pub fn detections_jsonl(ids: &[usize], dets: &[Vec<Detection>]) -> String {
    let mut s = String::new();
    for (id, ds) in ids.iter().zip(dets) {
        for d in ds {
            let line = json!({
                "image_id": id,
                "x1": d.bbox.x1,
                "y1": d.bbox.y1,
                "x2": d.bbox.x2,
                "y2": d.bbox.y2,
                "score": d.score,
            });
            let _ = writeln!(s, "{line}");
        }
    }
    s
}

/// Confident detections that miss every ground truth.
pub fn mine_with_model<T: Float>(model: &Detector<T>, data: &Dataset, cfg: &RunConfig) -> Result<Vec<HardNegative>> {
    let hn = &cfg.hard_negative;
    let eval = EvalConfig {
        score_thresh: hn.mine_score_thresh,
        top_k: cfg.eval.top_k,
    };
    let dets = predict_all(model, data, &eval)?;
    let per_image: Vec<_> = data
        .samples
        .iter()
        .zip(dets)
        .map(|(s, d)| (s.id, s.boxes.clone(), d))
        .collect();
    Ok(mine_hard_negatives(&per_image, hn.mine_score_thresh, hn.mine_iou_thresh))
}

/// Count of detections at or above `score` on images without any birds.
pub fn count_false_positives<T: Float>(model: &Detector<T>, data: &Dataset, score: f64, top_k: usize) -> Result<usize> {
    let eval = EvalConfig { score_thresh: score, top_k };
    let dets = predict_all(model, data, &eval)?;
    Ok(dets.iter().map(|d| d.len()).sum())
}

/// Options for [`train`].
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Full-state checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Weights to start from with a fresh optimiser.
    pub init: Option<PathBuf>,
    /// Stop after this many epochs in total (defaults to the configured count).
    pub stop_after: Option<usize>,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
    pub model_checkpoint: PathBuf,
}

/// Runs the configured number of epochs, writing `metrics.jsonl`, the
/// full-state `last.ckpt` after every epoch and `model.ckpt` at the end.
pub fn train(cfg: &RunConfig, data: &Dataset, val: Option<&Dataset>, opts: &TrainOptions) -> Result<TrainReport> {
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(cfg, data, val, opts),
        Precision::F64 => train_typed::<f64>(cfg, data, val, opts),
    }
}

fn train_typed<T: Float>(cfg: &RunConfig, data: &Dataset, val: Option<&Dataset>, opts: &TrainOptions) -> Result<TrainReport> {
    std::fs::create_dir_all(&opts.out_dir)?;
    let mut trainer: Trainer<T> = match (&opts.resume, &opts.init) {
        (Some(r), _) => Trainer::resume(r)?,
        (None, Some(i)) => Trainer::fine_tune(cfg, i)?,
        (None, None) => Trainer::new(cfg)?,
    };
    if opts.resume.is_some() && trainer.cfg.hash_without_window() != cfg.hash_without_window()
        && opts.verbose {
            eprintln!("note: resuming with the checkpoint's stored config");
        }
    let metrics_path = opts.out_dir.join(METRICS_FILE);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(opts.resume.is_some())
        .write(true)
        .truncate(opts.resume.is_none())
        .open(&metrics_path)?;
    let total = opts.stop_after.unwrap_or(trainer.cfg.train.epochs);
    let ckpt = opts.out_dir.join(LAST_CHECKPOINT);
    let mut metrics = Vec::new();
    while trainer.epoch < total {
        let t0 = Instant::now();
        let mut m = trainer.train_epoch(data)?;
        if let (Some(v), true) = (val, trainer.cfg.train.val_every_epoch) {
            let (r, _) = evaluate(&trainer.model, v, &trainer.cfg.eval)?;
            m.val = Some(ValSummary::from(&r));
        }
        writeln!(log, "{}", serde_json::to_string(&m)?)?;
        trainer.save(&ckpt)?;
        if opts.verbose {
            let v = m.val.as_ref().map(|v| format!(" val AP50 {:.3} AP_S {:.3}", v.ap50, v.ap_s)).unwrap_or_default();
            eprintln!(
                "epoch {:>3} loss {:.4} (focal {:.4} wh {:.3} off {:.3}) ma50 {:.4}{v} [{:.1}s]",
                m.epoch,
                m.loss,
                m.focal,
                m.wh,
                m.off,
                m.loss_ma50,
                t0.elapsed().as_secs_f64()
            );
        }
        metrics.push(m);
    }
    let model_checkpoint = opts.out_dir.join(MODEL_CHECKPOINT);
    trainer.save_model(&model_checkpoint)?;
    Ok(TrainReport {
        metrics,
        checkpoint: ckpt,
        model_checkpoint,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Usage(format!("cannot read metrics {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub window: usize,
    pub ap50: f64,
    pub ap75: f64,
    pub ap: f64,
    pub ap_s: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

const ABLATION_HEADER: &str = "window,ap50,ap75,ap,ap_s,config_hash";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.window, r.ap50, r.ap75, r.ap, r.ap_s, r.config_hash);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(ABLATION_HEADER) {
            return Err(Error::Usage(format!("ablation CSV must start with `{ABLATION_HEADER}`")));
        }
        let bad = |l: &str| Error::Usage(format!("malformed ablation row `{l}`"));
        let mut rows = Vec::new();
        for l in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            rows.push(AblationRow {
                window: f[0].parse().map_err(|_| bad(l))?,
                ap50: num(f[1])?,
                ap75: num(f[2])?,
                ap: num(f[3])?,
                ap_s: num(f[4])?,
                config_hash: f[5].to_string(),
            });
        }
        Ok(AblationTable { rows })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| neck window | AP50 | AP75 | AP | AP_S |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {:.3} | {:.3} | {:.3} | {:.3} |", r.window, r.ap50, r.ap75, r.ap, r.ap_s);
        }
        s
    }

    /// All rows were trained under the same non-window configuration.
    pub fn single_config(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].config_hash == w[1].config_hash)
    }
}

/// Trains one model per neck window with everything else fixed and
/// evaluates each on `val`. Writes `ablation.csv`, `ablation.md` and one
/// run directory per window under `out_dir`.
pub fn ablate_window(
    cfg: &RunConfig,
    sizes: &[usize],
    data: &Dataset,
    val: &Dataset,
    out_dir: &Path,
    verbose: bool,
) -> Result<AblationTable> {
    if sizes.is_empty() {
        return Err(Error::Usage("no window sizes given".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut table = AblationTable::default();
    for &m in sizes {
        let mut c = cfg.clone();
        c.model.neck.window = m;
        c.train.val_every_epoch = false;
        c.validate()?;
        let run_dir = out_dir.join(format!("window_{m}"));
        if verbose {
            eprintln!("ablation: neck window {m}");
        }
        let report = train(
            &c,
            data,
            None,
            &TrainOptions {
                out_dir: run_dir,
                verbose,
                ..Default::default()
            },
        )?;
        let model = load_model(&report.model_checkpoint)?;
        let (r, _) = evaluate(&model, val, &c.eval)?;
        table.rows.push(AblationRow {
            window: m,
            ap50: r.ap50,
            ap75: r.ap75,
            ap: r.ap,
            ap_s: r.ap_s,
            config_hash: c.hash_without_window(),
        });
    }
    std::fs::write(out_dir.join("ablation.csv"), table.to_csv())?;
    std::fs::write(out_dir.join("ablation.md"), table.to_markdown())?;
    Ok(table)
}

/// Fine-tunes `init` with mined negatives: mines on `data`, stores them in
/// the dataset, then trains `hard_negative.epochs` epochs at the configured
/// rate.
pub fn hard_negative_phase(
    cfg: &RunConfig,
    init: &Path,
    data: &mut Dataset,
    val: Option<&Dataset>,
    out_dir: &Path,
    verbose: bool,
) -> Result<(Vec<HardNegative>, TrainReport)> {
    let model = load_model(init)?;
    let mined = mine_with_model(&model, data, cfg)?;
    if verbose {
        eprintln!("mined {} hard negatives on {} images", mined.len(), crate::data::hard_negative_ids(&mined).len());
    }
    data.set_hard_negatives(mined.clone());
    let mut c = cfg.clone();
    c.hard_negative.enabled = true;
    c.train.epochs = cfg.hard_negative.epochs;
    c.train.warmup_steps = 0;
    let report = train(
        &c,
        data,
        val,
        &TrainOptions {
            out_dir: out_dir.to_path_buf(),
            init: Some(init.to_path_buf()),
            verbose,
            ..Default::default()
        },
    )?;
    Ok((mined, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SceneConfig;
    use crate::data::{generate_dataset, Split};

    fn tiny_cfg() -> RunConfig {
        let mut c = RunConfig::smoke();
        c.data.n_train = 6;
        c.train.batch_size = 3;
        c.train.epochs = 2;
        c
    }

    fn dataset(scene: &SceneConfig, n: usize, split: Split) -> (tempfile::TempDir, Dataset) {
        let d = tempfile::tempdir().unwrap();
        generate_dataset(scene, n, split, d.path()).unwrap();
        let ds = Dataset::load(d.path()).unwrap();
        (d, ds)
    }

    #[test]
    fn two_epoch_runs_are_reproducible_and_resumable() {
        let cfg = tiny_cfg();
        let (_d, data) = dataset(&cfg.data.scene, 6, Split::Train);
        let o1 = tempfile::tempdir().unwrap();
        let o2 = tempfile::tempdir().unwrap();
        let opts = |p: &Path| TrainOptions {
            out_dir: p.to_path_buf(),
            ..Default::default()
        };
        let a = train(&cfg, &data, None, &opts(o1.path())).unwrap();
        let b = train(&cfg, &data, None, &opts(o2.path())).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 2);
        assert_eq!(
            std::fs::read(o1.path().join(METRICS_FILE)).unwrap(),
            std::fs::read(o2.path().join(METRICS_FILE)).unwrap()
        );
        // stop after one epoch, then resume for the second
        let o3 = tempfile::tempdir().unwrap();
        train(
            &cfg,
            &data,
            None,
            &TrainOptions {
                stop_after: Some(1),
                ..opts(o3.path())
            },
        )
        .unwrap();
        let resumed = train(
            &cfg,
            &data,
            None,
            &TrainOptions {
                resume: Some(o3.path().join(LAST_CHECKPOINT)),
                ..opts(o3.path())
            },
        )
        .unwrap();
        assert_eq!(resumed.metrics, a.metrics[1..].to_vec());
        assert_eq!(read_metrics(&o3.path().join(METRICS_FILE)).unwrap(), a.metrics);
    }

    #[test]
    fn f64_runs_give_identical_checkpoints() {
        let mut cfg = tiny_cfg();
        cfg.train.precision = Precision::F64;
        cfg.train.epochs = 1;
        let (_d, data) = dataset(&cfg.data.scene, 3, Split::Train);
        let run = || {
            let o = tempfile::tempdir().unwrap();
            let r = train(
                &cfg,
                &data,
                None,
                &TrainOptions {
                    out_dir: o.path().to_path_buf(),
                    ..Default::default()
                },
            )
            .unwrap();
            std::fs::read(r.checkpoint).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn oracle_detections_score_perfectly_through_the_suite() {
        let scene = RunConfig::smoke().data.scene;
        let (_d, data) = dataset(&scene, 3, Split::Val);
        let dets: Vec<Vec<Detection>> = data
            .samples
            .iter()
            .map(|s| s.boxes.iter().map(|b| Detection { bbox: *b, score: 0.9 }).collect())
            .collect();
        let gts: Vec<_> = data.samples.iter().map(|s| s.boxes.clone()).collect();
        let r = coco_suite(&dets, &gts);
        assert_eq!(r.ap50, 1.0);
        let ids: Vec<usize> = data.samples.iter().map(|s| s.id).collect();
        let lines = detections_jsonl(&ids, &dets);
        assert_eq!(lines.lines().count(), gts.iter().map(|g| g.len()).sum::<usize>());
    }

    #[test]
    fn evaluate_matches_manual_pipeline() {
        let cfg = tiny_cfg();
        let (_d, data) = dataset(&cfg.data.scene, 3, Split::Val);
        let model = Detector::<f32>::new(&cfg.model).unwrap();
        let eval = EvalConfig {
            score_thresh: 0.0,
            top_k: 10,
        };
        let (r, dets) = evaluate(&model, &data, &eval).unwrap();
        let mut manual = Vec::new();
        for s in &data.samples {
            let g = Graph::new();
            let out = model.forward(&g, &s.image).unwrap();
            manual.push(crate::head::decode(&g.value(out.hm), &g.value(out.wh), &g.value(out.off), 10, 0.0, STRIDE).unwrap());
        }
        assert_eq!(dets, manual);
        let gts: Vec<_> = data.samples.iter().map(|s| s.boxes.clone()).collect();
        assert_eq!(r, coco_suite(&manual, &gts));
        let empty = Dataset {
            dir: PathBuf::new(),
            manifest: Default::default(),
            samples: vec![],
        };
        assert!(matches!(evaluate(&model, &empty, &eval), Err(Error::Usage(_))));
    }

    #[test]
    fn ablation_csv_round_trip() {
        let t = AblationTable {
            rows: vec![
                AblationRow {
                    window: 2,
                    ap50: 0.5,
                    ap75: 0.25,
                    ap: 0.3,
                    ap_s: 0.125,
                    config_hash: "abc".into(),
                },
                AblationRow {
                    window: 3,
                    ap50: 0.1 + 0.2,
                    ap75: 0.0,
                    ap: 1.0 / 3.0,
                    ap_s: 0.0,
                    config_hash: "abc".into(),
                },
            ],
        };
        assert_eq!(AblationTable::from_csv(&t.to_csv()).unwrap(), t);
        assert!(t.single_config());
        assert!(t.to_markdown().contains("| 3 |"));
        assert!(AblationTable::from_csv("nope\n").is_err());
    }

    #[test]
    fn single_window_ablation_has_one_row() {
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 1;
        let (_d, data) = dataset(&cfg.data.scene, 3, Split::Train);
        let (_v, val) = dataset(&cfg.data.scene, 2, Split::Val);
        let out = tempfile::tempdir().unwrap();
        let t = ablate_window(&cfg, &[2], &data, &val, out.path(), false).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].window, 2);
        let csv = std::fs::read_to_string(out.path().join("ablation.csv")).unwrap();
        assert_eq!(AblationTable::from_csv(&csv).unwrap(), t);
    }
}
