//! Synthetic sky scenes with small dark birds, dataset files on disk, and
//! hard-negative mining/sampling.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::SceneConfig;
use crate::error::{Error, Result};
use crate::head::{BBox, Detection};
use crate::metrics::iou;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
/// Coverage samples per pixel side when painting glyphs.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    /// Clutter-only scenes used to count false positives.
    Clutter,
}

impl Split {
    fn namespace(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Val => 0x7661_6c00_0000_0000,
            Split::Clutter => 0x636c_7574_7465_7200,
        }
    }
}

/// splitmix64 finaliser; decorrelates neighbouring image ids.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn scene_seed(base: u64, split: Split, id: usize) -> u64 {
    mix(mix(base ^ split.namespace()) ^ id as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub boxes: Vec<BBox>,
}

struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    /// Blends `color` over the pixels covered by `inside`, sampled on a
    /// `SUPERSAMPLE`^2 grid within the clip rectangle. Returns the bounds of
    /// pixels that received any coverage.
    fn paint(
        &mut self,
        clip: (f64, f64, f64, f64),
        color: [f32; 3],
        inside: impl Fn(f64, f64) -> bool,
    ) -> Option<(usize, usize, usize, usize)> {
        let n = self.size as i64;
        let x0 = (clip.0.floor() as i64).clamp(0, n) as usize;
        let y0 = (clip.1.floor() as i64).clamp(0, n) as usize;
        let x1 = (clip.2.ceil() as i64).clamp(0, n) as usize;
        let y1 = (clip.3.ceil() as i64).clamp(0, n) as usize;
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        let ss = SUPERSAMPLE as f64;
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / ss;
                        let py = y as f64 + (sy as f64 + 0.5) / ss;
                        if inside(px, py) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let a = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                let p = &mut self.px[y * self.size + x];
                for c in 0..3 {
                    p[c] = p[c] * (1.0 - a) + color[c] * a;
                }
                bounds = Some(match bounds {
                    None => (x, y, x + 1, y + 1),
                    Some((a0, b0, a1, b1)) => (a0.min(x), b0.min(y), a1.max(x + 1), b1.max(y + 1)),
                });
            }
        }
        bounds
    }
}

fn seg_dist(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    (qx * qx + qy * qy).sqrt()
}

#[derive(Clone, Copy, Debug)]
enum Glyph {
    Ellipse { aspect: f64 },
    Chevron { droop: f64 },
}

/// Glyph of extent `size` centred at `(cx, cy)` rotated by `theta`; the
/// painted shape stays within a circle of radius `size / 2`.
fn glyph_inside(g: Glyph, size: f64, cx: f64, cy: f64, theta: f64) -> impl Fn(f64, f64) -> bool {
    let (s, c) = theta.sin_cos();
    let half = size / 2.0;
    move |px, py| {
        let (dx, dy) = (px - cx, py - cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match g {
            Glyph::Ellipse { aspect } => {
                let b = (half * aspect).max(0.6);
                (u / half).powi(2) + (v / b).powi(2) <= 1.0
            }
            Glyph::Chevron { droop } => {
                let t = (size / 7.0).max(0.8);
                let tip = half - t / 2.0;
                let apex = (0.0, droop * tip * 0.5);
                let l = (-tip, -droop * tip * 0.5);
                let r = (tip, -droop * tip * 0.5);
                seg_dist(u, v, apex, l).min(seg_dist(u, v, apex, r)) <= t / 2.0
            }
        }
    }
}

/// Renders one scene. Deterministic in `seed`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let nf = n as f64;
    // sky: vertical gradient between two blue-grey tones
    let top = [rng.gen_range(0.45..0.7f32), rng.gen_range(0.6..0.8f32), rng.gen_range(0.8..0.98f32)];
    let bottom = [rng.gen_range(0.7..0.9f32), rng.gen_range(0.75..0.92f32), rng.gen_range(0.85..1.0f32)];
    let mut canvas = Canvas {
        size: n,
        px: vec![[0.0; 3]; n * n],
    };
    for y in 0..n {
        let t = y as f32 / (n - 1).max(1) as f32;
        for x in 0..n {
            let p = &mut canvas.px[y * n + x];
            for c in 0..3 {
                p[c] = top[c] * (1.0 - t) + bottom[c] * t;
            }
        }
    }
    // clouds: soft bright blobs
    let n_clouds = (cfg.clutter_density * 10.0 * rng.gen_range(0.5..1.5)).round() as usize;
    for _ in 0..n_clouds {
        let (cx, cy) = (rng.gen_range(0.0..nf), rng.gen_range(0.0..nf));
        let (sx, sy) = (rng.gen_range(4.0..nf / 4.0), rng.gen_range(3.0..nf / 6.0));
        let amp = rng.gen_range(0.1..0.35f32);
        for y in 0..n {
            for x in 0..n {
                let d = ((x as f64 - cx) / sx).powi(2) + ((y as f64 - cy) / sy).powi(2);
                if d < 9.0 {
                    let a = amp * (-0.5 * d).exp() as f32;
                    let p = &mut canvas.px[y * n + x];
                    for v in p.iter_mut() {
                        *v += (1.0 - *v) * a;
                    }
                }
            }
        }
    }
    // distractors: thin wires and grey debris blobs, never annotated
    let n_wires = (cfg.clutter_density * rng.gen_range(0.0..3.0)).round() as usize;
    for _ in 0..n_wires {
        let a = (rng.gen_range(0.0..nf), rng.gen_range(0.0..nf));
        let angle = rng.gen_range(-0.5..0.5f64);
        let b = (a.0 + nf * angle.cos(), a.1 + nf * angle.sin());
        let a = (a.0 - nf * angle.cos(), a.1 - nf * angle.sin());
        let w = rng.gen_range(0.4..0.9);
        let shade = rng.gen_range(0.25..0.45f32);
        canvas.paint((0.0, 0.0, nf, nf), [shade; 3], move |x, y| seg_dist(x, y, a, b) <= w / 2.0);
    }
    let n_debris = (cfg.clutter_density * 10.0 * rng.gen_range(0.3..1.2)).round() as usize;
    for _ in 0..n_debris {
        let r = rng.gen_range(0.8..3.0);
        let (cx, cy) = (rng.gen_range(r..nf - r), rng.gen_range(r..nf - r));
        let shade = rng.gen_range(0.3..0.55f32);
        canvas.paint((cx - r, cy - r, cx + r, cy + r), [shade, shade, shade * 0.95], move |x, y| {
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        });
    }
    // birds: dark ellipses or chevrons, placed without overlap
    let (bmin, bmax) = cfg.birds_per_image;
    let count = rng.gen_range(bmin..=bmax);
    let (smin, smax) = cfg.bird_size_px;
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..30 {
            let size = rng.gen_range(smin as f64..=smax as f64);
            let half = size / 2.0;
            let cx = rng.gen_range(half + 1.0..nf - half - 1.0);
            let cy = rng.gen_range(half + 1.0..nf - half - 1.0);
            let clip = (cx - half - 1.0, cy - half - 1.0, cx + half + 1.0, cy + half + 1.0);
            let probe = BBox::new(clip.0, clip.1, clip.2, clip.3);
            if boxes.iter().any(|b| iou(b, &probe) > 0.0) {
                continue;
            }
            let glyph = if rng.gen_bool(0.5) {
                Glyph::Ellipse {
                    aspect: rng.gen_range(0.3..0.6),
                }
            } else {
                Glyph::Chevron {
                    droop: rng.gen_range(0.3..0.8),
                }
            };
            let theta = rng.gen_range(-0.5..0.5);
            let shade = rng.gen_range(0.03..0.3f32);
            let color = [shade, shade * 0.95, shade * 0.9];
            if let Some((x0, y0, x1, y1)) = canvas.paint(clip, color, glyph_inside(glyph, size, cx, cy, theta)) {
                boxes.push(BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64));
            }
            break;
        }
    }
    // sensor noise
    let noise = Normal::new(0.0f32, 0.01).expect("valid sigma");
    let mut data = vec![0.0f32; 3 * n * n];
    for (i, p) in canvas.px.iter().enumerate() {
        for c in 0..3 {
            data[c * n * n + i] = (p[c] + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Scene {
        image: Tensor::new(vec![3, n, n], data).expect("shape"),
        boxes,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: usize,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: usize,
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
    pub class_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardNegative {
    pub image_id: usize,
    pub bbox: [f64; 4],
    pub score: f64,
}

fn to_arr(b: &BBox) -> [f64; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

pub fn from_arr(a: &[f64; 4]) -> BBox {
    BBox::new(a[0], a[1], a[2], a[3])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
    #[serde(default)]
    pub hard_negatives: Vec<HardNegative>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for a in &self.annotations {
            let img = self
                .images
                .iter()
                .find(|i| i.id == a.image_id)
                .ok_or_else(|| Error::Usage(format!("annotation refers to unknown image {}", a.image_id)))?;
            if !from_arr(&a.bbox).within(img.width as f64, img.height as f64) {
                return Err(Error::Usage(format!("box {:?} outside image {}", a.bbox, a.image_id)));
            }
        }
        Ok(())
    }

    pub fn boxes_for(&self, image_id: usize) -> Vec<BBox> {
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .map(|a| BBox {
                class_id: a.class_id,
                ..from_arr(&a.bbox)
            })
            .collect()
    }

    pub fn hard_negatives_for(&self, image_id: usize) -> Vec<BBox> {
        self.hard_negatives
            .iter()
            .filter(|h| h.image_id == image_id)
            .map(|h| from_arr(&h.bbox))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST), self.to_json()?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

pub fn image_file_name(id: usize) -> String {
    format!("img_{id:06}.png")
}

/// Renders `n_images` scenes of `split` into `out_dir` as 8-bit PNGs plus
/// `manifest.json`.
pub fn generate_dataset(cfg: &SceneConfig, n_images: usize, split: Split, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut m = DatasetManifest::default();
    for id in 0..n_images {
        let scene = generate_scene(cfg, scene_seed(cfg.seed, split, id));
        let file = image_file_name(id);
        save_png(&scene.image, &out_dir.join(&file))?;
        m.images.push(ImageEntry {
            id,
            file,
            width: cfg.image_size,
            height: cfg.image_size,
        });
        for b in &scene.boxes {
            m.annotations.push(Annotation {
                image_id: id,
                bbox: to_arr(b),
                class_id: b.class_id,
            });
        }
    }
    m.save(out_dir)?;
    Ok(m)
}

pub fn to_rgb8(img: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("expected [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((h, w, out))
}

pub fn save_png(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w, buf) = to_rgb8(img)?;
    image::save_buffer_with_format(path, &buf, w as u32, h as u32, image::ColorType::Rgb8, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, p) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = p[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// One decoded image with its annotations and mined negatives.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub image: Tensor<f32>,
    pub boxes: Vec<BBox>,
    pub hard_negatives: Vec<BBox>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let mut samples = Vec::with_capacity(manifest.images.len());
        for e in &manifest.images {
            samples.push(Sample {
                id: e.id,
                image: load_png(&dir.join(&e.file))?,
                boxes: manifest.boxes_for(e.id),
                hard_negatives: manifest.hard_negatives_for(e.id),
            });
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn set_hard_negatives(&mut self, hn: Vec<HardNegative>) {
        self.manifest.hard_negatives = hn;
        for s in &mut self.samples {
            s.hard_negatives = self.manifest.hard_negatives_for(s.id);
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Detections scoring at least `score_thresh` whose IoU with every ground
/// truth box is below `iou_thresh`. Output is sorted by image id, then
/// descending score, so it does not depend on the order images are visited.
pub fn mine_hard_negatives(
    images: &[(usize, Vec<BBox>, Vec<Detection>)],
    score_thresh: f64,
    iou_thresh: f64,
) -> Vec<HardNegative> {
    let mut out: Vec<HardNegative> = images
        .iter()
        .flat_map(|(id, gts, dets)| {
            dets.iter()
                .filter(move |d| d.score >= score_thresh && gts.iter().all(|g| iou(g, &d.bbox) < iou_thresh))
                .map(move |d| HardNegative {
                    image_id: *id,
                    bbox: to_arr(&d.bbox),
                    score: d.score,
                })
        })
        .collect();
    out.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(b.score.total_cmp(&a.score))
            .then(a.bbox.partial_cmp(&b.bbox).unwrap_or(std::cmp::Ordering::Equal))
    });
    out
}

/// Batch composer: each batch takes on average `rate * batch` images from
/// the pool carrying mined negatives and fills the rest from a shuffled pass
/// over the other images.
///
/// The per-batch pool count is `floor(rate * B)` plus one with probability
/// equal to the fractional part, so the long-run fraction equals `rate`.
#[derive(Clone, Debug)]
pub struct HardNegativeSampler {
    pool: Vec<usize>,
    rest: Vec<usize>,
    rate: f64,
    rng: ChaCha8Rng,
    cursor: usize,
}

impl HardNegativeSampler {
    /// `has_negatives[i]` marks sample `i` as belonging to the pool.
    pub fn new(has_negatives: &[bool], rate: f64, seed: u64) -> Self {
        let pool: Vec<usize> = (0..has_negatives.len()).filter(|&i| has_negatives[i]).collect();
        let mut rest: Vec<usize> = (0..has_negatives.len()).filter(|&i| !has_negatives[i]).collect();
        let rate = if pool.is_empty() { 0.0 } else { rate.clamp(0.0, 1.0) };
        // with no negatives in play the sampler degrades to plain shuffling
        if rate == 0.0 {
            rest = (0..has_negatives.len()).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rest.shuffle(&mut rng);
        HardNegativeSampler {
            pool,
            rest,
            rate,
            rng,
            cursor: 0,
        }
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let want = self.rate * batch as f64;
        let mut k = want.floor() as usize;
        if self.rng.gen::<f64>() < want - k as f64 {
            k += 1;
        }
        if self.rest.is_empty() {
            k = batch;
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..k.min(batch) {
            out.push(self.pool[self.rng.gen_range(0..self.pool.len())]);
        }
        while out.len() < batch {
            if self.cursor == self.rest.len() {
                self.rest.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.rest[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Ids of images with at least one mined negative.
pub fn hard_negative_ids(hn: &[HardNegative]) -> HashSet<usize> {
    hn.iter().map(|h| h.image_id).collect()
}
