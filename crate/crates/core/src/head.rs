//! Anchor-free center-point head: heatmap, size and offset branches, target
//! encoding, losses and peak decoding.

use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::{dim_err, Result};
use crate::nn::Conv2d;
use crate::tensor::{cst, Float, Graph, Init, ParamStore, Tensor, Var};

pub const STRIDE: usize = 4;
/// Heatmap probabilities are clamped to `[HM_EPS, 1 - HM_EPS]`.
pub const HM_EPS: f64 = 1e-4;
/// Prior probability used to initialise the heatmap bias.
pub const HM_PRIOR: f64 = 0.01;

/// Axis-aligned box in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default)]
    pub class_id: u32,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            x1,
            y1,
            x2,
            y2,
            class_id: 0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        0.0 <= self.x1 && self.x1 < self.x2 && self.x2 <= width && 0.0 <= self.y1 && self.y1 < self.y2 && self.y2 <= height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[1, H, W]` probabilities in `[HM_EPS, 1 - HM_EPS]`.
    pub hm: Var,
    /// `[2, H, W]` box width/height in feature cells.
    pub wh: Var,
    /// `[2, H, W]` sub-cell center offset (x, y).
    pub off: Var,
}

/// `conv3x3(D -> D) + ReLU + conv1x1(D -> out)`.
#[derive(Clone, Debug)]
pub struct Branch {
    pub conv: Conv2d,
    pub out: Conv2d,
}

impl Branch {
    fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, out: usize) -> Result<Self> {
        Ok(Branch {
            conv: Conv2d::new(store, init, &format!("{name}.0"), dim, dim, 3, 1, 1)?,
            out: Conv2d::new(store, init, &format!("{name}.2"), dim, out, 1, 1, 0)?,
        })
    }

    fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = g.relu(y);
        self.out.forward(g, store, y)
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub hm: Branch,
    pub wh: Branch,
    pub off: Branch,
    pub dim: usize,
}

impl Head {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, dim: usize) -> Result<Self> {
        let hm = Branch::new(store, init, "head.hm", dim, 1)?;
        let prior = -((1.0 - HM_PRIOR) / HM_PRIOR).ln();
        store.set_value(hm.out.bias, Tensor::full(&[1], cst(prior)))?;
        Ok(Head {
            hm,
            wh: Branch::new(store, init, "head.wh", dim, 2)?,
            off: Branch::new(store, init, "head.reg", dim, 2)?,
            dim,
        })
    }

    /// `feat: [D, H, W]`.
    pub fn forward_chw<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<HeadOutput> {
        let s = g.shape(feat);
        let (h, w) = match s[..] {
            [d, h, w] if d == self.dim => (h, w),
            _ => return dim_err(format!("head (dim {}) expects [D, H, W], got {s:?}", self.dim)),
        };
        let x = g.reshape(feat, &[1, self.dim, h, w])?;
        let hm = self.hm.forward(g, store, x)?;
        let hm = g.sigmoid(hm);
        let hm = g.clamp(hm, HM_EPS, 1.0 - HM_EPS);
        let wh = self.wh.forward(g, store, x)?;
        let off = self.off.forward(g, store, x)?;
        Ok(HeadOutput {
            hm: g.reshape(hm, &[1, h, w])?,
            wh: g.reshape(wh, &[2, h, w])?,
            off: g.reshape(off, &[2, h, w])?,
        })
    }

    /// `feat: [H, W, D]` as produced by the neck.
    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<HeadOutput> {
        let chw = g.permute(feat, &[2, 0, 1])?;
        self.forward_chw(g, store, chw)
    }
}

/// Largest corner displacement that keeps IoU with the original box at
/// least `min_overlap`, minimised over three perturbation families: both
/// corners moved the same way (translation), both inward (shrink) and both
/// outward (grow). Each case is the smaller non-negative root of a quadratic.
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let (s, p) = (h + w, h * w);
    let mo = min_overlap;
    // translation by (r, r): (w-r)(h-r) / (2wh - (w-r)(h-r)) = mo
    let c1 = p * (1.0 - mo) / (1.0 + mo);
    let r1 = (s - (s * s - 4.0 * c1).max(0.0).sqrt()) / 2.0;
    // shrink by r on every side: (w-2r)(h-2r) / wh = mo
    let r2 = (2.0 * s - (4.0 * s * s - 16.0 * (1.0 - mo) * p).max(0.0).sqrt()) / 8.0;
    // grow by r on every side: wh / ((w+2r)(h+2r)) = mo
    let r3 = (-2.0 * mo * s + (4.0 * mo * mo * s * s + 16.0 * mo * (1.0 - mo) * p).max(0.0).sqrt()) / (8.0 * mo);
    r1.min(r2).min(r3).max(0.0)
}

pub const MIN_OVERLAP: f64 = 0.7;

/// Per-image training targets on the stride-4 grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps<T> {
    pub heatmap: Tensor<T>,
    pub wh: Tensor<T>,
    pub offset: Tensor<T>,
    pub pos_mask: Tensor<T>,
    /// Boxes that were narrower or shorter than one pixel and got widened.
    pub clamped: usize,
}

impl<T: Float> TargetMaps<T> {
    /// Forces strict-negative supervision at the cells holding the centers
    /// of `boxes` (used for mined hard negatives). Positive cells are kept.
    pub fn suppress(&mut self, boxes: &[BBox], stride: usize) {
        let (hf, wf) = (self.heatmap.shape()[1], self.heatmap.shape()[2]);
        for b in boxes {
            let (cx, cy) = b.center();
            let col = ((cx / stride as f64).floor().max(0.0) as usize).min(wf - 1);
            let row = ((cy / stride as f64).floor().max(0.0) as usize).min(hf - 1);
            if self.pos_mask.at(&[0, row, col]) == T::zero() {
                self.heatmap.set(&[0, row, col], T::zero());
            }
        }
    }
}

/// Gaussian footprint half-width and sigma for a box of `w x h` feature cells.
pub fn gaussian_params(w: f64, h: f64) -> (usize, f64) {
    let r = gaussian_radius(h, w, MIN_OVERLAP).max(1.0);
    (r.ceil() as usize, r / 3.0)
}

/// Splats every box center as a unit-peak Gaussian (max-composited) and
/// records size/offset targets at the center cell.
pub fn encode_targets<T: Float>(boxes: &[BBox], hf: usize, wf: usize, stride: usize) -> TargetMaps<T> {
    let mut heat = vec![0.0f64; hf * wf];
    let mut wh = Tensor::<T>::zeros(&[2, hf, wf]);
    let mut offset = Tensor::<T>::zeros(&[2, hf, wf]);
    let mut pos = Tensor::<T>::zeros(&[1, hf, wf]);
    let mut clamped = 0;
    let s = stride as f64;
    for b in boxes {
        let (mut bw, mut bh) = (b.width(), b.height());
        if bw <= 1.0 || bh <= 1.0 {
            clamped += 1;
            bw = bw.max(1.0);
            bh = bh.max(1.0);
        }
        let (cx, cy) = b.center();
        let (fx, fy) = (cx / s, cy / s);
        let col = (fx.floor().max(0.0) as usize).min(wf - 1);
        let row = (fy.floor().max(0.0) as usize).min(hf - 1);
        let (fw, fh) = (bw / s, bh / s);
        let (rad, sigma) = gaussian_params(fw, fh);
        let denom = 2.0 * sigma * sigma;
        let (r0, r1) = (row.saturating_sub(rad), (row + rad).min(hf - 1));
        let (c0, c1) = (col.saturating_sub(rad), (col + rad).min(wf - 1));
        for i in r0..=r1 {
            for j in c0..=c1 {
                let dy = i as f64 - row as f64;
                let dx = j as f64 - col as f64;
                let v = (-(dx * dx + dy * dy) / denom).exp();
                let slot = &mut heat[i * wf + j];
                *slot = slot.max(v);
            }
        }
        wh.set(&[0, row, col], cst(fw));
        wh.set(&[1, row, col], cst(fh));
        offset.set(&[0, row, col], cst(fx - col as f64));
        offset.set(&[1, row, col], cst(fy - row as f64));
        pos.set(&[0, row, col], T::one());
    }
    TargetMaps {
        heatmap: Tensor::new(vec![1, hf, wf], heat.into_iter().map(cst).collect()).expect("shape"),
        wh,
        offset,
        pos_mask: pos,
        clamped,
    }
}

/// Individual loss terms on one image's graph.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub focal: Var,
    pub wh: Var,
    pub off: Var,
}

/// `focal + wh_weight * L1(wh) + off_weight * L1(offset)`.
pub fn total_loss<T: Float>(
    g: &Graph<T>,
    out: &HeadOutput,
    targets: &TargetMaps<T>,
    w: &LossWeights,
) -> Result<LossParts> {
    let focal = g.focal_loss(out.hm, &targets.heatmap, w.hm_alpha, w.hm_gamma)?;
    let wh = g.masked_l1(out.wh, &targets.wh, &targets.pos_mask)?;
    let off = g.masked_l1(out.off, &targets.offset, &targets.pos_mask)?;
    let wh_term = g.scale(wh, w.wh_weight);
    let off_term = g.scale(off, w.off_weight);
    let total = g.add(focal, wh_term)?;
    let total = g.add(total, off_term)?;
    Ok(LossParts { total, focal, wh, off })
}

/// Peak extraction and box decoding.
///
/// A cell is a peak when it equals the maximum of its 3x3 neighbourhood
/// (equal neighbours are all kept). Peaks scoring at least `score_thresh`
/// are ranked by score, ties broken by `(row, col)`, and the best `k` are
/// turned into boxes clamped to the image.
pub fn decode<T: Float>(
    hm: &Tensor<T>,
    wh: &Tensor<T>,
    off: &Tensor<T>,
    k: usize,
    score_thresh: f64,
    stride: usize,
) -> Result<Vec<Detection>> {
    let s = hm.shape();
    let (h, w) = match s[..] {
        [1, h, w] => (h, w),
        _ => return dim_err(format!("decode expects a [1, H, W] heatmap, got {s:?}")),
    };
    if wh.shape() != [2, h, w] || off.shape() != [2, h, w] {
        return dim_err(format!("decode: wh {:?} / offset {:?} for heatmap {s:?}", wh.shape(), off.shape()));
    }
    let v = |i: usize, j: usize| hm.data()[i * w + j].to_f64().unwrap_or(f64::NAN);
    let mut peaks = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let c = v(i, j);
            if c.is_nan() || c < score_thresh {
                continue;
            }
            let mut is_peak = true;
            'nb: for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni >= 0 && nj >= 0 && (ni as usize) < h && (nj as usize) < w && v(ni as usize, nj as usize) > c {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                peaks.push((c, i, j));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    peaks.truncate(k);
    let (img_w, img_h) = ((w * stride) as f64, (h * stride) as f64);
    let st = stride as f64;
    let plane = h * w;
    let f = |t: &Tensor<T>, idx: usize| t.data()[idx].to_f64().unwrap_or(0.0);
    let mut dets = Vec::with_capacity(peaks.len());
    for (score, i, j) in peaks {
        let idx = i * w + j;
        let cx = (j as f64 + f(off, idx)) * st;
        let cy = (i as f64 + f(off, plane + idx)) * st;
        let bw = f(wh, idx).max(0.0) * st;
        let bh = f(wh, plane + idx).max(0.0) * st;
        let bbox = BBox::new(
            (cx - bw / 2.0).clamp(0.0, img_w),
            (cy - bh / 2.0).clamp(0.0, img_h),
            (cx + bw / 2.0).clamp(0.0, img_w),
            (cy + bh / 2.0).clamp(0.0, img_h),
        );
        if bbox.width() > 0.0 && bbox.height() > 0.0 {
            dets.push(Detection { bbox, score });
        }
    }
    Ok(dets)
}
