//! Browser bindings for three small pieces of the detector: the synthetic
//! scene renderer, the shifted-window attention mask, and the center-point
//! training target with its focal loss.

use wasm_bindgen::prelude::*;

use swinbird::config::{LossWeights, SceneConfig};
use swinbird::data::{generate_scene, to_rgb8};
use swinbird::head::{encode_targets, gaussian_radius, BBox, MIN_OVERLAP, STRIDE};
use swinbird::tensor::layout::ZERO;
use swinbird::window::{attention_mask, WindowGrid};

fn js_err(e: swinbird::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A rendered scene: RGBA pixels plus `[x1, y1, x2, y2]` per bird.
#[wasm_bindgen]
pub struct SceneView {
    size: usize,
    rgba: Vec<u8>,
    boxes: Vec<f64>,
}

#[wasm_bindgen]
impl SceneView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn boxes(&self) -> Vec<f64> {
        self.boxes.clone()
    }
}

pub fn scene_view(seed: u64, size: usize, max_birds: usize, clutter: f64) -> Result<SceneView, swinbird::Error> {
    let cfg = SceneConfig {
        image_size: size,
        birds_per_image: (max_birds.min(1), max_birds),
        clutter_density: clutter,
        seed,
        ..SceneConfig::default()
    };
    cfg.validate()?;
    let scene = generate_scene(&cfg, seed);
    let (_, _, rgb) = to_rgb8(&scene.image)?;
    let rgba = rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
    let boxes = scene.boxes.iter().flat_map(|b| [b.x1, b.y1, b.x2, b.y2]).collect();
    Ok(SceneView { size, rgba, boxes })
}

#[wasm_bindgen]
pub fn render_scene(seed: u64, size: usize, max_birds: usize, clutter: f64) -> Result<SceneView, JsError> {
    scene_view(seed, size, max_birds, clutter).map_err(js_err)
}

pub const CELL_OTHER: u8 = 0;
pub const CELL_MASKED: u8 = 1;
pub const CELL_ATTEND: u8 = 2;
pub const CELL_QUERY: u8 = 3;

/// Classifies every cell of an `h x w` token map relative to the query at
/// `(qi, qj)`: outside the query's window, in its window but masked, or
/// attended to. Returns `h * w` codes (row-major) followed by the window id
/// of each cell.
pub fn mask_cells(h: usize, w: usize, window: usize, shifted: bool, qi: usize, qj: usize) -> Result<Vec<u32>, swinbird::Error> {
    if qi >= h || qj >= w {
        return Err(swinbird::Error::Usage(format!("query ({qi}, {qj}) outside a {h}x{w} map")));
    }
    let grid = WindowGrid::new(h, w, window, shifted)?;
    let mask = attention_mask(&grid)?;
    let fwd = grid.forward_map(1);
    let n = grid.tokens_per_window();
    let mut slot = vec![(0usize, 0usize); h * w];
    for (k, &src) in fwd.iter().enumerate() {
        if src != ZERO {
            slot[src as usize] = (k / n, k % n);
        }
    }
    let (qwin, qt) = slot[qi * w + qj];
    let mut codes = vec![CELL_OTHER as u32; h * w];
    for (p, &(win, t)) in slot.iter().enumerate() {
        if win != qwin {
            continue;
        }
        let blocked = mask.as_ref().is_some_and(|m| m.at(win, qt, t) < 0.0);
        codes[p] = if blocked { CELL_MASKED } else { CELL_ATTEND } as u32;
    }
    codes[qi * w + qj] = CELL_QUERY as u32;
    codes.extend(slot.iter().map(|&(win, _)| win as u32));
    Ok(codes)
}

#[wasm_bindgen]
pub fn window_mask(h: usize, w: usize, window: usize, shifted: bool, qi: usize, qj: usize) -> Result<Vec<u32>, JsError> {
    mask_cells(h, w, window, shifted, qi, qj).map_err(js_err)
}

/// Center heatmap (`size / 4` square, row-major) for one box, with the
/// Gaussian radius as the final element.
pub fn heatmap_for_box(size: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Vec<f32> {
    let hf = (size / STRIDE).max(1);
    let b = BBox::new(x1, y1, x2, y2);
    let t = encode_targets::<f32>(&[b], hf, hf, STRIDE);
    let r = gaussian_radius((b.height() / STRIDE as f64).max(1.0), (b.width() / STRIDE as f64).max(1.0), MIN_OVERLAP);
    let mut out = t.heatmap.data().to_vec();
    out.push(r as f32);
    out
}

#[wasm_bindgen]
pub fn target_heatmap(size: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Vec<f32> {
    heatmap_for_box(size, x1, y1, x2, y2)
}

/// Per-pixel focal loss over `p` in `(0, 1)` for a cell with soft target `y`:
/// `-(1-p)^a log p` at the peak, `-(1-y)^b p^a log(1-p)` elsewhere.
#[wasm_bindgen]
pub fn focal_curve(y: f64, alpha: f64, beta: f64, points: usize) -> Vec<f64> {
    let points = points.max(2);
    (0..points)
        .map(|k| {
            let p = (k as f64 + 0.5) / points as f64;
            if y >= 1.0 {
                -(1.0 - p).powf(alpha) * p.ln()
            } else {
                -(1.0 - y).powf(beta) * p.powf(alpha) * (1.0 - p).ln()
            }
        })
        .collect()
}

/// `[alpha, gamma]` of the default heatmap loss.
#[wasm_bindgen]
pub fn default_focal_params() -> Vec<f64> {
    let w = LossWeights::default();
    vec![w.hm_alpha, w.hm_gamma]
}
