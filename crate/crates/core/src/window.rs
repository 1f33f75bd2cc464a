//! Window partitioning, cyclic shifts, shift masks, relative position bias
//! and multi-head self-attention restricted to local windows.
//!
//! Feature maps are `[H, W, C]`. Windows and the tokens inside a window are
//! both enumerated in row-major order; checkpoints depend on this order.

use crate::error::{dim_err, Error, Result};
use crate::nn::{Linear, INIT_STD};
use crate::tensor::layout;
use crate::tensor::{cst, Float, Graph, Init, ParamId, ParamStore, Tensor, Var, MASK_NEG};

/// Geometry of one window-attention pass, including right/bottom padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub shift: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, window: usize, shifted: bool) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        let shift = if shifted { window / 2 } else { 0 };
        if shifted && shift == 0 {
            return Err(Error::Usage(format!(
                "shifted windows need window >= 2, got {window}"
            )));
        }
        Ok(WindowGrid {
            h,
            w,
            window,
            shift,
            padded_h: h.div_ceil(window) * window,
            padded_w: w.div_ceil(window) * window,
        })
    }

    pub fn num_windows(&self) -> usize {
        (self.padded_h / self.window) * (self.padded_w / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn is_padded(&self) -> bool {
        self.padded_h != self.h || self.padded_w != self.w
    }

    /// Pad, shift by `-shift`, partition: `[h, w, c]` to `[nW, M*M, c]`.
    pub fn forward_map(&self, c: usize) -> Vec<u32> {
        let (hp, wp, s) = (self.padded_h, self.padded_w, self.shift as isize);
        let pad = layout::pad_hw(self.h, self.w, c, hp, wp);
        let shift = layout::cyclic_shift(hp, wp, c, -s, -s);
        let part = layout::window_partition(hp, wp, c, self.window);
        layout::compose(&part, &layout::compose(&shift, &pad))
    }

    /// Exact inverse of [`WindowGrid::forward_map`] on the unpadded region.
    pub fn reverse_map(&self, c: usize) -> Vec<u32> {
        let (hp, wp, s) = (self.padded_h, self.padded_w, self.shift as isize);
        let rev = layout::window_reverse(hp, wp, c, self.window);
        let shift = layout::cyclic_shift(hp, wp, c, s, s);
        let crop = layout::crop_hw(hp, wp, c, self.h, self.w);
        layout::compose(&crop, &layout::compose(&shift, &rev))
    }
}

fn check_hwc<T: Float>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => dim_err(format!("expected an [H, W, C] map, got {s:?}")),
    }
}

/// `[H, W, C]` to `[(H/M)(W/M), M*M, C]`.
pub fn window_partition<T: Float>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let (h, w, c) = check_hwc(x)?;
    if m == 0 || h % m != 0 || w % m != 0 {
        return dim_err(format!("window {m} does not divide {h}x{w}; pad first"));
    }
    x.gather(&layout::window_partition(h, w, c, m), &[(h / m) * (w / m), m * m, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Float>(windows: &Tensor<T>, m: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = windows.shape();
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) || s.len() != 3 || s[0] != (h / m) * (w / m) || s[1] != m * m {
        return dim_err(format!("windows {s:?} do not tile {h}x{w} with window {m}"));
    }
    let c = s[2];
    windows.gather(&layout::window_reverse(h, w, c, m), &[h, w, c])
}

/// Torus roll: `out[i, j] = x[(i - dy) mod H, (j - dx) mod W]`.
pub fn cyclic_shift<T: Float>(x: &Tensor<T>, dy: isize, dx: isize) -> Result<Tensor<T>> {
    let (h, w, c) = check_hwc(x)?;
    x.gather(&layout::cyclic_shift(h, w, c, dy, dx), &[h, w, c])
}

/// Additive attention mask, `[num_windows, n, n]` with `n = M*M`; entries are
/// `0` or [`MASK_NEG`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub num_windows: usize,
    pub n: usize,
    pub data: Vec<f64>,
}

impl AttnMask {
    pub fn at(&self, window: usize, i: usize, j: usize) -> f64 {
        self.data[(window * self.n + i) * self.n + j]
    }

    fn zeros(num_windows: usize, n: usize) -> Self {
        AttnMask {
            num_windows,
            n,
            data: vec![0.0; num_windows * n * n],
        }
    }

    /// Broadcast over heads into a `[nW, heads, n, n]` constant.
    fn expand<T: Float>(&self, heads: usize) -> Tensor<T> {
        let n2 = self.n * self.n;
        let mut data = Vec::with_capacity(self.num_windows * heads * n2);
        for w in 0..self.num_windows {
            for _ in 0..heads {
                data.extend(self.data[w * n2..(w + 1) * n2].iter().map(|&v| cst::<T>(v)));
            }
        }
        Tensor::new(vec![self.num_windows, heads, self.n, self.n], data).expect("mask shape")
    }
}

/// Per-position label in the shifted, padded frame. Three bands per axis:
/// `[0, P-M)`, `[P-M, P-s)`, `[P-s, P)`.
fn region_labels(grid: &WindowGrid) -> Vec<usize> {
    let (hp, wp, m, s) = (grid.padded_h, grid.padded_w, grid.window, grid.shift);
    let band = |i: usize, p: usize| {
        if i < p - m {
            0
        } else if i < p - s {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(hp * wp);
    for i in 0..hp {
        for j in 0..wp {
            labels.push(band(i, hp) * 3 + band(j, wp));
        }
    }
    labels
}

/// Mask for shifted-window attention on an `h x w` map (padded up to a
/// multiple of `m`): tokens attend only to tokens from the same contiguous
/// region before the cyclic shift.
pub fn build_shift_mask(h: usize, w: usize, m: usize) -> Result<AttnMask> {
    if m < 2 {
        return Err(Error::Usage(format!("shift mask needs window >= 2, got {m}")));
    }
    let grid = WindowGrid::new(h, w, m, true)?;
    let labels = region_labels(&grid);
    let map = layout::window_partition(grid.padded_h, grid.padded_w, 1, m);
    let n = m * m;
    let mut mask = AttnMask::zeros(grid.num_windows(), n);
    for win in 0..mask.num_windows {
        for i in 0..n {
            let li = labels[map[win * n + i] as usize];
            for j in 0..n {
                if labels[map[win * n + j] as usize] != li {
                    mask.data[(win * n + i) * n + j] = MASK_NEG;
                }
            }
        }
    }
    Ok(mask)
}

/// Full mask for one block: shift regions (if shifted) plus padded keys.
/// `None` when nothing needs masking.
pub fn attention_mask(grid: &WindowGrid) -> Result<Option<AttnMask>> {
    if grid.shift == 0 && !grid.is_padded() {
        return Ok(None);
    }
    let n = grid.tokens_per_window();
    let mut mask = if grid.shift > 0 {
        build_shift_mask(grid.h, grid.w, grid.window)?
    } else {
        AttnMask::zeros(grid.num_windows(), n)
    };
    if grid.is_padded() {
        // token origin in the unshifted padded frame decides whether it is padding
        let (hp, wp, s) = (grid.padded_h, grid.padded_w, grid.shift);
        let map = layout::window_partition(hp, wp, 1, grid.window);
        for win in 0..mask.num_windows {
            for j in 0..n {
                let pos = map[win * n + j] as usize;
                let (i0, j0) = ((pos / wp + s) % hp, (pos % wp + s) % wp);
                if i0 >= grid.h || j0 >= grid.w {
                    for i in 0..n {
                        mask.data[(win * n + i) * n + j] = MASK_NEG;
                    }
                }
            }
        }
    }
    Ok(Some(mask))
}

/// Index into a `(2M-1)^2` bias table for every ordered token pair of a window.
pub fn relative_position_index(m: usize) -> Vec<u32> {
    let n = m * m;
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ri, ci) = (i / m, i % m);
        for j in 0..n {
            let (rj, cj) = (j / m, j % m);
            let dr = ri + m - 1 - rj;
            let dc = ci + m - 1 - cj;
            idx.push((dr * span + dc) as u32);
        }
    }
    idx
}

fn bias_gather_map(m: usize, heads: usize) -> Vec<u32> {
    let idx = relative_position_index(m);
    let mut map = Vec::with_capacity(heads * idx.len());
    for h in 0..heads {
        map.extend(idx.iter().map(|&k| k * heads as u32 + h as u32));
    }
    map
}

/// Expands a `[(2M-1)^2, heads]` table into a `[heads, M*M, M*M]` bias.
pub fn relative_position_bias<T: Float>(m: usize, heads: usize, table: &Tensor<T>) -> Result<Tensor<T>> {
    let rows = (2 * m - 1) * (2 * m - 1);
    if table.shape() != [rows, heads] {
        return dim_err(format!("bias table {:?}, expected [{rows}, {heads}]", table.shape()));
    }
    let n = m * m;
    table.gather(&bias_gather_map(m, heads), &[heads, n, n])
}

/// Multi-head self-attention inside windows.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_table: Option<ParamId>,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        use_rel_bias: bool,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let qkv = Linear::new(store, init, &format!("{name}.qkv"), dim, 3 * dim, true)?;
        let proj = Linear::new(store, init, &format!("{name}.proj"), dim, dim, true)?;
        let rel_table = if use_rel_bias {
            let rows = (2 * window - 1) * (2 * window - 1);
            Some(store.add(
                format!("{name}.relative_position_bias_table"),
                init.trunc_normal(&[rows, heads], INIT_STD),
            )?)
        } else {
            None
        };
        Ok(WindowAttention {
            qkv,
            proj,
            rel_table,
            dim,
            heads,
            window,
        })
    }

    /// `x_windows: [nW, M*M, C]` to the same shape.
    pub fn forward<T: Float>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x_windows: Var,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let s = g.shape(x_windows);
        let (nw, n, c) = match s[..] {
            [a, b, c] => (a, b, c),
            _ => return dim_err(format!("window attention input {s:?}")),
        };
        if c != self.dim || n != self.window * self.window {
            return dim_err(format!(
                "window attention built for dim {} / window {}, got {s:?}",
                self.dim, self.window
            ));
        }
        let (heads, d) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(g, store, x_windows)?;
        // [nW, n, 3, heads, d] -> three [nW, heads, n, d] views
        let split = |part: usize| {
            let mut map = Vec::with_capacity(nw * n * c);
            for w in 0..nw {
                for h in 0..heads {
                    for t in 0..n {
                        let base = (w * n + t) * 3 * c + part * c + h * d;
                        map.extend((base..base + d).map(|i| i as u32));
                    }
                }
            }
            map
        };
        let q = g.gather(qkv, split(0), &[nw, heads, n, d])?;
        let k = g.gather(qkv, split(1), &[nw, heads, n, d])?;
        let v = g.gather(qkv, split(2), &[nw, heads, n, d])?;
        let q = g.scale(q, 1.0 / (d as f64).sqrt());
        let mut logits = g.matmul_t(q, k)?;
        if let Some(table) = self.rel_table {
            let t = g.param(store, table);
            let bias = g.gather(t, bias_gather_map(self.window, heads), &[heads, n, n])?;
            logits = g.add_suffix(logits, bias)?;
        }
        if let Some(mask) = mask {
            if mask.num_windows != nw || mask.n != n {
                return dim_err(format!(
                    "mask for {}x{} windows, input has {nw}x{n}",
                    mask.num_windows, mask.n
                ));
            }
            let mv = g.constant(mask.expand(heads));
            logits = g.add(logits, mv)?;
        }
        let attn = g.softmax_lastdim(logits);
        let out = g.matmul(attn, v)?;
        let merged = g.permute(out, &[0, 2, 1, 3])?;
        let merged = g.reshape(merged, &[nw, n, c])?;
        self.proj.forward(g, store, merged)
    }

    /// Attention weights `[nW, heads, n, n]` for inspection.
    pub fn attention_weights<T: Float>(
        &self,
        store: &ParamStore<T>,
        x_windows: &Tensor<T>,
        mask: Option<&AttnMask>,
    ) -> Result<Tensor<T>> {
        let g = Graph::new();
        let x = g.constant(x_windows.clone());
        let s = x_windows.shape();
        let (nw, n, c) = (s[0], s[1], s[2]);
        let (heads, d) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(&g, store, x)?;
        let qkv = g.reshape(qkv, &[nw, n, 3, heads, d])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let all = g.value(qkv);
        let third = nw * heads * n * d;
        let part = |i: usize| Tensor::new(vec![nw, heads, n, d], all.data()[i * third..(i + 1) * third].to_vec());
        let q = g.constant(part(0)?);
        let k = g.constant(part(1)?);
        let q = g.scale(q, 1.0 / (d as f64).sqrt());
        let mut logits = g.matmul_t(q, k)?;
        if let Some(table) = self.rel_table {
            let bias = relative_position_bias(self.window, heads, store.get(table).value())?;
            let b = g.constant(bias);
            logits = g.add_suffix(logits, b)?;
        }
        if let Some(mask) = mask {
            let mv = g.constant(mask.expand(heads));
            logits = g.add(logits, mv)?;
        }
        let attn = g.softmax_lastdim(logits);
        Ok(Tensor::clone(&g.value(attn)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_params;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn iota(h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, c], |i| i as f64)
    }

    /// Independent oracle: a token in the shifted frame at (i, j) came from
    /// ((i + s) mod H, (j + s) mod W); two tokens share a pre-shift region iff
    /// they agree on whether each coordinate wrapped around.
    fn oracle_mask(h: usize, w: usize, m: usize) -> Vec<f64> {
        let hp = h.div_ceil(m) * m;
        let wp = w.div_ceil(m) * m;
        let s = m / 2;
        let wrapped = |i: usize, j: usize| (i + s >= hp, j + s >= wp);
        let mut out = Vec::new();
        for wy in 0..hp / m {
            for wx in 0..wp / m {
                let toks: Vec<(usize, usize)> = (0..m * m).map(|t| (wy * m + t / m, wx * m + t % m)).collect();
                for &(ai, aj) in &toks {
                    for &(bi, bj) in &toks {
                        out.push(if wrapped(ai, aj) == wrapped(bi, bj) { 0.0 } else { MASK_NEG });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn partition_4x4_by_hand() {
        let x = iota(4, 4, 1);
        let p = window_partition(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4, 1]);
        assert_eq!(
            p.data(),
            &[0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.]
        );
    }

    #[test]
    fn single_window_partition_is_flatten() {
        let x = rand_tensor(&[3, 3, 2], 1);
        let p = window_partition(&x, 3).unwrap();
        assert_eq!(p.shape(), &[1, 9, 2]);
        assert_eq!(p.data(), x.data());
        assert!(window_partition(&x, 2).is_err());
    }

    #[test]
    fn cyclic_shift_identities() {
        let x = rand_tensor(&[4, 6, 2], 2);
        assert_eq!(cyclic_shift(&x, 0, 0).unwrap(), x);
        assert_eq!(cyclic_shift(&x, 4, 6).unwrap(), x);
        let s = cyclic_shift(&x, -1, -1).unwrap();
        assert_eq!(cyclic_shift(&s, 1, 1).unwrap(), x);
        assert_eq!(s.at(&[0, 0, 0]), x.at(&[1, 1, 0]));
    }

    proptest! {
        #[test]
        fn partition_round_trip(hm in 1usize..4, wm in 1usize..4, m in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
            let (h, w) = (hm * m, wm * m);
            let x = rand_tensor(&[h, w, c], seed);
            let back = window_reverse(&window_partition(&x, m).unwrap(), m, h, w).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn grid_maps_round_trip(h in 1usize..9, w in 1usize..9, m in 2usize..5, shifted in any::<bool>()) {
            let grid = WindowGrid::new(h, w, m, shifted).unwrap();
            let composed = layout::compose(&grid.reverse_map(2), &grid.forward_map(2));
            prop_assert_eq!(composed, (0..(h * w * 2) as u32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn shift_mask_4x4_window_2() {
        let mask = build_shift_mask(4, 4, 2).unwrap();
        assert_eq!(mask.num_windows, 4);
        // window 0 is the only one away from both wrap lines
        assert!((0..16).all(|k| mask.data[k] == 0.0));
        assert!((16..64).any(|k| mask.data[k] != 0.0));
        // bottom-right window: four distinct labels, only the diagonal is open
        let zeros: Vec<(usize, usize)> = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|&(i, j)| mask.at(3, i, j) == 0.0)
            .collect();
        assert_eq!(zeros, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(build_shift_mask(4, 4, 1).is_err());
    }

    #[test]
    fn shift_mask_matches_oracle() {
        for h in [4, 6, 8] {
            for w in [4, 6, 8] {
                for m in [2, 3] {
                    let mask = build_shift_mask(h, w, m).unwrap();
                    assert_eq!(mask.data, oracle_mask(h, w, m), "h={h} w={w} m={m}");
                    let n = m * m;
                    for win in 0..mask.num_windows {
                        for i in 0..n {
                            for j in 0..n {
                                assert_eq!(mask.at(win, i, j), mask.at(win, j, i));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_window_shift_mask_separates_regions() {
        let mask = build_shift_mask(4, 4, 4).unwrap();
        assert_eq!(mask.data, oracle_mask(4, 4, 4));
        // four regions of 2x2 tokens each: 16 rows with 4 open keys
        let open = mask.data.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(open, 16 * 4);
    }

    #[test]
    fn relative_index_is_a_bijection_on_offsets() {
        assert_eq!(relative_position_index(1), vec![0]);
        let idx = relative_position_index(2);
        let mut seen = std::collections::HashMap::new();
        for i in 0..4 {
            for j in 0..4 {
                let d = ((i / 2) as i32 - (j / 2) as i32, (i % 2) as i32 - (j % 2) as i32);
                let k = idx[i * 4 + j];
                if let Some(prev) = seen.insert(d, k) {
                    assert_eq!(prev, k, "same offset, same slot");
                }
            }
        }
        let mut slots: Vec<u32> = seen.values().copied().collect();
        slots.sort_unstable();
        assert_eq!(slots, (0..9).collect::<Vec<u32>>());
    }

    #[test]
    fn relative_bias_is_translation_consistent() {
        let table = rand_tensor(&[9, 2], 3);
        let b = relative_position_bias(2, 2, &table).unwrap();
        assert_eq!(b.shape(), &[2, 4, 4]);
        for h in 0..2 {
            // tokens (0,0)->(0,1) and (1,0)->(1,1) share offset (0,-1)
            assert_eq!(b.at(&[h, 0, 1]), b.at(&[h, 2, 3]));
            assert_eq!(b.at(&[h, 1, 0]), b.at(&[h, 3, 2]));
        }
        let single = relative_position_bias(1, 3, &rand_tensor(&[1, 3], 4)).unwrap();
        assert_eq!(single.shape(), &[3, 1, 1]);
    }

    fn attn_module(dim: usize, heads: usize, m: usize, seed: u64) -> (ParamStore<f64>, WindowAttention) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let attn = WindowAttention::new(&mut store, &mut init, "attn", dim, heads, m, true).unwrap();
        (store, attn)
    }

    #[test]
    fn zero_logits_give_uniform_average() {
        let (mut store, attn) = attn_module(2, 1, 2, 5);
        // q = k = 0, v = x
        let mut w = Tensor::zeros(&[2, 6]);
        w.set(&[0, 4], 1.0);
        w.set(&[1, 5], 1.0);
        store.set_value(attn.qkv.weight, w).unwrap();
        store.set_value(attn.rel_table.unwrap(), Tensor::zeros(&[9, 1])).unwrap();
        let mut p = Tensor::zeros(&[2, 2]);
        p.set(&[0, 0], 1.0);
        p.set(&[1, 1], 1.0);
        store.set_value(attn.proj.weight, p).unwrap();
        let x = rand_tensor(&[1, 4, 2], 6);
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let y = attn.forward(&g, &store, xv, None).unwrap();
        let y = g.value(y);
        for c in 0..2 {
            let mean: f64 = (0..4).map(|t| x.at(&[0, t, c])).sum::<f64>() / 4.0;
            for t in 0..4 {
                assert!((y.at(&[0, t, c]) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn masked_pairs_get_zero_weight_and_rows_sum_to_one() {
        let (store, attn) = attn_module(4, 2, 2, 7);
        let mask = build_shift_mask(4, 4, 2).unwrap();
        let x = rand_tensor(&[4, 4, 4], 8);
        let w = attn.attention_weights(&store, &x, Some(&mask)).unwrap();
        for win in 0..4 {
            for h in 0..2 {
                for i in 0..4 {
                    let row: Vec<f64> = (0..4).map(|j| w.at(&[win, h, i, j])).collect();
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for (j, &v) in row.iter().enumerate() {
                        if mask.at(win, i, j) != 0.0 {
                            assert!(v.abs() <= 1e-12, "masked weight {v}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shifted_attention_preserves_weights_between_region_mates() {
        // Two tokens adjacent in the original map that end up in one shifted
        // window keep the attention logit they would have on the plain torus.
        let (store, attn) = attn_module(4, 1, 2, 9);
        let (h, w, c) = (4, 4, 4);
        let x = rand_tensor(&[h, w, c], 10);
        let grid = WindowGrid::new(h, w, 2, true).unwrap();
        let xw = x.gather(&grid.forward_map(c), &[4, 4, c]).unwrap();
        let mask = attention_mask(&grid).unwrap().unwrap();
        let masked = attn.attention_weights(&store, &xw, Some(&mask)).unwrap();
        let plain = attn.attention_weights(&store, &xw, None).unwrap();
        // window 0 never touches the wrap boundary: identical with or without mask
        for i in 0..4 {
            for j in 0..4 {
                assert!((masked.at(&[0, 0, i, j]) - plain.at(&[0, 0, i, j])).abs() <= 1e-10);
            }
        }
        // in the corner window, surviving weights are the plain ones renormalised
        for i in 0..4 {
            let keep: Vec<usize> = (0..4).filter(|&j| mask.at(3, i, j) == 0.0).collect();
            let z: f64 = keep.iter().map(|&j| plain.at(&[3, 0, i, j])).sum();
            for &j in &keep {
                let expect = plain.at(&[3, 0, i, j]) / z;
                assert!((masked.at(&[3, 0, i, j]) - expect).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn padding_keys_are_masked() {
        let grid = WindowGrid::new(3, 3, 2, false).unwrap();
        let mask = attention_mask(&grid).unwrap().unwrap();
        assert_eq!(mask.num_windows, 4);
        // window 3 holds original (2,2) plus three padding tokens
        for i in 0..4 {
            assert_eq!(mask.at(3, i, 0), 0.0);
            for j in 1..4 {
                assert_eq!(mask.at(3, i, j), MASK_NEG);
            }
        }
        assert!(attention_mask(&WindowGrid::new(4, 4, 2, false).unwrap()).unwrap().is_none());
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(0);
        assert!(matches!(
            WindowAttention::new(&mut store, &mut init, "a", 6, 4, 2, true),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn window_mhsa_gradient_check() {
        let (store, attn) = attn_module(4, 2, 2, 11);
        let x = rand_tensor(&[2, 4, 4], 12);
        let mask = build_shift_mask(2, 4, 2).unwrap();
        let probe = rand_tensor(&[2, 4, 4], 13);
        let r = grad_check_params(
            &store,
            |g, s| {
                let xv = g.constant(x.clone());
                let y = attn.forward(g, s, xv, Some(&mask))?;
                let p = g.constant(probe.clone());
                let y = g.mul(y, p)?;
                Ok(g.sum(y))
            },
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let rx = crate::tensor::grad_check(
            |g, v| {
                let y = attn.forward(g, &store, v, Some(&mask))?;
                let p = g.constant(probe.clone());
                let y = g.mul(y, p)?;
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rx.max_rel_err < 1e-4, "{rx:?}");
    }
}
