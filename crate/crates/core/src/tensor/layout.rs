//! Index maps for pure data-movement operations.
//!
//! Every map lists, for each output element in row-major order, the flat
//! index of the input element it copies. [`ZERO`] marks padding. Maps compose
//! with [`compose`], so a pad + shift + partition sequence is a single gather.

/// Sentinel source index meaning "write zero".
pub const ZERO: u32 = u32::MAX;

/// `outer` reads from the output of `inner`; the result reads directly from
/// `inner`'s source.
pub fn compose(outer: &[u32], inner: &[u32]) -> Vec<u32> {
    outer
        .iter()
        .map(|&i| if i == ZERO { ZERO } else { inner[i as usize] })
        .collect()
}

/// Axis permutation: output axis `k` is input axis `axes[k]`.
pub fn permute(shape: &[usize], axes: &[usize]) -> (Vec<u32>, Vec<usize>) {
    assert_eq!(shape.len(), axes.len());
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        let src: usize = (0..rank).map(|k| idx[k] * in_strides[axes[k]]).sum();
        map.push(src as u32);
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    (map, out_shape)
}

/// Zero-pads an `[h, w, c]` map at the bottom/right to `[hp, wp, c]`.
pub fn pad_hw(h: usize, w: usize, c: usize, hp: usize, wp: usize) -> Vec<u32> {
    let mut map = Vec::with_capacity(hp * wp * c);
    for i in 0..hp {
        for j in 0..wp {
            for ch in 0..c {
                if i < h && j < w {
                    map.push(((i * w + j) * c + ch) as u32);
                } else {
                    map.push(ZERO);
                }
            }
        }
    }
    map
}

/// Crops `[hp, wp, c]` to its top-left `[h, w, c]`.
pub fn crop_hw(hp: usize, wp: usize, c: usize, h: usize, w: usize) -> Vec<u32> {
    debug_assert!(h <= hp && w <= wp);
    let mut map = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                map.push(((i * wp + j) * c + ch) as u32);
            }
        }
    }
    map
}

/// Torus roll of an `[h, w, c]` map: `out[i, j] = x[(i - dy) mod h, (j - dx) mod w]`.
pub fn cyclic_shift(h: usize, w: usize, c: usize, dy: isize, dx: isize) -> Vec<u32> {
    let mut map = Vec::with_capacity(h * w * c);
    for i in 0..h {
        let si = (i as isize - dy).rem_euclid(h as isize) as usize;
        for j in 0..w {
            let sj = (j as isize - dx).rem_euclid(w as isize) as usize;
            for ch in 0..c {
                map.push(((si * w + sj) * c + ch) as u32);
            }
        }
    }
    map
}

/// `[h, w, c]` to `[(h/m)*(w/m), m*m, c]`, windows and tokens in row-major order.
pub fn window_partition(h: usize, w: usize, c: usize, m: usize) -> Vec<u32> {
    debug_assert!(h.is_multiple_of(m) && w.is_multiple_of(m));
    let mut map = Vec::with_capacity(h * w * c);
    for wy in 0..h / m {
        for wx in 0..w / m {
            for ty in 0..m {
                for tx in 0..m {
                    let (i, j) = (wy * m + ty, wx * m + tx);
                    for ch in 0..c {
                        map.push(((i * w + j) * c + ch) as u32);
                    }
                }
            }
        }
    }
    map
}

/// Inverse of [`window_partition`].
pub fn window_reverse(h: usize, w: usize, c: usize, m: usize) -> Vec<u32> {
    debug_assert!(h.is_multiple_of(m) && w.is_multiple_of(m));
    let wins_x = w / m;
    let mut map = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let win = (i / m) * wins_x + j / m;
            let tok = (i % m) * m + j % m;
            for ch in 0..c {
                map.push((((win * m * m) + tok) * c + ch) as u32);
            }
        }
    }
    map
}

/// `[h, w, c]` (h, w even) to `[h/2, w/2, 4c]` with the 2x2 neighbourhood
/// concatenated in the order (0,0), (0,1), (1,0), (1,1).
pub fn merge_2x2(h: usize, w: usize, c: usize) -> Vec<u32> {
    debug_assert!(h.is_multiple_of(2) && w.is_multiple_of(2));
    let mut map = Vec::with_capacity(h * w * c);
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let (si, sj) = (2 * i + a, 2 * j + b);
                for ch in 0..c {
                    map.push(((si * w + sj) * c + ch) as u32);
                }
            }
        }
    }
    map
}

/// Sub-pixel shuffle with stride 2: `[h, w, 4c]` to `[2h, 2w, c]`, where
/// channel `q*c + ch` at `(i, j)` lands on `(2i + q/2, 2j + q%2)`.
pub fn pixel_shuffle_2x(h: usize, w: usize, c4: usize) -> Vec<u32> {
    debug_assert!(c4.is_multiple_of(4));
    let c = c4 / 4;
    let (ho, wo) = (2 * h, 2 * w);
    let mut map = Vec::with_capacity(ho * wo * c);
    for oi in 0..ho {
        for oj in 0..wo {
            let (i, j) = (oi / 2, oj / 2);
            let q = (oi % 2) * 2 + oj % 2;
            for ch in 0..c {
                map.push(((i * w + j) * c4 + q * c + ch) as u32);
            }
        }
    }
    map
}
