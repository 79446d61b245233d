//! Per-patch histograms of oriented gradients.
//!
//! Gradients are taken inside each patch with edge clamping, so a patch's
//! descriptor depends only on its own pixels. Orientation is unsigned
//! (folded to [0, 180) degrees) and hard-binned with magnitude weights; each
//! of the 2x2 cells is L2-normalized on its own.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const HOG_BINS: usize = 9;
pub const HOG_CELLS: usize = 2;
pub const HOG_DIM: usize = HOG_BINS * HOG_CELLS * HOG_CELLS;
const CELL_EPS: f32 = 1e-6;
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Descriptor of one grayscale `p x p` patch (row-major), laid out as
/// `[cell_y][cell_x][bin]`.
pub fn hog_patch(gray: &[f32], p: usize) -> Vec<f32> {
    debug_assert_eq!(gray.len(), p * p);
    let cell = p / HOG_CELLS;
    let at = |y: usize, x: usize| gray[y * p + x];
    let mut hist = vec![0.0f32; HOG_DIM];
    for y in 0..p {
        for x in 0..p {
            let gx = at(y, (x + 1).min(p - 1)) - at(y, x.saturating_sub(1));
            let gy = at((y + 1).min(p - 1), x) - at(y.saturating_sub(1), x);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut deg = gy.atan2(gx).to_degrees();
            if deg < 0.0 {
                deg += 180.0;
            }
            let bin = ((deg / (180.0 / HOG_BINS as f32)) as usize) % HOG_BINS;
            let c = (y / cell) * HOG_CELLS + x / cell;
            hist[c * HOG_BINS + bin] += mag;
        }
    }
    for h in hist.chunks_mut(HOG_BINS) {
        let norm = (h.iter().map(|v| v * v).sum::<f32>() + CELL_EPS).sqrt();
        h.iter_mut().for_each(|v| *v /= norm);
    }
    hist
}

/// HOG targets `[B, N, HOG_DIM]` for `[B, C, H, W]` images (C = 1 or 3).
pub fn hog_target(images: &Tensor, patch_size: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || !(s[1] == 1 || s[1] == 3) {
        return Err(Error::Invalid(format!("HOG expects [B, 1|3, H, W] images, got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let p = patch_size;
    if p < HOG_CELLS || p % HOG_CELLS != 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Invalid(format!("HOG patch size {p} does not tile {h}x{w} into 2x2 cells")));
    }
    let plane = h * w;
    let data = images.data();
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(b * gh * gw * HOG_DIM);
    let mut gray = vec![0.0f32; p * p];
    for img in 0..b {
        let base = img * c * plane;
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    for x in 0..p {
                        let off = (py * p + y) * w + px * p + x;
                        gray[y * p + x] = if c == 1 {
                            data[base + off]
                        } else {
                            (0..3).map(|ch| LUMA[ch] * data[base + ch * plane + off]).sum()
                        };
                    }
                }
                out.extend(hog_patch(&gray, p));
            }
        }
    }
    Tensor::new(vec![b, gh * gw, HOG_DIM], out)
}
