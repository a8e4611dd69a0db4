//! Deterministic synthetic corpus: smooth gradients, hard-edged shapes and
//! band-limited noise textures, with region labels kept alongside so mask
//! locality can be scored against known smooth/edge/texture pixels.

use crate::arr::Arr;
use crate::error::{RdcError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub const LABEL_SMOOTH: u8 = 0;
pub const LABEL_EDGE: u8 = 1;
pub const LABEL_TEXTURE: u8 = 2;

#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// [3,H,W] RGB in [0,1].
    pub image: Arr,
    /// Row-major per-pixel labels (H*W).
    pub labels: Vec<u8>,
}

impl LabeledImage {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape[1], self.image.shape[2])
    }

    /// Labels as a [1,H,W] graymap (smooth 0, edge 0.5, texture 1).
    pub fn label_map(&self) -> Arr {
        let (h, w) = self.size();
        let data = self.labels.iter().map(|&l| l as f64 / 2.0).collect();
        Arr::from_vec(&[1, h, w], data).unwrap()
    }
}

fn shape_fill(rng: &mut impl Rng, background: f64) -> [f64; 3] {
    // Contrast with the local background so the boundary is a real edge.
    let mut fill = [0.0; 3];
    for f in &mut fill {
        let away: f64 = rng.gen_range(0.3..0.6);
        *f = if background > 0.5 { (background - away).max(0.0) } else { (background + away).min(1.0) };
        *f += rng.gen_range(-0.05..0.05);
        *f = f.clamp(0.0, 1.0);
    }
    fill
}

fn box_blur(v: &mut Vec<f64>, h: usize, w: usize) {
    let src = v.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        acc += src[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
            }
            v[y * w + x] = acc / n;
        }
    }
}

fn gen_image(size: usize, rng: &mut impl Rng) -> LabeledImage {
    let (h, w) = (size, size);
    let mut img = vec![0.0; 3 * h * w];
    let mut labels = vec![LABEL_SMOOTH; h * w];

    // Smooth gradient background.
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (cy, cx) = (theta.sin(), theta.cos());
    let mut mean_bg = 0.0;
    for c in 0..3 {
        let base: f64 = rng.gen_range(0.25..0.75);
        let amp: f64 = rng.gen_range(0.08..0.22) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        mean_bg += base / 3.0;
        for y in 0..h {
            for x in 0..w {
                let u = (y as f64 / h as f64 - 0.5) * cy + (x as f64 / w as f64 - 0.5) * cx;
                img[(c * h + y) * w + x] = (base + amp * u).clamp(0.0, 1.0);
            }
        }
    }

    // Hard-edged shapes: filled rectangles and discs.
    let mut inside = vec![false; h * w];
    let n_shapes = rng.gen_range(2..=4);
    for _ in 0..n_shapes {
        let fill = shape_fill(rng, mean_bg);
        inside.iter_mut().for_each(|b| *b = false);
        if rng.gen_bool(0.5) {
            let sh = rng.gen_range(h / 8..h / 3);
            let sw = rng.gen_range(w / 8..w / 3);
            let y0 = rng.gen_range(0..h - sh);
            let x0 = rng.gen_range(0..w - sw);
            for y in y0..y0 + sh {
                for x in x0..x0 + sw {
                    inside[y * w + x] = true;
                }
            }
        } else {
            let r = rng.gen_range(h / 10..h / 5) as f64;
            let yc = rng.gen_range(0..h) as f64;
            let xc = rng.gen_range(0..w) as f64;
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 - yc, x as f64 - xc);
                    if dy * dy + dx * dx <= r * r {
                        inside[y * w + x] = true;
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                if inside[y * w + x] {
                    for c in 0..3 {
                        img[(c * h + y) * w + x] = fill[c];
                    }
                }
            }
        }
        // Edge band: one-pixel dilation of the boundary on both sides.
        for y in 0..h {
            for x in 0..w {
                let here = inside[y * w + x];
                let mut boundary = false;
                for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        if inside[yy as usize * w + xx as usize] != here {
                            boundary = true;
                        }
                    }
                }
                if boundary {
                    labels[y * w + x] = LABEL_EDGE;
                } else if here && labels[y * w + x] == LABEL_EDGE {
                    labels[y * w + x] = LABEL_SMOOTH;
                }
            }
        }
    }

    // Band-limited noise texture patches.
    let n_tex = rng.gen_range(1..=2);
    for _ in 0..n_tex {
        let sh = rng.gen_range(h / 6..h / 3);
        let sw = rng.gen_range(w / 6..w / 3);
        let y0 = rng.gen_range(0..h - sh);
        let x0 = rng.gen_range(0..w - sw);
        let mut noise: Vec<f64> = (0..sh * sw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        box_blur(&mut noise, sh, sw);
        box_blur(&mut noise, sh, sw);
        let amp: f64 = rng.gen_range(0.25..0.45);
        for y in 0..sh {
            for x in 0..sw {
                let (py, px) = (y0 + y, x0 + x);
                for c in 0..3 {
                    let idx = (c * h + py) * w + px;
                    img[idx] = (img[idx] + amp * noise[y * sw + x]).clamp(0.0, 1.0);
                }
                labels[py * w + px] = LABEL_TEXTURE;
            }
        }
    }

    LabeledImage {
        image: Arr::from_vec(&[3, h, w], img).unwrap(),
        labels,
    }
}

/// Deterministic corpus of `n` images, `size` x `size` each.
pub fn gen_corpus(n: usize, size: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if size % 16 != 0 {
        return Err(RdcError::InvalidArgument(format!(
            "corpus image size must be a multiple of 16, got {size}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| gen_image(size, &mut rng)).collect())
}

/// Mean luminance-gradient magnitude per pixel label, for the edge-vs-smooth
/// construction check.
pub fn gradient_by_label(img: &LabeledImage) -> [f64; 3] {
    let (h, w) = img.size();
    let lum = |y: usize, x: usize| {
        (0..3).map(|c| img.image.data[(c * h + y) * w + x]).sum::<f64>() / 3.0
    };
    let mut sums = [0.0; 3];
    let mut counts = [0.0; 3];
    for y in 0..h {
        for x in 0..w {
            let gy = if y + 1 < h { lum(y + 1, x) - lum(y, x) } else { 0.0 };
            let gx = if x + 1 < w { lum(y, x + 1) - lum(y, x) } else { 0.0 };
            let g = (gy * gy + gx * gx).sqrt();
            let l = img.labels[y * w + x] as usize;
            sums[l] += g;
            counts[l] += 1.0;
        }
    }
    [0, 1, 2].map(|l| if counts[l] > 0.0 { sums[l] / counts[l] } else { 0.0 })
}
