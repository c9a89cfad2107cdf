//! Procedural stand-ins for stained tissue slides.
//!
//! Tissue is a blob of fractal noise over a near-white background. Normal
//! tissue shows pink stroma with sparse small nuclei; the planted tumor
//! texture is bluer with dense, large, dark nuclei. The tumor region is a
//! connected set of interior tissue cells.

use std::collections::VecDeque;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ingest::is_tissue;
use crate::tensor::{RngSeed, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub rows: usize,
    pub cols: usize,
    /// Cell edge in pixels (the I₂ patch size).
    pub cell: usize,
    pub tumor_fraction: f64,
    /// Approximate share of the slide covered by tissue.
    pub tissue_coverage: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { rows: 20, cols: 20, cell: 128, tumor_fraction: 0.05, tissue_coverage: 0.6 }
    }
}

pub struct SynthSlide {
    pub image: RgbImage,
    pub rows: usize,
    pub cols: usize,
    pub cell: usize,
    /// Per cell, row-major.
    pub tissue: Vec<bool>,
    pub tumor: Vec<bool>,
}

impl SynthSlide {
    pub fn label(&self) -> bool {
        self.tumor.iter().any(|&t| t)
    }

    pub fn tumor_share(&self) -> f64 {
        let t = self.tissue.iter().filter(|&&t| t).count();
        if t == 0 {
            return 0.0;
        }
        self.tumor.iter().filter(|&&t| t).count() as f64 / t as f64
    }
}

fn hash(seed: u64, x: i64, y: i64) -> f64 {
    let mut h = seed ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h = (h ^ (h >> 31)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 29)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 32;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise in [0, 1) with lattice spacing `period`.
fn value_noise(seed: u64, x: f64, y: f64, period: f64) -> f64 {
    let (fx, fy) = (x / period, y / period);
    let (ix, iy) = (fx.floor() as i64, fy.floor() as i64);
    let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
    let a = hash(seed, ix, iy) + (hash(seed, ix + 1, iy) - hash(seed, ix, iy)) * tx;
    let b = hash(seed, ix, iy + 1) + (hash(seed, ix + 1, iy + 1) - hash(seed, ix, iy + 1)) * tx;
    a + (b - a) * ty
}

/// Fractal sum of `octaves` value-noise layers, halving period and amplitude.
fn fbm(seed: u64, x: f64, y: f64, period: f64, octaves: usize) -> f64 {
    let (mut sum, mut amp, mut norm, mut p) = (0.0, 1.0, 0.0, period);
    for o in 0..octaves {
        sum += amp * value_noise(seed.wrapping_add(o as u64 * 7919), x, y, p);
        norm += amp;
        amp *= 0.5;
        p *= 0.5;
    }
    sum / norm
}

#[derive(Clone, Copy)]
struct Texture {
    stroma: [f64; 3],
    stroma_alt: [f64; 3],
    nucleus: [f64; 3],
    spacing: f64,
    radius: f64,
    density: f64,
}

const NORMAL: Texture = Texture {
    stroma: [0.93, 0.68, 0.80],
    stroma_alt: [0.84, 0.52, 0.70],
    nucleus: [0.45, 0.28, 0.60],
    spacing: 14.0,
    radius: 2.6,
    density: 0.45,
};

const TUMOR: Texture = Texture {
    stroma: [0.74, 0.58, 0.82],
    stroma_alt: [0.62, 0.45, 0.76],
    nucleus: [0.22, 0.10, 0.42],
    spacing: 9.0,
    radius: 3.6,
    density: 0.92,
};

/// Soft nucleus coverage in [0, 1] at a pixel from jittered lattice seeds.
fn nuclei(seed: u64, x: f64, y: f64, t: &Texture) -> f64 {
    let (gx, gy) = ((x / t.spacing).floor() as i64, (y / t.spacing).floor() as i64);
    let mut best: f64 = 0.0;
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (cx, cy) = (gx + dx, gy + dy);
            if hash(seed ^ 0x55, cx, cy) > t.density {
                continue;
            }
            let px = (cx as f64 + 0.15 + 0.7 * hash(seed ^ 0x11, cx, cy)) * t.spacing;
            let py = (cy as f64 + 0.15 + 0.7 * hash(seed ^ 0x22, cx, cy)) * t.spacing;
            let r = t.radius * (0.8 + 0.4 * hash(seed ^ 0x33, cx, cy));
            let d = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
            best = best.max(1.0 - smooth(((d - r) / 1.6 + 0.5).clamp(0.0, 1.0)));
        }
    }
    best
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn tissue_pixel(seed: u64, x: f64, y: f64, t: &Texture) -> [f64; 3] {
    let s = fbm(seed ^ 0xa1, x, y, 48.0, 4);
    let base = mix(t.stroma, t.stroma_alt, smooth(s.clamp(0.0, 1.0)));
    let fibre = 0.06 * (fbm(seed ^ 0xb2, x, y, 6.0, 2) - 0.5);
    let base = [base[0] + fibre, base[1] + fibre, base[2] + fibre * 0.5];
    mix(base, t.nucleus, nuclei(seed, x, y, t))
}

/// Loose fibrous tissue: pale, sparse elongated-looking small nuclei.
const FIBROUS: Texture = Texture {
    stroma: [0.97, 0.80, 0.86],
    stroma_alt: [0.90, 0.70, 0.80],
    nucleus: [0.55, 0.35, 0.62],
    spacing: 22.0,
    radius: 1.8,
    density: 0.3,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TissueKind {
    Normal,
    Tumor,
    Fibrous,
}

impl TissueKind {
    fn texture(self) -> Texture {
        match self {
            TissueKind::Normal => NORMAL,
            TissueKind::Tumor => TUMOR,
            TissueKind::Fibrous => FIBROUS,
        }
    }
}

const BACKGROUND: [f64; 3] = [0.96, 0.955, 0.965];

/// Renders a texture patch of either kind, `[3, size, size]` in [0, 1].
pub fn texture_patch(seed: RngSeed, size: usize, tumor: bool) -> Tensor<f32> {
    texture_patch_of(seed, size, if tumor { TissueKind::Tumor } else { TissueKind::Normal })
}

pub fn texture_patch_of(seed: RngSeed, size: usize, kind: TissueKind) -> Tensor<f32> {
    let t = kind.texture();
    let (ox, oy) = {
        let mut r = seed.rng();
        (r.random_range(0.0..4096.0f64).floor(), r.random_range(0.0..4096.0f64).floor())
    };
    let mut data = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let c = tissue_pixel(seed.0, ox + x as f64, oy + y as f64, &t);
            for (ch, v) in c.iter().enumerate() {
                data[ch * size * size + y * size + x] = quantize(*v) as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("shape matches")
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders one slide. Same seed and params give byte-identical pixels.
pub fn synth_slide(seed: RngSeed, p: &SynthParams) -> SynthSlide {
    let (rows, cols, cell) = (p.rows, p.cols, p.cell);
    let (h, w) = (rows * cell, cols * cell);
    let s = seed.0;
    let mut rng = seed.derive_str("synth-layout").rng();
    // tissue blob: low-frequency noise pulled toward the slide centre
    let blob_period = (h.max(w) as f64) / 2.5;
    let field = |x: f64, y: f64| {
        let (u, v) = (x / w as f64 - 0.5, y / h as f64 - 0.5);
        fbm(s ^ 0x7e, x, y, blob_period, 3) - 1.1 * (u * u + v * v)
    };
    // threshold that leaves roughly the requested coverage, from a coarse sample
    let mut sample: Vec<f64> = (0..64 * 64)
        .map(|i| field((i % 64) as f64 * w as f64 / 64.0, (i / 64) as f64 * h as f64 / 64.0))
        .collect();
    sample.sort_by(|a, b| a.total_cmp(b));
    let cut = sample[((1.0 - p.tissue_coverage.clamp(0.0, 1.0)) * (sample.len() - 1) as f64) as usize];

    // interior cells: tissue throughout (checked on a 5×5 probe lattice)
    let interior: Vec<bool> = (0..rows * cols)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            (0..25).all(|k| {
                let (px, py) = ((c * cell) as f64 + (k % 5) as f64 * (cell - 1) as f64 / 4.0, (r * cell) as f64 + (k / 5) as f64 * (cell - 1) as f64 / 4.0);
                field(px, py) > cut
            })
        })
        .collect();
    let candidates: Vec<usize> = (0..rows * cols).filter(|&i| interior[i]).collect();

    // render without tumor to find tissue cells, then repaint the planted cells
    let paint = |img: &mut RgbImage, y0: usize, x0: usize, ys: usize, xs: usize, t: &Texture| {
        for y in y0..y0 + ys {
            for x in x0..x0 + xs {
                let (fx, fy) = (x as f64, y as f64);
                let f = field(fx, fy);
                let rgb = if f > cut {
                    let c = tissue_pixel(s, fx, fy, t);
                    // thin out toward the blob edge
                    let edge = smooth(((f - cut) / 0.03).clamp(0.0, 1.0));
                    mix(BACKGROUND, c, edge)
                } else {
                    let n = 0.01 * (value_noise(s ^ 0x3c, fx, fy, 9.0) - 0.5);
                    [BACKGROUND[0] + n, BACKGROUND[1] + n, BACKGROUND[2] + n]
                };
                img.put_pixel(x as u32, y as u32, Rgb([quantize(rgb[0]), quantize(rgb[1]), quantize(rgb[2])]));
            }
        }
    };
    let mut image = RgbImage::new(w as u32, h as u32);
    paint(&mut image, 0, 0, h, w, &NORMAL);
    let tissue: Vec<bool> = (0..rows * cols)
        .map(|i| is_tissue(&image, (i / cols) * cell, (i % cols) * cell, cell))
        .collect();
    let n_tissue = tissue.iter().filter(|&&t| t).count();
    let want = (p.tumor_fraction.clamp(0.0, 1.0) * n_tissue as f64).round() as usize;
    let pool: Vec<usize> = candidates.into_iter().filter(|&i| tissue[i]).collect();
    let tumor = grow_region(&pool, rows, cols, want, &mut rng);
    for i in (0..rows * cols).filter(|&i| tumor[i]) {
        paint(&mut image, (i / cols) * cell, (i % cols) * cell, cell, cell, &TUMOR);
    }
    SynthSlide { image, rows, cols, cell, tissue, tumor }
}

/// Breadth-first growth from a random seed cell through 4-neighbours in
/// `pool`, restarting from a fresh seed if a component runs out.
fn grow_region(pool: &[usize], rows: usize, cols: usize, want: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut mask = vec![false; rows * cols];
    let allowed: std::collections::HashSet<usize> = pool.iter().copied().collect();
    let mut taken = 0;
    while taken < want.min(pool.len()) {
        let free: Vec<usize> = pool.iter().copied().filter(|&i| !mask[i]).collect();
        let start = free[rng.random_range(0..free.len())];
        let mut queue = VecDeque::from([start]);
        mask[start] = true;
        taken += 1;
        while let Some(i) = queue.pop_front() {
            if taken >= want {
                break;
            }
            let (r, c) = (i / cols, i % cols);
            let mut next = Vec::with_capacity(4);
            if r > 0 {
                next.push(i - cols);
            }
            if r + 1 < rows {
                next.push(i + cols);
            }
            if c > 0 {
                next.push(i - 1);
            }
            if c + 1 < cols {
                next.push(i + 1);
            }
            for j in next {
                if taken < want && allowed.contains(&j) && !mask[j] {
                    mask[j] = true;
                    taken += 1;
                    queue.push_back(j);
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthParams {
        SynthParams { rows: 10, cols: 10, cell: 32, tumor_fraction: 0.05, tissue_coverage: 0.6 }
    }

    #[test]
    fn same_seed_same_pixels() {
        let a = synth_slide(RngSeed(4), &small());
        let b = synth_slide(RngSeed(4), &small());
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.tumor, b.tumor);
        let c = synth_slide(RngSeed(5), &small());
        assert_ne!(a.image.as_raw(), c.image.as_raw());
    }

    #[test]
    fn zero_fraction_is_negative() {
        let s = synth_slide(RngSeed(1), &SynthParams { tumor_fraction: 0.0, ..small() });
        assert!(!s.label());
        assert!(s.tumor.iter().all(|&t| !t));
    }

    #[test]
    fn tumor_share_matches_request() {
        for seed in 0..6 {
            let s = synth_slide(RngSeed(seed), &SynthParams { rows: 16, cols: 16, ..small() });
            // oracle: direct count over the two cell masks
            let tissue = s.tissue.iter().filter(|&&t| t).count();
            let tumor = s.tumor.iter().zip(&s.tissue).filter(|(&m, &t)| m && t).count();
            assert_eq!(tumor, s.tumor.iter().filter(|&&m| m).count(), "tumor outside tissue");
            let share = tumor as f64 / tissue as f64;
            assert!((share - 0.05).abs() <= 0.01, "seed {}: {} of {}", seed, tumor, tissue);
            assert!(s.label());
        }
    }

    #[test]
    fn textures_differ_in_colour() {
        let n = texture_patch(RngSeed(0), 64, false);
        let t = texture_patch(RngSeed(0), 64, true);
        let mean = |p: &Tensor<f32>, c: usize| p.data()[c * 4096..(c + 1) * 4096].iter().sum::<f32>() / 4096.0;
        assert!(mean(&t, 0) < mean(&n, 0) - 0.1);
        assert!(n.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let f = texture_patch_of(RngSeed(0), 64, TissueKind::Fibrous);
        assert!(mean(&f, 1) > mean(&n, 1) + 0.05);
    }

    #[test]
    fn planted_cells_carry_the_tumor_palette() {
        let s = synth_slide(RngSeed(3), &SynthParams { rows: 16, cols: 16, ..small() });
        let red = |i: usize| {
            let (y0, x0) = ((i / s.cols) * s.cell, (i % s.cols) * s.cell);
            let mut t = 0.0;
            for y in y0..y0 + s.cell {
                for x in x0..x0 + s.cell {
                    t += s.image.get_pixel(x as u32, y as u32).0[0] as f64;
                }
            }
            t / (s.cell * s.cell) as f64
        };
        let tumor: Vec<usize> = (0..s.tumor.len()).filter(|&i| s.tumor[i]).collect();
        let normal: Vec<usize> = (0..s.tumor.len()).filter(|&i| s.tissue[i] && !s.tumor[i]).collect();
        let m = |v: &[usize]| v.iter().map(|&i| red(i)).sum::<f64>() / v.len() as f64;
        assert!(!tumor.is_empty());
        assert!(m(&tumor) < m(&normal) - 15.0, "{} vs {}", m(&tumor), m(&normal));
    }
}
