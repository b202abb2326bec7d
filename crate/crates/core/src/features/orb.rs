//! ORB-style keypoints: FAST-9 corners ranked by Harris response over an
//! image pyramid, intensity-centroid orientation and steered BRIEF bits.

use std::f64::consts::TAU;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FORMAT_VERSION;
use super::{check_extract_args, select_top, Descriptors, ExtractorKind, FeatureSet, Keypoint};
use crate::error::{Error, Result};
use crate::imgproc::{resize, EdgeMap, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbConfig {
    pub levels: usize,
    pub scale_factor: f64,
    pub fast_threshold: u8,
    pub harris_k: f64,
}

impl Default for OrbConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            scale_factor: 1.2,
            fast_threshold: 20,
            harris_k: 0.04,
        }
    }
}

const PATCH_RADIUS: i64 = 15;
const BORDER: i64 = PATCH_RADIUS + 4;
const HARRIS_BLOCK: i64 = 3;
const FAST_RADIUS: f64 = 3.0;

/// Bresenham circle of radius 3, clockwise from 12 o'clock.
const CIRCLE: [(i64, i64); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

type PointPair = ((f64, f64), (f64, f64));

/// 256 point pairs drawn once from an isotropic Gaussian and clamped to the
/// patch disc, so any rotation of the pattern stays inside the patch.
fn brief_pattern() -> &'static [PointPair; 256] {
    static PATTERN: OnceLock<[PointPair; 256]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0b5e_55ed_b41e_f000);
        let sigma = (2.0 * PATCH_RADIUS as f64 + 1.0) / 5.0;
        let limit = PATCH_RADIUS as f64 - 1.0;
        let point = |rng: &mut ChaCha8Rng| loop {
            // Box-Muller
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random();
            let r = (-2.0 * u1.ln()).sqrt() * sigma;
            let (s, c) = (TAU * u2).sin_cos();
            let (x, y) = (r * c, r * s);
            if x * x + y * y <= limit * limit {
                return (x, y);
            }
        };
        let mut out = [((0.0, 0.0), (0.0, 0.0)); 256];
        for pair in out.iter_mut() {
            loop {
                let a = point(&mut rng);
                let b = point(&mut rng);
                if (a.0 - b.0).abs() + (a.1 - b.1).abs() >= 1.0 {
                    *pair = (a, b);
                    break;
                }
            }
        }
        out
    })
}

struct Level {
    img: GrayImage,
    smoothed: Vec<f32>,
    /// Level-to-input scale per axis.
    sx: f64,
    sy: f64,
}

#[inline]
fn px(img: &GrayImage, x: i64, y: i64) -> i32 {
    img.get(x as u32, y as u32) as i32
}

/// FAST-9 score: the largest threshold at which the pixel is still a corner,
/// or 0 when it is not one at `threshold`.
fn fast_score(img: &GrayImage, x: i64, y: i64, threshold: i32) -> i32 {
    let c = px(img, x, y);
    let mut ring = [0i32; 16];
    for (k, (dx, dy)) in CIRCLE.iter().enumerate() {
        ring[k] = px(img, x + dx, y + dy) - c;
    }
    // quick reject on the compass points
    let compass = [ring[0], ring[4], ring[8], ring[12]];
    let bright = compass.iter().filter(|&&d| d > threshold).count();
    let dark = compass.iter().filter(|&&d| d < -threshold).count();
    if bright < 2 && dark < 2 {
        return 0;
    }
    let mut best = 0;
    for start in 0..16 {
        let mut min_b = i32::MAX;
        let mut min_d = i32::MAX;
        for k in 0..9 {
            let d = ring[(start + k) % 16];
            min_b = min_b.min(d);
            min_d = min_d.min(-d);
        }
        best = best.max(min_b).max(min_d);
    }
    if best > threshold {
        best
    } else {
        0
    }
}

fn harris_response(img: &GrayImage, x: i64, y: i64, k: f64) -> f64 {
    let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
    for yy in y - HARRIS_BLOCK..=y + HARRIS_BLOCK {
        for xx in x - HARRIS_BLOCK..=x + HARRIS_BLOCK {
            let gx = (px(img, xx + 1, yy - 1) + 2 * px(img, xx + 1, yy) + px(img, xx + 1, yy + 1))
                - (px(img, xx - 1, yy - 1) + 2 * px(img, xx - 1, yy) + px(img, xx - 1, yy + 1));
            let gy = (px(img, xx - 1, yy + 1) + 2 * px(img, xx, yy + 1) + px(img, xx + 1, yy + 1))
                - (px(img, xx - 1, yy - 1) + 2 * px(img, xx, yy - 1) + px(img, xx + 1, yy - 1));
            let (gx, gy) = (gx as f64, gy as f64);
            a += gx * gx;
            b += gy * gy;
            c += gx * gy;
        }
    }
    // scale the Sobel sums to roughly unit-range intensities
    let norm = 1.0 / (4.0 * 255.0 * (2 * HARRIS_BLOCK + 1) as f64).powi(2);
    let (a, b, c) = (a * norm, b * norm, c * norm);
    a * b - c * c - k * (a + b) * (a + b)
}

fn intensity_centroid_angle(img: &GrayImage, x: i64, y: i64) -> f64 {
    let (mut m01, mut m10) = (0i64, 0i64);
    let r2 = PATCH_RADIUS * PATCH_RADIUS;
    for dy in -PATCH_RADIUS..=PATCH_RADIUS {
        for dx in -PATCH_RADIUS..=PATCH_RADIUS {
            if dx * dx + dy * dy > r2 {
                continue;
            }
            let v = px(img, x + dx, y + dy) as i64;
            m10 += dx * v;
            m01 += dy * v;
        }
    }
    let mut a = (m01 as f64).atan2(m10 as f64);
    if a < 0.0 {
        a += TAU;
    }
    if a >= TAU {
        a = 0.0;
    }
    a
}

fn smooth(img: &GrayImage) -> Vec<f32> {
    // 5x5 binomial, close to the usual sigma=2 pre-blur
    const K: [f32; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
    let w = img.width() as i64;
    let h = img.height() as i64;
    let mut tmp = vec![0f32; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, kv) in K.iter().enumerate() {
                let xx = (x + k as i64 - 2).clamp(0, w - 1);
                s += kv * px(img, xx, y) as f32;
            }
            tmp[(y * w + x) as usize] = s / 16.0;
        }
    }
    let mut out = vec![0f32; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, kv) in K.iter().enumerate() {
                let yy = (y + k as i64 - 2).clamp(0, h - 1);
                s += kv * tmp[(yy * w + x) as usize];
            }
            out[(y * w + x) as usize] = s / 16.0;
        }
    }
    out
}

fn brief(level: &Level, x: i64, y: i64, angle: f64) -> [u64; 4] {
    let w = level.img.width() as i64;
    let (s, c) = angle.sin_cos();
    let sample = |(px_, py_): (f64, f64)| -> f32 {
        let rx = (c * px_ - s * py_).round() as i64;
        let ry = (s * px_ + c * py_).round() as i64;
        level.smoothed[((y + ry) * w + (x + rx)) as usize]
    };
    let mut bits = [0u64; 4];
    for (i, &(a, b)) in brief_pattern().iter().enumerate() {
        if sample(a) < sample(b) {
            bits[i / 64] |= 1u64 << (i % 64);
        }
    }
    bits
}

struct Candidate {
    kp: Keypoint,
    level: usize,
    lx: i64,
    ly: i64,
}

pub fn extract_orb(img: &GrayImage, cap: usize, edges: &EdgeMap) -> Result<FeatureSet> {
    extract_orb_with(img, cap, edges, &OrbConfig::default())
}

pub fn extract_orb_with(img: &GrayImage, cap: usize, edges: &EdgeMap, cfg: &OrbConfig) -> Result<FeatureSet> {
    check_extract_args(img, cap, edges)?;
    let min_level_dim = (2 * BORDER + 2) as u32;
    if img.width() < min_level_dim || img.height() < min_level_dim {
        return Err(Error::ExtractionFailed(format!(
            "{}x{} is too small for a single pyramid level",
            img.width(),
            img.height()
        )));
    }

    let mut levels = Vec::new();
    for l in 0..cfg.levels {
        let f = cfg.scale_factor.powi(l as i32);
        let w = (img.width() as f64 / f).round() as u32;
        let h = (img.height() as f64 / f).round() as u32;
        if w < min_level_dim || h < min_level_dim {
            break;
        }
        let limg = if l == 0 { img.clone() } else { resize(img, (w, h))? };
        let smoothed = smooth(&limg);
        levels.push(Level {
            sx: img.width() as f64 / w as f64,
            sy: img.height() as f64 / h as f64,
            img: limg,
            smoothed,
        });
    }

    let threshold = cfg.fast_threshold as i32;
    let mut candidates = Vec::new();
    for (li, level) in levels.iter().enumerate() {
        let w = level.img.width() as i64;
        let h = level.img.height() as i64;
        let mut scores = vec![0i32; (w * h) as usize];
        for y in BORDER - 1..h - BORDER + 1 {
            for x in BORDER - 1..w - BORDER + 1 {
                scores[(y * w + x) as usize] = fast_score(&level.img, x, y, threshold);
            }
        }
        for y in BORDER..h - BORDER {
            for x in BORDER..w - BORDER {
                let s = scores[(y * w + x) as usize];
                if s == 0 {
                    continue;
                }
                let mut is_max = true;
                'nms: for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let o = scores[((y + dy) * w + x + dx) as usize];
                        // ties resolved toward the earlier raster position
                        if o > s || (o == s && (dy < 0 || (dy == 0 && dx < 0))) {
                            is_max = false;
                            break 'nms;
                        }
                    }
                }
                if !is_max {
                    continue;
                }
                let response = harris_response(&level.img, x, y, cfg.harris_k);
                if response <= 0.0 {
                    continue;
                }
                let kp = Keypoint {
                    x: (x as f64 + 0.5) * level.sx - 0.5,
                    y: (y as f64 + 0.5) * level.sy - 0.5,
                    scale: FAST_RADIUS * (level.sx * level.sy).sqrt(),
                    orientation: 0.0,
                    response,
                    edge_dist: u8::MAX,
                }
                .quantized();
                candidates.push(Candidate {
                    kp,
                    level: li,
                    lx: x,
                    ly: y,
                });
            }
        }
    }

    select_top(&mut candidates, cap, |c| &c.kp);

    let mut keypoints = Vec::with_capacity(candidates.len());
    let mut descriptors = Vec::with_capacity(candidates.len());
    for c in candidates {
        let level = &levels[c.level];
        let angle = intensity_centroid_angle(&level.img, c.lx, c.ly);
        let mut kp = c.kp;
        kp.orientation = angle as f32 as f64;
        kp.edge_dist = edges.dist_at(kp.x as f32, kp.y as f32);
        keypoints.push(kp);
        descriptors.push(brief(level, c.lx, c.ly, angle));
    }

    Ok(FeatureSet {
        keypoints,
        descriptors: Descriptors::Binary256(descriptors),
        source_dims: img.dims(),
        extractor: ExtractorKind::Orb,
        version: FORMAT_VERSION,
    })
}
