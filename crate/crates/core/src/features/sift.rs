//! SIFT-style keypoints: difference-of-Gaussian extrema with sub-pixel
//! refinement, gradient-histogram orientation and 4x4x8 descriptors.
//!
//! The input is not upsampled, so octave 0 has the input resolution and
//! keypoint coordinates come out in the input frame directly.

use std::f32::consts::TAU;

use nalgebra::{Matrix3, Vector3};

use super::{canonical_order, check_extract_args, Descriptors, ExtractorKind, FeatureSet, Keypoint};
use super::{FLOAT_DESCRIPTOR_LEN, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::imgproc::{EdgeMap, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiftConfig {
    pub scales_per_octave: usize,
    pub sigma: f32,
    /// Blur already present in the input.
    pub input_sigma: f32,
    pub contrast_threshold: f32,
    /// Maximum ratio of principal curvatures.
    pub edge_threshold: f32,
}

impl Default for SiftConfig {
    fn default() -> Self {
        Self {
            scales_per_octave: 3,
            sigma: 1.6,
            input_sigma: 0.5,
            contrast_threshold: 0.04,
            edge_threshold: 10.0,
        }
    }
}

const IMG_BORDER: usize = 5;
const MAX_INTERP_STEPS: usize = 5;
const ORI_HIST_BINS: usize = 36;
const ORI_SIG_FCTR: f32 = 1.5;
const ORI_RADIUS: f32 = 3.0 * ORI_SIG_FCTR;
const ORI_PEAK_RATIO: f32 = 0.8;
const DESCR_WIDTH: usize = 4;
const DESCR_HIST_BINS: usize = 8;
const DESCR_SCL_FCTR: f32 = 3.0;
const DESCR_MAG_THR: f32 = 0.2;

#[derive(Clone)]
pub(crate) struct Plane {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    fn downsample(&self) -> Plane {
        let w = self.w / 2;
        let h = self.h / 2;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            let row = &self.data[2 * y * self.w..];
            for x in 0..w {
                data.push(row[2 * x]);
            }
        }
        Plane { w, h, data }
    }
}

fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let mut k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with reflect-101 borders.
pub(crate) fn gaussian_blur(src: &Plane, sigma: f32) -> Plane {
    let k = gaussian_kernel(sigma);
    let r = k.len() / 2;
    let (w, h) = (src.w, src.h);

    let mut tmp = vec![0f32; w * h];
    let mut padded = vec![0f32; w + 2 * r];
    for y in 0..h {
        let row = &src.data[y * w..(y + 1) * w];
        for (i, p) in padded.iter_mut().enumerate() {
            *p = row[reflect101(i as isize - r as isize, w)];
        }
        let out = &mut tmp[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            let win = &padded[x..x + k.len()];
            *o = win.iter().zip(&k).map(|(a, b)| a * b).sum();
        }
    }

    let mut data = vec![0f32; w * h];
    for y in 0..h {
        let out = &mut data[y * w..(y + 1) * w];
        for (ki, &kv) in k.iter().enumerate() {
            let sy = reflect101(y as isize + ki as isize - r as isize, h);
            let row = &tmp[sy * w..(sy + 1) * w];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += kv * v;
            }
        }
    }
    Plane { w, h, data }
}

struct Octave {
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

fn build_pyramid(img: &GrayImage, cfg: &SiftConfig, n_octaves: usize) -> Vec<Octave> {
    let s = cfg.scales_per_octave;
    let base = Plane {
        w: img.width() as usize,
        h: img.height() as usize,
        data: img.to_f32(),
    };
    let init = (cfg.sigma * cfg.sigma - cfg.input_sigma * cfg.input_sigma)
        .max(0.01)
        .sqrt();
    let mut next_base = gaussian_blur(&base, init);

    let k = 2f32.powf(1.0 / s as f32);
    let increments: Vec<f32> = (1..s + 3)
        .map(|i| {
            let prev = cfg.sigma * k.powi(i as i32 - 1);
            let total = prev * k;
            (total * total - prev * prev).sqrt()
        })
        .collect();

    let mut octaves = Vec::with_capacity(n_octaves);
    for o in 0..n_octaves {
        let first = if o == 0 {
            next_base.clone()
        } else {
            next_base.downsample()
        };
        let mut gauss = Vec::with_capacity(s + 3);
        gauss.push(first);
        for &inc in &increments {
            let blurred = gaussian_blur(gauss.last().unwrap(), inc);
            gauss.push(blurred);
        }
        next_base = gauss[s].clone();
        let dog = gauss
            .windows(2)
            .map(|pair| Plane {
                w: pair[0].w,
                h: pair[0].h,
                data: pair[1].data.iter().zip(&pair[0].data).map(|(a, b)| a - b).collect(),
            })
            .collect();
        octaves.push(Octave { gauss, dog });
    }
    octaves
}

/// Refined extremum in octave coordinates.
#[derive(Debug, Clone, Copy)]
struct Extremum {
    octave: usize,
    layer: usize,
    /// Octave-frame sub-pixel position.
    x: f32,
    y: f32,
    /// Layer offset from sub-pixel refinement.
    layer_offset: f32,
    response: f32,
}

fn is_local_extremum(dog: &[Plane], layer: usize, x: usize, y: usize, val: f32) -> bool {
    let w = dog[layer].w;
    for plane in &dog[layer - 1..=layer + 1] {
        let d = &plane.data;
        for yy in y - 1..=y + 1 {
            let row = &d[yy * w + x - 1..yy * w + x + 2];
            for &v in row {
                if val > 0.0 {
                    if v > val {
                        return false;
                    }
                } else if v < val {
                    return false;
                }
            }
        }
    }
    true
}

fn refine(dog: &[Plane], octave: usize, layer0: usize, x0: usize, y0: usize, cfg: &SiftConfig) -> Option<Extremum> {
    let s = cfg.scales_per_octave;
    let (w, h) = (dog[0].w, dog[0].h);
    let (mut layer, mut x, mut y) = (layer0, x0, y0);
    let mut offset = Vector3::zeros();
    let mut grad = Vector3::zeros();
    let mut converged = false;

    for _ in 0..MAX_INTERP_STEPS {
        let (prev, cur, next) = (&dog[layer - 1], &dog[layer], &dog[layer + 1]);
        let v2 = cur.at(x, y) * 2.0;
        let dx = (cur.at(x + 1, y) - cur.at(x - 1, y)) * 0.5;
        let dy = (cur.at(x, y + 1) - cur.at(x, y - 1)) * 0.5;
        let ds = (next.at(x, y) - prev.at(x, y)) * 0.5;
        let dxx = cur.at(x + 1, y) + cur.at(x - 1, y) - v2;
        let dyy = cur.at(x, y + 1) + cur.at(x, y - 1) - v2;
        let dss = next.at(x, y) + prev.at(x, y) - v2;
        let dxy = (cur.at(x + 1, y + 1) - cur.at(x - 1, y + 1) - cur.at(x + 1, y - 1) + cur.at(x - 1, y - 1)) * 0.25;
        let dxs = (next.at(x + 1, y) - next.at(x - 1, y) - prev.at(x + 1, y) + prev.at(x - 1, y)) * 0.25;
        let dys = (next.at(x, y + 1) - next.at(x, y - 1) - prev.at(x, y + 1) + prev.at(x, y - 1)) * 0.25;

        let hess = Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        grad = Vector3::new(dx, dy, ds);
        offset = -hess.lu().solve(&grad)?;

        if offset.iter().all(|v| v.abs() < 0.5) {
            converged = true;
            break;
        }
        if offset.iter().any(|v| !v.is_finite() || v.abs() > 1e6) {
            return None;
        }
        let nx = x as i64 + offset[0].round() as i64;
        let ny = y as i64 + offset[1].round() as i64;
        let nl = layer as i64 + offset[2].round() as i64;
        if nl < 1
            || nl > s as i64
            || nx < IMG_BORDER as i64
            || nx >= (w - IMG_BORDER) as i64
            || ny < IMG_BORDER as i64
            || ny >= (h - IMG_BORDER) as i64
        {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        layer = nl as usize;
    }
    if !converged {
        return None;
    }

    let cur = &dog[layer];
    let contrast = cur.at(x, y) + 0.5 * grad.dot(&offset);
    if contrast.abs() * (s as f32) < cfg.contrast_threshold {
        return None;
    }

    let v2 = cur.at(x, y) * 2.0;
    let dxx = cur.at(x + 1, y) + cur.at(x - 1, y) - v2;
    let dyy = cur.at(x, y + 1) + cur.at(x, y - 1) - v2;
    let dxy = (cur.at(x + 1, y + 1) - cur.at(x - 1, y + 1) - cur.at(x + 1, y - 1) + cur.at(x - 1, y - 1)) * 0.25;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    let r = cfg.edge_threshold;
    if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
        return None;
    }

    Some(Extremum {
        octave,
        layer,
        x: x as f32 + offset[0],
        y: y as f32 + offset[1],
        layer_offset: offset[2],
        response: contrast.abs(),
    })
}

fn find_extrema(octaves: &[Octave], cfg: &SiftConfig) -> Vec<Extremum> {
    let s = cfg.scales_per_octave;
    let threshold = 0.5 * cfg.contrast_threshold / s as f32;
    let mut out = Vec::new();
    for (o, oct) in octaves.iter().enumerate() {
        let (w, h) = (oct.dog[0].w, oct.dog[0].h);
        if w <= 2 * IMG_BORDER + 1 || h <= 2 * IMG_BORDER + 1 {
            continue;
        }
        for layer in 1..=s {
            let cur = &oct.dog[layer];
            for y in IMG_BORDER..h - IMG_BORDER {
                for x in IMG_BORDER..w - IMG_BORDER {
                    let val = cur.data[y * w + x];
                    if val.abs() <= threshold || !is_local_extremum(&oct.dog, layer, x, y, val) {
                        continue;
                    }
                    if let Some(e) = refine(&oct.dog, o, layer, x, y, cfg) {
                        out.push(e);
                    }
                }
            }
        }
    }
    out
}

/// Gradient with `dy` pointing down the image.
#[inline]
fn gradient(img: &Plane, x: usize, y: usize) -> (f32, f32) {
    (img.at(x + 1, y) - img.at(x - 1, y), img.at(x, y + 1) - img.at(x, y - 1))
}

fn orientation_histogram(img: &Plane, x: i64, y: i64, radius: i64, sigma: f32) -> [f32; ORI_HIST_BINS] {
    let mut hist = [0f32; ORI_HIST_BINS];
    let exp_scale = -1.0 / (2.0 * sigma * sigma);
    for i in -radius..=radius {
        let yy = y + i;
        if yy <= 0 || yy >= img.h as i64 - 1 {
            continue;
        }
        for j in -radius..=radius {
            let xx = x + j;
            if xx <= 0 || xx >= img.w as i64 - 1 {
                continue;
            }
            let (dx, dy) = gradient(img, xx as usize, yy as usize);
            let mag = (dx * dx + dy * dy).sqrt();
            let weight = ((i * i + j * j) as f32 * exp_scale).exp();
            let mut angle = dy.atan2(dx);
            if angle < 0.0 {
                angle += TAU;
            }
            let bin = ((angle * ORI_HIST_BINS as f32 / TAU).round() as usize) % ORI_HIST_BINS;
            hist[bin] += weight * mag;
        }
    }
    let n = ORI_HIST_BINS;
    let mut smooth = [0f32; ORI_HIST_BINS];
    for (i, s) in smooth.iter_mut().enumerate() {
        *s = (hist[(i + n - 2) % n] + hist[(i + 2) % n]) * (1.0 / 16.0)
            + (hist[(i + n - 1) % n] + hist[(i + 1) % n]) * (4.0 / 16.0)
            + hist[i] * (6.0 / 16.0);
    }
    smooth
}

fn dominant_orientations(hist: &[f32; ORI_HIST_BINS]) -> Vec<f32> {
    let n = ORI_HIST_BINS;
    let max = hist.iter().copied().fold(0f32, f32::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let thr = max * ORI_PEAK_RATIO;
    let mut out = Vec::new();
    for j in 0..n {
        let l = hist[(j + n - 1) % n];
        let r = hist[(j + 1) % n];
        let c = hist[j];
        if c > l && c > r && c >= thr {
            let denom = l - 2.0 * c + r;
            let delta = if denom != 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
            let mut bin = j as f32 + delta;
            if bin < 0.0 {
                bin += n as f32;
            } else if bin >= n as f32 {
                bin -= n as f32;
            }
            let mut angle = TAU * bin / n as f32;
            if angle >= TAU || (TAU - angle).abs() < 1e-6 {
                angle = 0.0;
            }
            out.push(angle);
        }
    }
    out
}

/// Clips a raw 128-bin histogram at 0.2 of its norm, then renormalizes.
/// Returns `(clipped, final)`; `None` if the histogram is all zero.
pub fn sift_normalize(raw: &[f32]) -> Option<(Vec<f32>, Vec<f32>)> {
    let norm = raw.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
    if norm <= f64::MIN_POSITIVE || !norm.is_finite() {
        return None;
    }
    let clipped: Vec<f32> = raw
        .iter()
        .map(|&v| ((v as f64 / norm) as f32).min(DESCR_MAG_THR))
        .collect();
    let norm2 = clipped.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
    if norm2 <= f64::MIN_POSITIVE {
        return None;
    }
    let fin = clipped.iter().map(|&v| (v as f64 / norm2) as f32).collect();
    Some((clipped, fin))
}

fn compute_descriptor(img: &Plane, x: f32, y: f32, ori: f32, scl: f32) -> Option<Vec<f32>> {
    let d = DESCR_WIDTH;
    let n = DESCR_HIST_BINS;
    let hist_width = DESCR_SCL_FCTR * scl;
    let max_radius = ((img.w * img.w + img.h * img.h) as f32).sqrt();
    let radius = (hist_width * std::f32::consts::SQRT_2 * (d as f32 + 1.0) * 0.5)
        .round()
        .min(max_radius) as i64;
    let cos_t = ori.cos() / hist_width;
    let sin_t = ori.sin() / hist_width;
    let bins_per_rad = n as f32 / TAU;
    let exp_scale = -1.0 / (d as f32 * d as f32 * 0.5);
    let xi = x.round() as i64;
    let yi = y.round() as i64;

    let stride_c = n + 2;
    let stride_r = (d + 2) * stride_c;
    let mut hist = vec![0f32; (d + 2) * stride_r];

    for i in -radius..=radius {
        let r = yi + i;
        if r <= 0 || r >= img.h as i64 - 1 {
            continue;
        }
        for j in -radius..=radius {
            let c = xi + j;
            if c <= 0 || c >= img.w as i64 - 1 {
                continue;
            }
            let (jf, if_) = (j as f32, i as f32);
            let c_rot = jf * cos_t + if_ * sin_t;
            let r_rot = -jf * sin_t + if_ * cos_t;
            let rbin = r_rot + d as f32 / 2.0 - 0.5;
            let cbin = c_rot + d as f32 / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= d as f32 || cbin <= -1.0 || cbin >= d as f32 {
                continue;
            }
            let (dx, dy) = gradient(img, c as usize, r as usize);
            let mag = (dx * dx + dy * dy).sqrt();
            let weight = ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp();
            let mut rel = dy.atan2(dx) - ori;
            while rel < 0.0 {
                rel += TAU;
            }
            while rel >= TAU {
                rel -= TAU;
            }
            let obin = rel * bins_per_rad;
            let v = mag * weight;

            let r0 = rbin.floor();
            let c0 = cbin.floor();
            let o0 = obin.floor();
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            let r0 = r0 as i64;
            let c0 = c0 as i64;
            let mut o0 = o0 as i64;
            if o0 < 0 {
                o0 += n as i64;
            }
            if o0 >= n as i64 {
                o0 -= n as i64;
            }

            let v_r1 = v * fr;
            let v_r0 = v - v_r1;
            let v_rc11 = v_r1 * fc;
            let v_rc10 = v_r1 - v_rc11;
            let v_rc01 = v_r0 * fc;
            let v_rc00 = v_r0 - v_rc01;
            let v_rco111 = v_rc11 * fo;
            let v_rco110 = v_rc11 - v_rco111;
            let v_rco101 = v_rc10 * fo;
            let v_rco100 = v_rc10 - v_rco101;
            let v_rco011 = v_rc01 * fo;
            let v_rco010 = v_rc01 - v_rco011;
            let v_rco001 = v_rc00 * fo;
            let v_rco000 = v_rc00 - v_rco001;

            let idx = ((r0 + 1) as usize * stride_r) + (c0 + 1) as usize * stride_c + o0 as usize;
            hist[idx] += v_rco000;
            hist[idx + 1] += v_rco001;
            hist[idx + stride_c] += v_rco010;
            hist[idx + stride_c + 1] += v_rco011;
            hist[idx + stride_r] += v_rco100;
            hist[idx + stride_r + 1] += v_rco101;
            hist[idx + stride_r + stride_c] += v_rco110;
            hist[idx + stride_r + stride_c + 1] += v_rco111;
        }
    }

    let mut raw = Vec::with_capacity(FLOAT_DESCRIPTOR_LEN);
    for r in 0..d {
        for c in 0..d {
            let idx = (r + 1) * stride_r + (c + 1) * stride_c;
            // fold the wrapped orientation bins
            hist[idx] += hist[idx + n];
            hist[idx + 1] += hist[idx + n + 1];
            for k in 0..n {
                raw.push(hist[idx + k]);
            }
        }
    }
    sift_normalize(&raw).map(|(_, fin)| fin)
}

struct Oriented {
    kp: Keypoint,
    ext: Extremum,
    orientation: f32,
}

/// SIFT extraction with default parameters.
pub fn extract_sift(img: &GrayImage, cap: usize, edges: &EdgeMap) -> Result<FeatureSet> {
    extract_sift_with(img, cap, edges, &SiftConfig::default())
}

pub fn extract_sift_with(img: &GrayImage, cap: usize, edges: &EdgeMap, cfg: &SiftConfig) -> Result<FeatureSet> {
    check_extract_args(img, cap, edges)?;
    let min_dim = img.width().min(img.height()) as f64;
    let n_octaves = min_dim.log2().floor() as i64 - 3;
    if n_octaves < 1 {
        return Err(Error::ExtractionFailed(format!(
            "{}x{} is too small for a single octave",
            img.width(),
            img.height()
        )));
    }
    let octaves = build_pyramid(img, cfg, n_octaves as usize);
    let extrema = find_extrema(&octaves, cfg);
    let s = cfg.scales_per_octave as f32;

    let mut oriented = Vec::new();
    for ext in extrema {
        let oct = &octaves[ext.octave];
        let scl_oct = cfg.sigma * 2f32.powf((ext.layer as f32 + ext.layer_offset) / s);
        let hist = orientation_histogram(
            &oct.gauss[ext.layer],
            ext.x.round() as i64,
            ext.y.round() as i64,
            (ORI_RADIUS * scl_oct).round() as i64,
            ORI_SIG_FCTR * scl_oct,
        );
        let factor = (1u32 << ext.octave) as f32;
        for angle in dominant_orientations(&hist) {
            let kp = Keypoint {
                x: (ext.x * factor) as f64,
                y: (ext.y * factor) as f64,
                scale: (scl_oct * factor) as f64,
                orientation: angle as f64,
                response: ext.response as f64,
                edge_dist: u8::MAX,
            }
            .quantized();
            oriented.push(Oriented {
                kp,
                ext,
                orientation: angle,
            });
        }
    }

    // a candidate without a descriptor gives its slot to the next one, so a
    // smaller cap always yields a prefix of a larger one
    oriented.sort_by(|a, b| canonical_order(&a.kp, &b.kp));

    let mut keypoints = Vec::with_capacity(cap.min(oriented.len()));
    let mut descriptors = Vec::with_capacity(cap.min(oriented.len()) * FLOAT_DESCRIPTOR_LEN);
    for o in oriented {
        if keypoints.len() == cap {
            break;
        }
        let oct = &octaves[o.ext.octave];
        let scl_oct = cfg.sigma * 2f32.powf((o.ext.layer as f32 + o.ext.layer_offset) / s);
        let Some(desc) = compute_descriptor(&oct.gauss[o.ext.layer], o.ext.x, o.ext.y, o.orientation, scl_oct) else {
            continue;
        };
        let mut kp = o.kp;
        kp.edge_dist = edges.dist_at(kp.x as f32, kp.y as f32);
        keypoints.push(kp);
        descriptors.extend_from_slice(&desc);
    }

    Ok(FeatureSet {
        keypoints,
        descriptors: Descriptors::Float128(descriptors),
        source_dims: img.dims(),
        extractor: ExtractorKind::Sift,
        version: FORMAT_VERSION,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constant() {
        let p = Plane {
            w: 20,
            h: 9,
            data: vec![0.25; 180],
        };
        let b = gaussian_blur(&p, 2.3);
        assert!(b.data.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn kernel_is_normalized() {
        for sigma in [0.8f32, 1.6, 3.1] {
            let k = gaussian_kernel(sigma);
            assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert_eq!(k.len() % 2, 1);
        }
    }

    #[test]
    fn normalize_clips_then_renormalizes() {
        let mut raw = vec![0.01f32; 128];
        raw[3] = 10.0;
        raw[77] = 4.0;
        let (clipped, fin) = sift_normalize(&raw).unwrap();
        assert!(clipped.iter().all(|&v| v <= DESCR_MAG_THR + 1e-6));
        let norm: f64 = fin.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(sift_normalize(&[0.0; 128]).is_none());
    }

    #[test]
    fn single_orientation_peak() {
        let mut hist = [0f32; ORI_HIST_BINS];
        hist[9] = 10.0;
        hist[8] = 5.0;
        hist[10] = 5.0;
        let peaks = dominant_orientations(&hist);
        assert_eq!(peaks.len(), 1);
        assert!((peaks[0] - TAU * 9.0 / 36.0).abs() < 1e-5);
    }
}
