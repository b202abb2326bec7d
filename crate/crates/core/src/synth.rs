//! Procedural stand-ins for pressed-leaf product faces, plus capture
//! perturbations with known ground truth and a pair benchmark builder.
//!
//! Every product shares the same pressed stamp (a ring and four glyphs of
//! grooves) on top of its own random leaf texture. The stamp is what makes
//! unrelated products produce geometrically consistent matches along sharp
//! edges.

use std::collections::BTreeMap;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::sift::{gaussian_blur, Plane};
use crate::geometry::Homography;
use crate::imgproc::{self, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub seed: u64,
    pub dims: (u32, u32),
    pub blob_count: usize,
    /// Stroke half-length range in pixels.
    pub blob_scale_range: (f64, f64),
    pub contrast: f64,
    /// Draw the shared stamp.
    pub stamp: bool,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: imgproc::CANONICAL_DIMS,
            blob_count: 3000,
            blob_scale_range: (3.0, 14.0),
            contrast: 0.7,
            stamp: true,
        }
    }
}

impl TextureSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.blob_scale_range;
        if self.blob_count < 100 {
            return Err(Error::InvalidConfig(format!(
                "blob_count {} below 100",
                self.blob_count
            )));
        }
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidConfig("bad blob_scale_range".into()));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(Error::InvalidConfig("contrast outside [0, 1]".into()));
        }
        if self.dims.0 < imgproc::MIN_DIM || self.dims.1 < imgproc::MIN_DIM {
            return Err(Error::InvalidTarget {
                width: self.dims.0,
                height: self.dims.1,
                min: imgproc::MIN_DIM,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Occlusion {
    None,
    Crop { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub seed: u64,
    /// Out-of-plane tilt in degrees, `[0, 60]`.
    pub viewpoint_deg: f64,
    pub rotation_deg: f64,
    pub brightness_gain: f64,
    pub noise_sigma: f64,
    pub occlusion: Occlusion,
}

impl PerturbSpec {
    pub fn identity() -> Self {
        Self {
            seed: 0,
            viewpoint_deg: 0.0,
            rotation_deg: 0.0,
            brightness_gain: 1.0,
            noise_sigma: 0.0,
            occlusion: Occlusion::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=60.0).contains(&self.viewpoint_deg) {
            return Err(Error::InvalidConfig("viewpoint_deg outside [0, 60]".into()));
        }
        if !(0.2..=1.5).contains(&self.brightness_gain) {
            return Err(Error::InvalidConfig("brightness_gain outside [0.2, 1.5]".into()));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("negative noise_sigma".into()));
        }
        if let Occlusion::Crop { fraction } = self.occlusion {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::InvalidConfig("crop fraction outside (0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// SplitMix64 step; used to derive independent child seeds.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Coverage of a shape edge at signed distance `d` (negative inside) with a
/// linear ramp of width `soft`.
#[inline]
fn coverage(d: f64, soft: f64) -> f64 {
    (0.5 - d / soft).clamp(0.0, 1.0)
}

fn band_pass_noise(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let white = Plane {
        w,
        h,
        data: (0..w * h).map(|_| normal.sample(rng)).collect(),
    };
    let fine = gaussian_blur(&white, 1.0);
    let coarse = gaussian_blur(&white, 3.0);
    let mut band: Vec<f32> = fine.data.iter().zip(&coarse.data).map(|(a, b)| a - b).collect();
    let var = band.iter().map(|v| v * v).sum::<f32>() / band.len() as f32;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    for v in &mut band {
        *v *= inv;
    }
    band
}

fn paint_stroke(canvas: &mut [f64], w: usize, h: usize, rng: &mut ChaCha8Rng, spec: &TextureSpec) {
    let (lo, hi) = spec.blob_scale_range;
    let cx = rng.random_range(-hi..w as f64 + hi);
    let cy = rng.random_range(-hi..h as f64 + hi);
    let a = rng.random_range(lo..=hi);
    let b = a * rng.random_range(0.22..0.45);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let level = 128.0 + spec.contrast * rng.random_range(-55.0..55.0);
    // intensity varies along the stroke like a leaf's midrib shading
    let shade = spec.contrast * rng.random_range(-25.0..25.0);
    let (s, c) = theta.sin_cos();
    let soft = 3.0;
    let x0 = (cx - a - 2.0).floor().max(0.0) as usize;
    let x1 = ((cx + a + 2.0).ceil() as isize).clamp(0, w as isize) as usize;
    let y0 = (cy - a - 2.0).floor().max(0.0) as usize;
    let y1 = ((cy + a + 2.0).ceil() as isize).clamp(0, h as isize) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            // approximate signed pixel distance to the ellipse boundary
            let d = (r - 1.0) * b;
            let alpha = coverage(d, soft);
            if alpha > 0.0 {
                let p = &mut canvas[y * w + x];
                let target = level + shade * (u / a);
                *p += (target - *p) * alpha;
            }
        }
    }
}

type Segment = ((f64, f64), (f64, f64));

/// Groove segments of the shared stamp in normalized `[0, 1]` coordinates.
fn stamp_segments() -> &'static [Segment] {
    static SEGMENTS: std::sync::OnceLock<Vec<Segment>> = std::sync::OnceLock::new();
    SEGMENTS.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x57a4_9000);
        let mut segs = Vec::new();
        for (gx, gy) in [(0.30, 0.30), (0.70, 0.30), (0.30, 0.70), (0.70, 0.70)] {
            for _ in 0..3 {
                // strokes snap to horizontal, vertical or diagonal directions
                let dir = rng.random_range(0..4) as f64 * std::f64::consts::FRAC_PI_4;
                let len = rng.random_range(0.05..0.13);
                let px = gx + rng.random_range(-0.06..0.06);
                let py = gy + rng.random_range(-0.06..0.06);
                let (s, c) = dir.sin_cos();
                segs.push((
                    (px - c * len / 2.0, py - s * len / 2.0),
                    (px + c * len / 2.0, py + s * len / 2.0),
                ));
            }
        }
        segs
    })
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    ((p.0 - a.0 - t * vx).powi(2) + (p.1 - a.1 - t * vy).powi(2)).sqrt()
}

fn paint_stamp(canvas: &mut [f64], w: usize, h: usize) {
    let scale = w.min(h) as f64;
    let half_width = 2.5;
    let ring_r = 0.40 * scale;
    let depth = 60.0;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let segs: Vec<((f64, f64), (f64, f64))> = stamp_segments()
        .iter()
        .map(|&(a, b)| ((a.0 * w as f64, a.1 * h as f64), (b.0 * w as f64, b.1 * h as f64)))
        .collect();
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64, y as f64);
            let ring = (((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt() - ring_r).abs();
            let mut d = ring;
            for &(a, b) in &segs {
                d = d.min(segment_distance(p, a, b));
            }
            let alpha = coverage(d - half_width, 1.0);
            if alpha > 0.0 {
                let v = &mut canvas[y * w + x];
                *v = (*v - depth * alpha).max(0.0);
            }
        }
    }
}

pub fn generate_texture(spec: &TextureSpec) -> Result<GrayImage> {
    spec.validate()?;
    let (w, h) = (spec.dims.0 as usize, spec.dims.1 as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = band_pass_noise(&mut rng, w, h);
    let mut canvas: Vec<f64> = noise.iter().map(|&n| 128.0 + spec.contrast * 14.0 * n as f64).collect();
    for _ in 0..spec.blob_count {
        paint_stroke(&mut canvas, w, h, &mut rng, spec);
    }
    // fine grain on top of the strokes
    for (c, n) in canvas.iter_mut().zip(&noise) {
        *c += spec.contrast * 6.0 * *n as f64;
    }
    if spec.stamp {
        paint_stamp(&mut canvas, w, h);
    }
    GrayImage::new(
        spec.dims.0,
        spec.dims.1,
        canvas.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    )
}

/// Ground-truth warp for a tilt of `viewpoint_deg` about an in-image axis at
/// angle `axis` through the centre, preceded by an in-plane rotation. The
/// camera sits at twice the image width from the plane.
pub fn viewpoint_homography(dims: (u32, u32), viewpoint_deg: f64, rotation_deg: f64, axis: f64) -> Homography {
    use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
    let (w, h) = (dims.0 as f64, dims.1 as f64);
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let d = 2.0 * w;
    let r = Rotation3::from_axis_angle(
        &Unit::new_normalize(Vector3::new(axis.cos(), axis.sin(), 0.0)),
        viewpoint_deg.to_radians(),
    );
    let r = r.matrix();
    let tilt = Matrix3::new(
        r[(0, 0)],
        r[(0, 1)],
        0.0,
        r[(1, 0)],
        r[(1, 1)],
        0.0,
        r[(2, 0)] / d,
        r[(2, 1)] / d,
        1.0,
    );
    let (s, c) = rotation_deg.to_radians().sin_cos();
    let rz = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    let to_centre = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    let back = Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
    Homography::from_matrix(&(back * tilt * rz * to_centre)).expect("tilt below 90 degrees is invertible")
}

/// Inverse-maps every output pixel through `h` and samples bilinearly; pixels
/// that fall outside the source are black.
pub fn warp(img: &GrayImage, h: &Homography) -> GrayImage {
    let inv = h.inverse().expect("warp homography is invertible");
    let (w, ht) = img.dims();
    let src = img.data();
    let sw = w as usize;
    GrayImage::from_fn(w, ht, |x, y| {
        let Some((sx, sy)) = inv.apply((x as f64, y as f64)) else {
            return 0;
        };
        if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (ht - 1) as f64 {
            return 0;
        }
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let x1 = (x0 + 1).min(sw - 1);
        let y1 = (y0 + 1).min(ht as usize - 1);
        let fx = sx - x0 as f64;
        let fy = sy - y0 as f64;
        let p = |xx: usize, yy: usize| src[yy * sw + xx] as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
    })
}

/// Applies warp, gain, noise and crop in that order. The returned homography
/// maps input pixel coordinates to output pixel coordinates.
pub fn perturb(img: &GrayImage, p: &PerturbSpec) -> Result<(GrayImage, Homography)> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let axis = rng.random_range(0.0..std::f64::consts::PI);
    let mut hom = Homography::identity();
    let mut out = if p.viewpoint_deg == 0.0 && p.rotation_deg == 0.0 {
        img.clone()
    } else {
        hom = viewpoint_homography(img.dims(), p.viewpoint_deg, p.rotation_deg, axis);
        warp(img, &hom)
    };

    if p.brightness_gain != 1.0 || p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, p.noise_sigma.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let (w, h) = out.dims();
        let data: Vec<u8> = out
            .data()
            .iter()
            .map(|&v| {
                let n = if p.noise_sigma > 0.0 {
                    normal.sample(&mut rng)
                } else {
                    0.0
                };
                (v as f64 * p.brightness_gain + n).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        out = GrayImage::new(w, h, data)?;
    }

    if let Occlusion::Crop { fraction } = p.occlusion {
        if fraction < 1.0 {
            let (w, h) = out.dims();
            let side = fraction.sqrt();
            let cw = ((w as f64 * side).round() as u32).max(1);
            let ch = ((h as f64 * side).round() as u32).max(1);
            let ox = rng.random_range(0..=w - cw);
            let oy = rng.random_range(0..=h - ch);
            out = out.crop(ox, oy, cw, ch)?;
            let shift = Homography::new([[1.0, 0.0, -(ox as f64)], [0.0, 1.0, -(oy as f64)], [0.0, 0.0, 1.0]])?;
            hom = shift.compose(&hom)?;
        }
    }
    Ok((out, hom))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Gallery,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub role: Role,
    pub file: String,
    pub seed: u64,
    /// Gallery item the query was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<TextureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<PerturbSpec>,
    /// Source-to-query ground truth, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<[f64; 9]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub query: String,
    pub gallery: String,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum ManifestEntry {
    Image(ImageEntry),
    Pair(PairEntry),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn images(&self) -> impl Iterator<Item = &ImageEntry> {
        self.entries.iter().filter_map(|e| match e {
            ManifestEntry::Image(i) => Some(i),
            _ => None,
        })
    }

    pub fn gallery(&self) -> impl Iterator<Item = &ImageEntry> {
        self.images().filter(|i| i.role == Role::Gallery)
    }

    pub fn queries(&self) -> impl Iterator<Item = &ImageEntry> {
        self.images().filter(|i| i.role == Role::Query)
    }

    pub fn pairs(&self) -> impl Iterator<Item = &PairEntry> {
        self.entries.iter().filter_map(|e| match e {
            ManifestEntry::Pair(p) => Some(p),
            _ => None,
        })
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images().find(|i| i.id == id)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| Error::ManifestError(format!("line {}: {e}", n + 1)))?);
        }
        let m = Self { entries };
        m.check()?;
        Ok(m)
    }

    /// Every pair must reference a known query and gallery image.
    pub fn check(&self) -> Result<()> {
        let mut roles: BTreeMap<&str, Role> = BTreeMap::new();
        for i in self.images() {
            if roles.insert(&i.id, i.role).is_some() {
                return Err(Error::ManifestError(format!("duplicate image id {}", i.id)));
            }
        }
        for p in self.pairs() {
            if roles.get(p.query.as_str()) != Some(&Role::Query) {
                return Err(Error::ManifestError(format!("unknown query {}", p.query)));
            }
            if roles.get(p.gallery.as_str()) != Some(&Role::Gallery) {
                return Err(Error::ManifestError(format!("unknown gallery item {}", p.gallery)));
            }
        }
        Ok(())
    }
}

/// Perturbation ranges for benchmark queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub viewpoint_deg: (f64, f64),
    pub rotation_deg: (f64, f64),
    pub gain: (f64, f64),
    pub noise_sigma: f64,
    pub occlusion: Occlusion,
}

impl Regime {
    pub fn default_capture() -> Self {
        Self {
            viewpoint_deg: (0.0, 30.0),
            rotation_deg: (-180.0, 180.0),
            gain: (0.7, 1.3),
            noise_sigma: 2.0,
            occlusion: Occlusion::None,
        }
    }

    pub fn hard() -> Self {
        Self {
            viewpoint_deg: (40.0, 60.0),
            rotation_deg: (-180.0, 180.0),
            gain: (0.2, 0.4),
            noise_sigma: 2.0,
            occlusion: Occlusion::Crop { fraction: 0.25 },
        }
    }

    pub fn occluded() -> Self {
        Self {
            occlusion: Occlusion::Crop { fraction: 0.25 },
            ..Self::default_capture()
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, seed: u64) -> PerturbSpec {
        let pick = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        PerturbSpec {
            seed,
            viewpoint_deg: pick(rng, self.viewpoint_deg),
            rotation_deg: pick(rng, self.rotation_deg),
            brightness_gain: pick(rng, self.gain),
            noise_sigma: self.noise_sigma,
            occlusion: self.occlusion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub gallery_n: usize,
    pub query_per_item: usize,
    pub regime: Regime,
    pub texture: TextureSpec,
    pub seed: u64,
}

impl BenchmarkSpec {
    pub fn new(gallery_n: usize, query_per_item: usize, hard: bool, seed: u64) -> Self {
        Self {
            gallery_n,
            query_per_item,
            regime: if hard {
                Regime::hard()
            } else {
                Regime::default_capture()
            },
            texture: TextureSpec::default(),
            seed,
        }
    }
}

/// Images and manifest of a generated benchmark, held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub manifest: Manifest,
    pub images: BTreeMap<String, GrayImage>,
}

impl Benchmark {
    pub fn image(&self, id: &str) -> Result<&GrayImage> {
        self.images
            .get(id)
            .ok_or_else(|| Error::ManifestError(format!("no image for id {id}")))
    }

    /// Writes `manifest.jsonl` and one PNG per image under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for e in self.manifest.images() {
            let path = dir.join(&e.file);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            self.image(&e.id)?.save_png(&path)?;
        }
        let mut f = std::fs::File::create(dir.join("manifest.jsonl"))?;
        f.write_all(self.manifest.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// Reads a benchmark back; a missing or undecodable image is a manifest
    /// error.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = load_manifest(dir.join("manifest.jsonl"))?;
        let mut images = BTreeMap::new();
        for e in manifest.images() {
            let path: PathBuf = dir.join(&e.file);
            let img = imgproc::load(&path).map_err(|err| Error::ManifestError(format!("{}: {err}", path.display())))?;
            images.insert(e.id.clone(), img);
        }
        Ok(Self { manifest, images })
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::ManifestError(format!("{}: {e}", path.display())))?;
    let mut text = String::new();
    for line in std::io::BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| Error::ManifestError(e.to_string()))?);
        text.push('\n');
    }
    Manifest::from_jsonl(&text)
}

pub fn build_benchmark(gallery_n: usize, query_per_item: usize, hard: bool, seed: u64) -> Result<Benchmark> {
    build_benchmark_with(&BenchmarkSpec::new(gallery_n, query_per_item, hard, seed))
}

pub fn build_benchmark_with(spec: &BenchmarkSpec) -> Result<Benchmark> {
    use rayon::prelude::*;

    if spec.gallery_n < 2 {
        return Err(Error::InvalidConfig("benchmark needs at least 2 gallery items".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gallery: Vec<ImageEntry> = (0..spec.gallery_n)
        .map(|i| {
            let id = format!("g{i:04}");
            let texture = TextureSpec {
                seed: derive_seed(spec.seed, i as u64),
                ..spec.texture
            };
            ImageEntry {
                file: format!("gallery/{id}.png"),
                id,
                role: Role::Gallery,
                seed: texture.seed,
                source: None,
                texture: Some(texture),
                perturb: None,
                homography: None,
            }
        })
        .collect();

    let mut queries = Vec::new();
    let mut pairs = Vec::new();
    for (gi, g) in gallery.iter().enumerate() {
        for k in 0..spec.query_per_item {
            let id = format!("q{:04}_{k}", gi);
            let pseed = derive_seed(spec.seed ^ 0x5155_4552_5953, (gi * spec.query_per_item + k) as u64);
            let perturb = spec.regime.sample(&mut rng, pseed);
            let mut neg = rng.random_range(0..spec.gallery_n - 1);
            if neg >= gi {
                neg += 1;
            }
            pairs.push(PairEntry {
                query: id.clone(),
                gallery: g.id.clone(),
                label: true,
            });
            pairs.push(PairEntry {
                query: id.clone(),
                gallery: gallery[neg].id.clone(),
                label: false,
            });
            queries.push(ImageEntry {
                file: format!("queries/{id}.png"),
                id,
                role: Role::Query,
                seed: pseed,
                source: Some(g.id.clone()),
                texture: None,
                perturb: Some(perturb),
                homography: None,
            });
        }
    }

    let gallery_imgs: Vec<GrayImage> = gallery
        .par_iter()
        .map(|e| generate_texture(e.texture.as_ref().unwrap()))
        .collect::<Result<_>>()?;
    let rendered: Vec<(GrayImage, Homography)> = queries
        .par_iter()
        .map(|q| {
            let src = q.source.as_deref().unwrap();
            let gi: usize = src[1..].parse().unwrap();
            perturb(&gallery_imgs[gi], q.perturb.as_ref().unwrap())
        })
        .collect::<Result<_>>()?;

    let mut images = BTreeMap::new();
    for (e, img) in gallery.iter().zip(gallery_imgs) {
        images.insert(e.id.clone(), img);
    }
    for (q, (img, h)) in queries.iter_mut().zip(rendered) {
        q.homography = Some(std::array::from_fn(|i| h.h[i / 3][i % 3]));
        images.insert(q.id.clone(), img);
    }

    let mut entries: Vec<ManifestEntry> = gallery.into_iter().map(ManifestEntry::Image).collect();
    entries.extend(queries.into_iter().map(ManifestEntry::Image));
    entries.extend(pairs.into_iter().map(ManifestEntry::Pair));
    Ok(Benchmark {
        manifest: Manifest { entries },
        images,
    })
}

/// One-sided Mann-Whitney U test that `pos` tends to exceed `neg`, using the
/// normal approximation with tie correction. Returns `(U, p)`.
pub fn mann_whitney_greater(pos: &[f64], neg: &[f64]) -> (f64, f64) {
    let (n1, n2) = (pos.len() as f64, neg.len() as f64);
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&v| (v, true))
        .chain(neg.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut rank_sum = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let nn = n1 + n2;
    let var = n1 * n2 / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if var <= 0.0 {
        return (u, if u > mean { 0.0 } else { 1.0 });
    }
    let z = (u - mean - 0.5) / var.sqrt();
    (u, 0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2))
}
