//! Image preprocessing: decoding, grayscale conversion, resizing, brightness
//! equalization, edge distance maps and the enrollment quality gate.

use std::path::Path;

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest width or height accepted anywhere in the pipeline.
pub const MIN_DIM: u32 = 32;

/// Canonical working resolution for single-resolution paths.
pub const CANONICAL_DIMS: (u32, u32) = (448, 448);

/// Single-channel 8-bit raster, row major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("zero dimension {width}x{height}")));
        }
        if data.len() != width as usize * height as usize {
            return Err(Error::InvalidImage(format!(
                "buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Constant-valued image.
    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as u64).sum::<u64>() as f64 / self.data.len() as f64
    }

    /// Fails unless both dimensions reach [`MIN_DIM`].
    pub fn ensure_min_dims(&self) -> Result<()> {
        if self.width < MIN_DIM || self.height < MIN_DIM {
            return Err(Error::InvalidImage(format!(
                "{}x{} is below the {MIN_DIM}x{MIN_DIM} minimum",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Pixel values scaled to `[0, 1]`.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }

    /// Cropped copy of the window `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidImage(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let buf = image::GrayImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length matches dimensions");
        DynamicImage::ImageLuma8(buf)
    }

    /// PNG-encoded bytes.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_dynamic()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::InvalidImage(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }
}

/// Decodes PNG or JPEG bytes into a grayscale image.
pub fn decode(bytes: &[u8]) -> Result<GrayImage> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::InvalidImage(e.to_string()))?;
    to_gray(&img)
}

pub fn load(path: impl AsRef<Path>) -> Result<GrayImage> {
    let bytes = std::fs::read(path.as_ref())?;
    decode(&bytes)
}

/// Converts a decoded raster to luminance. 8-bit gray input passes through
/// untouched; everything else goes through RGB with
/// `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn to_gray(img: &DynamicImage) -> Result<GrayImage> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::InvalidImage("zero-dimension raster".into()));
    }
    if let DynamicImage::ImageLuma8(buf) = img {
        return GrayImage::new(buf.width(), buf.height(), buf.as_raw().clone());
    }
    let rgb = img.to_rgb8();
    let data = rgb.pixels().map(|p| luminance(p.0[0], p.0[1], p.0[2])).collect();
    GrayImage::new(rgb.width(), rgb.height(), data)
}

#[inline]
pub fn luminance(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

/// Bilinear resize with pixel-centre alignment. Same-size requests return an
/// identical copy.
pub fn resize(img: &GrayImage, target: (u32, u32)) -> Result<GrayImage> {
    let (tw, th) = target;
    if tw < MIN_DIM || th < MIN_DIM {
        return Err(Error::InvalidTarget {
            width: tw,
            height: th,
            min: MIN_DIM,
        });
    }
    if img.dims() == target {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / tw as f64;
    let sy = img.height as f64 / th as f64;
    let w = img.width as usize;
    let max_x = img.width as f64 - 1.0;
    let max_y = img.height as f64 - 1.0;

    let cols: Vec<(usize, usize, f64)> = (0..tw)
        .map(|x| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width as usize - 1);
            (x0, x1, fx - x0 as f64)
        })
        .collect();

    let mut data = Vec::with_capacity(tw as usize * th as usize);
    for y in 0..th {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height as usize - 1);
        let wy = fy - y0 as f64;
        let r0 = &img.data[y0 * w..(y0 + 1) * w];
        let r1 = &img.data[y1 * w..(y1 + 1) * w];
        for &(x0, x1, wx) in &cols {
            let top = r0[x0] as f64 * (1.0 - wx) + r0[x1] as f64 * wx;
            let bottom = r1[x0] as f64 * (1.0 - wx) + r1[x1] as f64 * wx;
            let v = top * (1.0 - wy) + bottom * wy;
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(tw, th, data)
}

/// Global histogram equalization. The lowest occupied level maps to 0 and the
/// highest to 255; constant images are returned unchanged.
pub fn equalize_brightness(img: &GrayImage) -> GrayImage {
    let lut = equalization_lut(img);
    GrayImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| lut[v as usize]).collect(),
    }
}

pub(crate) fn equalization_lut(img: &GrayImage) -> [u8; 256] {
    let mut hist = [0u64; 256];
    for &v in &img.data {
        hist[v as usize] += 1;
    }
    let total = img.data.len() as u64;
    let cdf_min = hist.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let mut lut = [0u8; 256];
    if total == cdf_min {
        for (i, l) in lut.iter_mut().enumerate() {
            *l = i as u8;
        }
        return lut;
    }
    let denom = (total - cdf_min) as f64;
    let mut cdf = 0u64;
    for (i, &c) in hist.iter().enumerate() {
        cdf += c;
        let v = (cdf.saturating_sub(cdf_min)) as f64 / denom * 255.0;
        lut[i] = v.round().clamp(0.0, 255.0) as u8;
    }
    lut
}

/// Per-pixel distance to the nearest edge pixel.
///
/// Distances use the 8-connected chessboard metric (`max(|dx|, |dy|)`) and
/// saturate at 255, which is also the value everywhere when no edge exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    width: u32,
    height: u32,
    dist: Vec<u8>,
}

impl EdgeMap {
    /// Map with no edges: every distance saturated.
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            dist: vec![u8::MAX; width as usize * height as usize],
        }
    }

    /// Builds the distance transform of a binary edge mask.
    pub fn from_mask(width: u32, height: u32, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), width as usize * height as usize);
        let w = width as usize;
        let h = height as usize;
        let mut d: Vec<u16> = mask.iter().map(|&e| if e { 0 } else { u16::MAX }).collect();
        let relax = |d: &mut [u16], i: usize, j: usize| {
            let cand = d[j].saturating_add(1);
            if cand < d[i] {
                d[i] = cand;
            }
        };
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x > 0 {
                    relax(&mut d, i, i - 1);
                }
                if y > 0 {
                    relax(&mut d, i, i - w);
                    if x > 0 {
                        relax(&mut d, i, i - w - 1);
                    }
                    if x + 1 < w {
                        relax(&mut d, i, i - w + 1);
                    }
                }
            }
        }
        for y in (0..h).rev() {
            for x in (0..w).rev() {
                let i = y * w + x;
                if x + 1 < w {
                    relax(&mut d, i, i + 1);
                }
                if y + 1 < h {
                    relax(&mut d, i, i + w);
                    if x + 1 < w {
                        relax(&mut d, i, i + w + 1);
                    }
                    if x > 0 {
                        relax(&mut d, i, i + w - 1);
                    }
                }
            }
        }
        Self {
            width,
            height,
            dist: d.into_iter().map(|v| v.min(255) as u8).collect(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn distances(&self) -> &[u8] {
        &self.dist
    }

    #[inline]
    pub fn dist(&self, x: u32, y: u32) -> u8 {
        self.dist[y as usize * self.width as usize + x as usize]
    }

    /// Distance at a sub-pixel location, rounded to the nearest pixel and
    /// clamped into the frame.
    pub fn dist_at(&self, x: f32, y: f32) -> u8 {
        let xi = (x.round().max(0.0) as u32).min(self.width - 1);
        let yi = (y.round().max(0.0) as u32).min(self.height - 1);
        self.dist(xi, yi)
    }

    pub fn edge_count(&self) -> usize {
        self.dist.iter().filter(|&&d| d == 0).count()
    }
}

/// Default Sobel threshold, in luminance units (a step of this height is
/// exactly at threshold).
pub const DEFAULT_EDGE_THRESHOLD: f32 = 48.0;

/// Sobel gradient magnitude, scaled by 1/4 so that a vertical or horizontal
/// step of height `h` has magnitude `h`. Borders replicate.
pub fn sobel_magnitude(img: &GrayImage) -> Vec<f32> {
    let w = img.width as i64;
    let h = img.height as i64;
    let px = |x: i64, y: i64| -> f32 {
        let xc = x.clamp(0, w - 1);
        let yc = y.clamp(0, h - 1);
        img.data[(yc * w + xc) as usize] as f32
    };
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            out.push((gx * gx + gy * gy).sqrt() * 0.25);
        }
    }
    out
}

/// Marks pixels whose Sobel magnitude reaches `grad_threshold` as edges and
/// returns their distance transform.
pub fn edge_map(img: &GrayImage, grad_threshold: f32) -> EdgeMap {
    let mask: Vec<bool> = sobel_magnitude(img).into_iter().map(|m| m >= grad_threshold).collect();
    EdgeMap::from_mask(img.width, img.height, &mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityConfig {
    pub min_mean_luma: f64,
    pub max_mean_luma: f64,
    pub min_sharpness: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            min_mean_luma: 40.0,
            max_mean_luma: 220.0,
            min_sharpness: 25.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub mean_luma: f64,
    /// Variance of the 4-neighbour Laplacian over interior pixels.
    pub sharpness: f64,
    pub pass: bool,
}

/// Heuristic exposure and focus check run before enrollment.
pub fn quality_gate(img: &GrayImage, cfg: &QualityConfig) -> QualityReport {
    let mean_luma = img.mean();
    let sharpness = laplacian_variance(img);
    let pass = mean_luma >= cfg.min_mean_luma && mean_luma <= cfg.max_mean_luma && sharpness >= cfg.min_sharpness;
    QualityReport {
        mean_luma,
        sharpness,
        pass,
    }
}

fn laplacian_variance(img: &GrayImage) -> f64 {
    let w = img.width as usize;
    let h = img.height as usize;
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let lap = img.data[i - 1] as f64 + img.data[i + 1] as f64 + img.data[i - w] as f64 + img.data[i + w] as f64
                - 4.0 * img.data[i] as f64;
            sum += lap;
            sum_sq += lap * lap;
        }
    }
    let n = ((w - 2) * (h - 2)) as f64;
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}
