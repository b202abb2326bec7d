//! Keypoints, descriptors and the per-image [`FeatureSet`].
//!
//! Two extractors are provided: a SIFT-style detector with 128-float
//! gradient-histogram descriptors ([`extract_sift`]) and an ORB-style detector
//! with 256-bit steered BRIEF descriptors ([`extract_orb`]). Both return their
//! keypoints in canonical order (descending response) and annotate each one
//! with its distance to the nearest detected image edge.

mod io;
mod orb;
pub(crate) mod sift;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use io::{read_feature_set, write_feature_set, FORMAT_VERSION, MAGIC};
pub use orb::{extract_orb, OrbConfig};
pub use sift::{extract_sift, sift_normalize, SiftConfig};

use crate::error::{Error, Result};
use crate::imgproc::{EdgeMap, GrayImage};

pub const FLOAT_DESCRIPTOR_LEN: usize = 128;
pub const BINARY_DESCRIPTOR_WORDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExtractorKind {
    #[serde(rename = "SIFT")]
    Sift,
    #[serde(rename = "ORB")]
    Orb,
}

impl ExtractorKind {
    pub fn id(self) -> u8 {
        match self {
            ExtractorKind::Sift => 0,
            ExtractorKind::Orb => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(ExtractorKind::Sift),
            1 => Some(ExtractorKind::Orb),
            _ => None,
        }
    }
}

impl std::str::FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sift" => Ok(ExtractorKind::Sift),
            "orb" => Ok(ExtractorKind::Orb),
            other => Err(Error::InvalidConfig(format!("unknown extractor {other:?}"))),
        }
    }
}

/// A located, oriented scale-space feature.
///
/// Coordinates are in the frame of the image the keypoint was extracted
/// from. Values produced by the extractors are exactly representable as
/// `f32`, which is what the binary format stores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Absolute blur sigma in pixels.
    pub scale: f64,
    /// Radians in `[0, 2π)`.
    pub orientation: f64,
    pub response: f64,
    /// Pixels to the nearest edge, saturating at 255.
    pub edge_dist: u8,
}

impl Keypoint {
    pub(crate) fn quantized(self) -> Self {
        Self {
            x: self.x as f32 as f64,
            y: self.y as f32 as f64,
            scale: self.scale as f32 as f64,
            orientation: self.orientation as f32 as f64,
            response: self.response as f32 as f64,
            edge_dist: self.edge_dist,
        }
    }
}

/// Canonical keypoint order: descending response, ties by `(y, x, scale,
/// orientation)` ascending.
pub fn canonical_order(a: &Keypoint, b: &Keypoint) -> Ordering {
    b.response
        .total_cmp(&a.response)
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
        .then(a.scale.total_cmp(&b.scale))
        .then(a.orientation.total_cmp(&b.orientation))
}

/// Descriptor block of a feature set, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub enum Descriptors {
    /// `len * 128` L2-normalized floats.
    Float128(Vec<f32>),
    /// Four little-endian 64-bit words per descriptor.
    Binary256(Vec<[u64; BINARY_DESCRIPTOR_WORDS]>),
}

impl Descriptors {
    pub fn len(&self) -> usize {
        match self {
            Descriptors::Float128(v) => v.len() / FLOAT_DESCRIPTOR_LEN,
            Descriptors::Binary256(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Descriptors::Float128(_) => "Float128",
            Descriptors::Binary256(_) => "Binary256",
        }
    }

    pub fn kind_id(&self) -> u8 {
        match self {
            Descriptors::Float128(_) => 0,
            Descriptors::Binary256(_) => 1,
        }
    }

    pub fn float(&self, i: usize) -> Option<&[f32]> {
        match self {
            Descriptors::Float128(v) => Some(&v[i * FLOAT_DESCRIPTOR_LEN..(i + 1) * FLOAT_DESCRIPTOR_LEN]),
            Descriptors::Binary256(_) => None,
        }
    }

    pub fn binary(&self, i: usize) -> Option<&[u64; BINARY_DESCRIPTOR_WORDS]> {
        match self {
            Descriptors::Binary256(v) => v.get(i),
            Descriptors::Float128(_) => None,
        }
    }

    fn truncate(&mut self, n: usize) {
        match self {
            Descriptors::Float128(v) => v.truncate(n * FLOAT_DESCRIPTOR_LEN),
            Descriptors::Binary256(v) => v.truncate(n),
        }
    }

    fn empty_like(&self) -> Self {
        match self {
            Descriptors::Float128(_) => Descriptors::Float128(Vec::new()),
            Descriptors::Binary256(_) => Descriptors::Binary256(Vec::new()),
        }
    }

    fn push_from(&mut self, other: &Descriptors, i: usize) {
        match (self, other) {
            (Descriptors::Float128(dst), Descriptors::Float128(_)) => {
                dst.extend_from_slice(other.float(i).expect("float"))
            }
            (Descriptors::Binary256(dst), Descriptors::Binary256(src)) => dst.push(src[i]),
            _ => unreachable!("descriptor kinds are homogeneous"),
        }
    }
}

/// Keypoints and their descriptors for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Descriptors,
    /// Dimensions of the image the keypoints were extracted from.
    pub source_dims: (u32, u32),
    pub extractor: ExtractorKind,
    pub version: u16,
}

impl FeatureSet {
    pub fn empty(extractor: ExtractorKind, source_dims: (u32, u32)) -> Self {
        let descriptors = match extractor {
            ExtractorKind::Sift => Descriptors::Float128(Vec::new()),
            ExtractorKind::Orb => Descriptors::Binary256(Vec::new()),
        };
        Self {
            keypoints: Vec::new(),
            descriptors,
            source_dims,
            extractor,
            version: FORMAT_VERSION,
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Keeps the first `cap` features. Because sets are stored in canonical
    /// order this equals extracting with a smaller cap.
    pub fn truncated(&self, cap: usize) -> Self {
        let mut out = self.clone();
        out.keypoints.truncate(cap);
        out.descriptors.truncate(cap);
        out
    }

    /// Subset by index, preserving the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut descriptors = self.descriptors.empty_like();
        for &i in indices {
            descriptors.push_from(&self.descriptors, i);
        }
        Self {
            keypoints: indices.iter().map(|&i| self.keypoints[i]).collect(),
            descriptors,
            source_dims: self.source_dims,
            extractor: self.extractor,
            version: self.version,
        }
    }

    /// Re-annotates every keypoint's edge distance from `edges`.
    pub fn annotate_edges(&mut self, edges: &EdgeMap) {
        for kp in &mut self.keypoints {
            kp.edge_dist = edges.dist_at(kp.x as f32, kp.y as f32);
        }
    }
}

/// Maps keypoints from one image frame to another by per-axis scaling.
/// Descriptors and edge distances are left unchanged.
pub fn rescale_keypoints(fs: &FeatureSet, from_dims: (u32, u32), to_dims: (u32, u32)) -> FeatureSet {
    let sx = to_dims.0 as f64 / from_dims.0 as f64;
    let sy = to_dims.1 as f64 / from_dims.1 as f64;
    let mut out = fs.clone();
    if from_dims == to_dims {
        return out;
    }
    let s = (sx * sy).sqrt();
    for kp in &mut out.keypoints {
        kp.x *= sx;
        kp.y *= sy;
        kp.scale *= s;
    }
    out.source_dims = to_dims;
    out
}

/// Sorts candidates canonically and keeps the strongest `cap`.
pub(crate) fn select_top<T>(items: &mut Vec<T>, cap: usize, key: impl Fn(&T) -> &Keypoint) {
    items.sort_by(|a, b| canonical_order(key(a), key(b)));
    items.truncate(cap);
}

pub(crate) fn check_extract_args(img: &GrayImage, cap: usize, edges: &EdgeMap) -> Result<()> {
    if cap == 0 {
        return Err(Error::InvalidConfig("keypoint cap must be at least 1".into()));
    }
    if (edges.width(), edges.height()) != img.dims() {
        return Err(Error::InvalidConfig(format!(
            "edge map {}x{} does not match image {}x{}",
            edges.width(),
            edges.height(),
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Dispatches to the configured extractor.
pub fn extract(kind: ExtractorKind, img: &GrayImage, cap: usize, edges: &EdgeMap) -> Result<FeatureSet> {
    match kind {
        ExtractorKind::Sift => extract_sift(img, cap, edges),
        ExtractorKind::Orb => extract_orb(img, cap, edges),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(x: f64, y: f64, response: f64) -> Keypoint {
        Keypoint {
            x,
            y,
            scale: 2.0,
            orientation: 0.5,
            response,
            edge_dist: 255,
        }
    }

    fn sample_set() -> FeatureSet {
        let keypoints = vec![kp(10.0, 20.0, 3.0), kp(300.5, 100.25, 2.0), kp(44.0, 447.0, 1.0)];
        let descriptors = Descriptors::Float128((0..3 * 128).map(|i| i as f32).collect());
        FeatureSet {
            keypoints,
            descriptors,
            source_dims: (448, 448),
            extractor: ExtractorKind::Sift,
            version: FORMAT_VERSION,
        }
    }

    #[test]
    fn rescale_identity_and_ratio() {
        let fs = sample_set();
        assert_eq!(rescale_keypoints(&fs, (448, 448), (448, 448)), fs);

        let up = rescale_keypoints(&fs, (448, 448), (672, 672));
        for (a, b) in fs.keypoints.iter().zip(&up.keypoints) {
            assert_eq!(b.x, a.x * 1.5);
            assert_eq!(b.y, a.y * 1.5);
            assert_eq!(b.scale, a.scale * 1.5);
        }
        assert_eq!(up.descriptors, fs.descriptors);
        assert_eq!(up.source_dims, (672, 672));

        let back = rescale_keypoints(&up, (672, 672), (448, 448));
        for (a, b) in fs.keypoints.iter().zip(&back.keypoints) {
            assert!((a.x - b.x).abs() < 1e-9);
            assert!((a.y - b.y).abs() < 1e-9);
            assert!((a.scale - b.scale).abs() < 1e-9);
        }
    }

    #[test]
    fn canonical_tie_break() {
        let mut v = vec![
            kp(5.0, 2.0, 1.0),
            kp(1.0, 2.0, 1.0),
            kp(9.0, 1.0, 1.0),
            kp(0.0, 0.0, 2.0),
        ];
        select_top(&mut v, 3, |k| k);
        let xy: Vec<(f64, f64)> = v.iter().map(|k| (k.x, k.y)).collect();
        assert_eq!(xy, vec![(0.0, 0.0), (9.0, 1.0), (1.0, 2.0)]);
    }

    #[test]
    fn truncate_and_select() {
        let fs = sample_set();
        let t = fs.truncated(2);
        assert_eq!(t.len(), 2);
        assert_eq!(t.descriptors.len(), 2);
        let s = fs.select(&[2, 0]);
        assert_eq!(s.keypoints[0], fs.keypoints[2]);
        assert_eq!(s.descriptors.float(1), fs.descriptors.float(0));
    }
}
