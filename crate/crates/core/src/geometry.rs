//! Planar homography estimation and RANSAC verification.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::matching::MatchSet;

pub type Point = (f64, f64);

/// 3x3 projective transform, scaled so `h[2][2] == 1` whenever that entry is
/// not zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub h: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            h: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalizes and checks invertibility.
    pub fn new(h: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(&Matrix3::from_fn(|r, c| h[r][c]))
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let mut m = *m;
        if m[(2, 2)] != 0.0 {
            m /= m[(2, 2)];
        } else {
            m /= m.norm();
        }
        let det = m.determinant();
        if !det.is_finite() || det.abs() < 1e-12 || m.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateSample);
        }
        Ok(Self {
            h: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
        })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.h[r][c])
    }

    pub fn inverse(&self) -> Option<Self> {
        self.matrix().try_inverse().and_then(|m| Self::from_matrix(&m).ok())
    }

    /// `self` applied after `other`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        Self::from_matrix(&(self.matrix() * other.matrix()))
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    #[inline]
    pub fn apply(&self, p: Point) -> Option<Point> {
        let h = &self.h;
        let w = h[2][0] * p.0 + h[2][1] * p.1 + h[2][2];
        if w.abs() < 1e-12 {
            return None;
        }
        Some((
            (h[0][0] * p.0 + h[0][1] * p.1 + h[0][2]) / w,
            (h[1][0] * p.0 + h[1][1] * p.1 + h[1][2]) / w,
        ))
    }

    /// Largest absolute entry-wise difference from the identity.
    pub fn max_identity_deviation(&self) -> f64 {
        let id = Self::identity();
        let mut m = 0f64;
        for r in 0..3 {
            for c in 0..3 {
                m = m.max((self.h[r][c] - id.h[r][c]).abs());
            }
        }
        m
    }
}

/// Squared distance `|H src - dst|^2 + |H^-1 dst - src|^2`, infinite when either
/// mapping degenerates.
#[inline]
pub fn symmetric_transfer_sq(h: &Homography, hinv: &Homography, src: Point, dst: Point) -> f64 {
    match (h.apply(src), hinv.apply(dst)) {
        (Some(f), Some(b)) => {
            (f.0 - dst.0).powi(2) + (f.1 - dst.1).powi(2) + (b.0 - src.0).powi(2) + (b.1 - src.1).powi(2)
        }
        _ => f64::INFINITY,
    }
}

pub fn symmetric_transfer_error(h: &Homography, src: Point, dst: Point) -> f64 {
    match h.inverse() {
        Some(inv) => symmetric_transfer_sq(h, &inv, src, dst).sqrt(),
        None => f64::INFINITY,
    }
}

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
fn normalizer(pts: &[Point]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_d = pts
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_d > 0.0 {
        std::f64::consts::SQRT_2 / mean_d
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    let v = t * Vector3::new(p.0, p.1, 1.0);
    (v.x / v.z, v.y / v.z)
}

fn any_three_collinear(pts: &[Point]) -> bool {
    let scale = pts
        .iter()
        .flat_map(|a| pts.iter().map(move |b| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)))
        .fold(0f64, f64::max);
    if scale == 0.0 {
        return true;
    }
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
                if cross.abs() <= 1e-9 * scale {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalized DLT over `n >= 4` correspondences; least squares when `n > 4`.
pub fn fit_homography(src: &[Point], dst: &[Point]) -> Result<Homography> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(Error::DegenerateSample);
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    // at least 9 rows so the SVD exposes the full right null space
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let (x, y) = transform(&ts, src[i]);
        let (u, v) = transform(&td, dst[i]);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or(Error::DegenerateSample)?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let hn = Matrix3::from_fn(|r, c| vt[(k, 3 * r + c)]);
    let inv_td = td.try_inverse().ok_or(Error::DegenerateSample)?;
    Homography::from_matrix(&(inv_td * hn * ts))
}

/// Minimal four-point solver.
pub fn dlt_homography(src: &[Point; 4], dst: &[Point; 4]) -> Result<Homography> {
    if any_three_collinear(src) || any_three_collinear(dst) {
        return Err(Error::DegenerateSample);
    }
    fit_homography(src, dst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub reproj_threshold: f64,
    pub max_iterations: u32,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            reproj_threshold: 3.0,
            max_iterations: 2000,
            confidence: 0.995,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeomResult {
    pub hom: Option<Homography>,
    pub inliers: usize,
    pub inlier_mask: Vec<bool>,
    pub reproj_threshold: f64,
    pub iterations_run: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Match,
    NoMatch,
}

pub fn verdict(matched_pairs: usize, mpt: usize) -> Verdict {
    if matched_pairs >= mpt.max(1) {
        Verdict::Match
    } else {
        Verdict::NoMatch
    }
}

fn inlier_mask(h: &Homography, src: &[Point], dst: &[Point], thr_sq: f64) -> Option<(Vec<bool>, usize)> {
    let inv = h.inverse()?;
    let mask: Vec<bool> = src
        .iter()
        .zip(dst)
        .map(|(&s, &d)| symmetric_transfer_sq(h, &inv, s, d) <= thr_sq)
        .collect();
    let count = mask.iter().filter(|&&b| b).count();
    Some((mask, count))
}

fn adaptive_bound(inlier_ratio: f64, confidence: f64, max_iterations: u32) -> u32 {
    if inlier_ratio >= 1.0 {
        return 0;
    }
    let p = inlier_ratio.powi(4);
    if p <= 0.0 {
        return max_iterations;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p).ln();
    if !n.is_finite() || n >= max_iterations as f64 {
        max_iterations
    } else {
        n.ceil().max(0.0) as u32
    }
}

/// RANSAC over point correspondences. The returned mask always comes from
/// the returned homography.
pub fn ransac_points(src: &[Point], dst: &[Point], cfg: &RansacConfig) -> GeomResult {
    let n = src.len();
    let empty = GeomResult {
        hom: None,
        inliers: 0,
        inlier_mask: vec![false; n],
        reproj_threshold: cfg.reproj_threshold,
        iterations_run: 0,
    };
    if n < 4 {
        return empty;
    }
    let thr_sq = cfg.reproj_threshold * cfg.reproj_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Homography, Vec<bool>, usize)> = None;
    let mut bound = cfg.max_iterations;
    let mut it = 0u32;
    while it < bound.min(cfg.max_iterations) {
        it += 1;
        let idx = sample(&mut rng, n, 4);
        let s: [Point; 4] = std::array::from_fn(|k| src[idx.index(k)]);
        let d: [Point; 4] = std::array::from_fn(|k| dst[idx.index(k)]);
        let Ok(h) = dlt_homography(&s, &d) else {
            continue;
        };
        let Some((mask, count)) = inlier_mask(&h, src, dst, thr_sq) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| count > b.2) {
            bound = adaptive_bound(count as f64 / n as f64, cfg.confidence, cfg.max_iterations);
            best = Some((h, mask, count));
        }
    }
    let Some((mut h, mut mask, mut count)) = best else {
        return GeomResult {
            iterations_run: it,
            ..empty
        };
    };
    // least-squares refit on the consensus set while it keeps improving
    for _ in 0..3 {
        if count < 4 {
            break;
        }
        let (s, d): (Vec<Point>, Vec<Point>) = mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (src[i], dst[i]))
            .unzip();
        let Ok(refit) = fit_homography(&s, &d) else {
            break;
        };
        let Some((m2, c2)) = inlier_mask(&refit, src, dst, thr_sq) else {
            break;
        };
        if c2 < count {
            break;
        }
        let grew = c2 > count;
        h = refit;
        mask = m2;
        count = c2;
        if !grew {
            break;
        }
    }
    GeomResult {
        hom: Some(h),
        inliers: count,
        inlier_mask: mask,
        reproj_threshold: cfg.reproj_threshold,
        iterations_run: it,
    }
}

/// Verifies a match set; the homography maps query coordinates to gallery
/// coordinates.
pub fn ransac_verify(ms: &MatchSet, q: &FeatureSet, g: &FeatureSet, cfg: &RansacConfig) -> GeomResult {
    let (src, dst): (Vec<Point>, Vec<Point>) = ms
        .matches
        .iter()
        .map(|m| {
            let a = &q.keypoints[m.query_idx];
            let b = &g.keypoints[m.gallery_idx];
            ((a.x, a.y), (b.x, b.y))
        })
        .unzip();
    ransac_points(&src, &dst, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQUARE: [Point; 4] = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];

    #[test]
    fn identity_from_unit_square() {
        let h = dlt_homography(&SQUARE, &SQUARE).unwrap();
        assert!(h.max_identity_deviation() < 1e-12);
    }

    #[test]
    fn planted_matrix_on_unit_square() {
        let planted = Homography::new([[1.2, 0.1, 5.0], [-0.05, 0.9, -3.0], [1e-4, 2e-4, 1.0]]).unwrap();
        let dst = SQUARE.map(|p| planted.apply(p).unwrap());
        let h = dlt_homography(&SQUARE, &dst).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let (a, b) = (h.h[r][c], planted.h[r][c]);
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3), "{r}{c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn collinear_sample_rejected() {
        let src = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (0.0, 1.0)];
        assert!(matches!(dlt_homography(&src, &SQUARE), Err(Error::DegenerateSample)));
        let repeated = [(0.0, 0.0), (0.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        assert!(matches!(
            dlt_homography(&SQUARE, &repeated),
            Err(Error::DegenerateSample)
        ));
    }

    #[test]
    fn verdict_boundary() {
        assert_eq!(verdict(9, 9), Verdict::Match);
        assert_eq!(verdict(8, 9), Verdict::NoMatch);
        assert_eq!(verdict(0, 1), Verdict::NoMatch);
    }

    #[test]
    fn too_few_points() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)];
        let r = ransac_points(&pts, &pts, &RansacConfig::default());
        assert_eq!(r.inliers, 0);
        assert!(r.hom.is_none());
        assert_eq!(r.inlier_mask, vec![false; 3]);
    }

    #[test]
    fn adaptive_bound_values() {
        assert_eq!(adaptive_bound(1.0, 0.995, 2000), 0);
        assert_eq!(adaptive_bound(0.0, 0.995, 2000), 2000);
        // w = 0.5: log(0.005) / log(1 - 1/16) = 82.1
        assert_eq!(adaptive_bound(0.5, 0.995, 2000), 83);
        assert_eq!(adaptive_bound(0.05, 0.995, 2000), 2000);
    }

    #[test]
    fn symmetric_error_of_translation() {
        let t = Homography::new([[1.0, 0.0, 2.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        // forward and backward each miss by 2 px
        let e = symmetric_transfer_error(&t, (0.0, 0.0), (0.0, 0.0));
        assert!((e - 8f64.sqrt()).abs() < 1e-12);
    }
}
