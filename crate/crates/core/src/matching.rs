//! Exhaustive nearest-neighbour descriptor matching with the distance ratio
//! test, optional mutual cross-check, one-to-many suppression and
//! post-matching edge exclusion.
//!
//! Matching parallelizes over query descriptors on the current rayon pool.
//! Each query's scan is independent and runs in a fixed order, so the result
//! does not depend on how many workers take part.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Descriptors, FeatureSet, FLOAT_DESCRIPTOR_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    L2,
    Hamming,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Distance ratio threshold in `(0, 1]`.
    pub drt: f64,
    pub cross_check: bool,
    pub edge_exclusion_px: u8,
    pub metric: Metric,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            drt: 0.75,
            cross_check: false,
            edge_exclusion_px: 5,
            metric: Metric::L2,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.drt > 0.0 && self.drt <= 1.0) {
            return Err(Error::InvalidConfig(format!("drt {} outside (0, 1]", self.drt)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub query_idx: usize,
    pub gallery_idx: usize,
    /// Distance to the nearest gallery descriptor.
    pub d1: f64,
    /// Distance to the second nearest.
    pub d2: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Match> {
        self.matches.iter()
    }
}

pub fn match_count(ms: &MatchSet) -> usize {
    ms.matches.len()
}

/// Squared L2 distance accumulated in eight `f32` lanes (fused multiply-add)
/// and summed in `f64`. The accumulation order is fixed, so every code path
/// that calls this gets bit-identical values.
#[inline(always)]
fn l2_sq(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0f32; 8];
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for k in 0..8 {
            let d = ca[k] - cb[k];
            acc[k] = d.mul_add(d, acc[k]);
        }
    }
    lane_sum(&acc)
}

#[inline(always)]
fn lane_sum(acc: &[f32; 8]) -> f64 {
    let mut s = 0f64;
    for &v in acc {
        s += v as f64;
    }
    s
}

/// Euclidean distance between two 128-float descriptors.
#[inline]
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    l2_sq(a, b).sqrt()
}

/// Number of differing bits between two 256-bit descriptors.
#[inline]
pub fn hamming_distance(a: &[u64; 4], b: &[u64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum::<u32>() as f64
}

/// Nearest and second-nearest neighbour of one descriptor. Candidates are
/// ranked by `(distance, index)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopTwo {
    pub best: usize,
    pub d1: f64,
    pub second: usize,
    pub d2: f64,
}

/// Running top two over a value that is monotone in distance.
#[derive(Clone, Copy)]
struct Scan {
    best: usize,
    v1: f64,
    second: usize,
    v2: f64,
}

impl Scan {
    fn new() -> Self {
        Self {
            best: usize::MAX,
            v1: f64::INFINITY,
            second: usize::MAX,
            v2: f64::INFINITY,
        }
    }

    /// Candidates arrive in ascending index order; ties keep the lower index.
    #[inline(always)]
    fn push(&mut self, j: usize, v: f64) {
        if v < self.v1 {
            self.second = self.best;
            self.v2 = self.v1;
            self.best = j;
            self.v1 = v;
        } else if v < self.v2 {
            self.second = j;
            self.v2 = v;
        }
    }

    fn finish(self, f: impl Fn(f64) -> f64) -> TopTwo {
        TopTwo {
            best: self.best,
            d1: f(self.v1),
            second: self.second,
            d2: f(self.v2),
        }
    }
}

const GROUP: usize = 6;

/// Several candidates at once: independent accumulators hide the FMA latency.
/// Each candidate's accumulation order matches [`l2_sq`] exactly. When all
/// partial sums certainly exceed `bound` halfway through, returns
/// `INFINITY` for all of them.
#[inline(always)]
fn l2_sq_multi<const N: usize>(
    q: &[f32; FLOAT_DESCRIPTOR_LEN],
    g: [&[f32; FLOAT_DESCRIPTOR_LEN]; N],
    bound: f64,
) -> [f64; N] {
    let mut acc = [[0f32; 8]; N];
    for half in 0..2 {
        if half == 1 {
            let mut all_out = true;
            for a in &acc {
                let t = [a[0] + a[4], a[1] + a[5], a[2] + a[6], a[3] + a[7]];
                let quick = (t[0] + t[2]) + (t[1] + t[3]);
                all_out &= quick as f64 > bound * (1.0 + 1e-6);
            }
            if all_out {
                return [f64::INFINITY; N];
            }
        }
        for c in 0..8 {
            let base = half * 64 + c * 8;
            for (acc, g) in acc.iter_mut().zip(&g) {
                for k in 0..8 {
                    let d = q[base + k] - g[base + k];
                    acc[k] = d.mul_add(d, acc[k]);
                }
            }
        }
    }
    acc.map(|a| lane_sum(&a))
}

#[inline(always)]
fn scan_float(q: &[f32], gallery: &[f32]) -> TopTwo {
    let q: &[f32; FLOAT_DESCRIPTOR_LEN] = q.try_into().expect("128-float descriptor");
    let mut t = Scan::new();
    let mut groups = gallery.chunks_exact(GROUP * FLOAT_DESCRIPTOR_LEN);
    let mut j = 0;
    for group in &mut groups {
        let g: [&[f32; FLOAT_DESCRIPTOR_LEN]; GROUP] = std::array::from_fn(|k| {
            group[k * FLOAT_DESCRIPTOR_LEN..(k + 1) * FLOAT_DESCRIPTOR_LEN]
                .try_into()
                .unwrap()
        });
        // the second-best value only shrinks within the group, so the bound
        // taken here stays conservative
        let s = l2_sq_multi(q, g, t.v2);
        for v in s {
            t.push(j, v);
            j += 1;
        }
    }
    for g in groups.remainder().chunks_exact(FLOAT_DESCRIPTOR_LEN) {
        t.push(j, l2_sq(q, g));
        j += 1;
    }
    t.finish(f64::sqrt)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn scan_float_avx2(q: &[f32], gallery: &[f32]) -> TopTwo {
    scan_float(q, gallery)
}

fn scan_float_dispatch(q: &[f32], gallery: &[f32]) -> TopTwo {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the CPU supports AVX2 and FMA, checked just above.
            return unsafe { scan_float_avx2(q, gallery) };
        }
    }
    scan_float(q, gallery)
}

fn scan_binary(q: &[u64; 4], gallery: &[[u64; 4]]) -> TopTwo {
    let mut t = Scan::new();
    for (j, g) in gallery.iter().enumerate() {
        t.push(j, hamming_distance(q, g));
    }
    t.finish(|v| v)
}

fn check_compatible(q: &FeatureSet, g: &FeatureSet, cfg: &MatchConfig) -> Result<()> {
    let compatible = matches!(
        (&q.descriptors, &g.descriptors, cfg.metric),
        (Descriptors::Float128(_), Descriptors::Float128(_), Metric::L2)
            | (Descriptors::Binary256(_), Descriptors::Binary256(_), Metric::Hamming)
    );
    if !compatible {
        return Err(Error::IncompatibleDescriptors {
            query: q.descriptors.kind_name(),
            gallery: g.descriptors.kind_name(),
        });
    }
    if g.descriptors.len() < 2 {
        return Err(Error::InsufficientGallery(g.descriptors.len()));
    }
    Ok(())
}

/// Top-two neighbours in `to` for every descriptor of `from`.
fn all_top_two(from: &Descriptors, to: &Descriptors) -> Vec<TopTwo> {
    match (from, to) {
        (Descriptors::Float128(f), Descriptors::Float128(t)) => f
            .par_chunks_exact(FLOAT_DESCRIPTOR_LEN)
            .with_min_len(16)
            .map(|q| scan_float_dispatch(q, t))
            .collect(),
        (Descriptors::Binary256(f), Descriptors::Binary256(t)) => {
            f.par_iter().with_min_len(16).map(|q| scan_binary(q, t)).collect()
        }
        _ => unreachable!("kinds checked by caller"),
    }
}

/// Nearest-neighbour search for every query descriptor.
pub fn nearest_neighbors(q: &FeatureSet, g: &FeatureSet, cfg: &MatchConfig) -> Result<Vec<TopTwo>> {
    check_compatible(q, g, cfg)?;
    Ok(all_top_two(&q.descriptors, &g.descriptors))
}

/// Ratio rule on one neighbour pair. A zero second distance forces a zero
/// nearest distance, which counts as ratio 0.
#[inline]
pub fn ratio_of(d1: f64, d2: f64) -> f64 {
    if d2 > 0.0 {
        d1 / d2
    } else {
        0.0
    }
}

/// Ratio-test survivors (and cross-check survivors when enabled), before
/// one-to-many suppression. Ordered by query index.
pub fn ratio_test_matches(q: &FeatureSet, g: &FeatureSet, cfg: &MatchConfig) -> Result<Vec<Match>> {
    cfg.validate()?;
    let nn = nearest_neighbors(q, g, cfg)?;
    let mut out: Vec<Match> = nn
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            let ratio = ratio_of(t.d1, t.d2);
            (ratio < cfg.drt).then_some(Match {
                query_idx: i,
                gallery_idx: t.best,
                d1: t.d1,
                d2: t.d2,
                ratio,
            })
        })
        .collect();
    if cfg.cross_check && !out.is_empty() {
        // the reverse scan needs only nearest neighbours, but top-two keeps
        // one code path; a single-descriptor query side is fine here
        let back = all_top_two(&g.descriptors, &q.descriptors);
        out.retain(|m| back[m.gallery_idx].best == m.query_idx);
    }
    Ok(out)
}

/// Keeps, for every gallery index claimed by several matches, only the match
/// with the smallest `d1` (lowest query index on ties). Order is preserved.
pub fn suppress_one_to_many(matches: Vec<Match>) -> Vec<Match> {
    let mut winner: std::collections::HashMap<usize, (f64, usize)> =
        std::collections::HashMap::with_capacity(matches.len());
    for m in &matches {
        winner
            .entry(m.gallery_idx)
            .and_modify(|w| {
                if m.d1 < w.0 || (m.d1 == w.0 && m.query_idx < w.1) {
                    *w = (m.d1, m.query_idx);
                }
            })
            .or_insert((m.d1, m.query_idx));
    }
    matches
        .into_iter()
        .filter(|m| winner[&m.gallery_idx].1 == m.query_idx)
        .collect()
}

/// Ratio test, optional cross-check and one-to-many suppression.
pub fn match_descriptors(q: &FeatureSet, g: &FeatureSet, cfg: &MatchConfig) -> Result<MatchSet> {
    let raw = ratio_test_matches(q, g, cfg)?;
    Ok(MatchSet {
        matches: suppress_one_to_many(raw),
    })
}

/// Drops every match whose query or gallery keypoint lies within `px` pixels
/// of a detected edge. Survivors keep their order.
pub fn exclude_edge_matches(ms: &MatchSet, q: &FeatureSet, g: &FeatureSet, px: u8) -> MatchSet {
    MatchSet {
        matches: ms
            .matches
            .iter()
            .filter(|m| q.keypoints[m.query_idx].edge_dist > px && g.keypoints[m.gallery_idx].edge_dist > px)
            .copied()
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ExtractorKind, Keypoint, FORMAT_VERSION};
    use rand::{Rng, SeedableRng};

    fn kp(edge_dist: u8) -> Keypoint {
        Keypoint {
            x: 1.0,
            y: 1.0,
            scale: 1.6,
            orientation: 0.0,
            response: 1.0,
            edge_dist,
        }
    }

    fn float_set(rows: &[Vec<f32>]) -> FeatureSet {
        FeatureSet {
            keypoints: rows.iter().map(|_| kp(255)).collect(),
            descriptors: Descriptors::Float128(rows.concat()),
            source_dims: (64, 64),
            extractor: ExtractorKind::Sift,
            version: FORMAT_VERSION,
        }
    }

    fn axis(scale: f32, dim: usize) -> Vec<f32> {
        let mut v = vec![0.0; 128];
        v[dim] = scale;
        v
    }

    #[test]
    fn ratio_rule_on_hand_built_sets() {
        // query at origin; gallery at distances 0.5, 1.0 and 3.0
        let q = float_set(&[vec![0.0; 128]]);
        let g = float_set(&[axis(0.5, 0), axis(1.0, 1), axis(3.0, 2)]);
        let cfg = MatchConfig {
            drt: 0.75,
            ..Default::default()
        };
        let ms = match_descriptors(&q, &g, &cfg).unwrap();
        assert_eq!(ms.len(), 1);
        let m = ms.matches[0];
        assert_eq!((m.gallery_idx, m.d1, m.d2, m.ratio), (0, 0.5, 1.0, 0.5));

        let strict = MatchConfig { drt: 0.4, ..cfg };
        assert_eq!(match_count(&match_descriptors(&q, &g, &strict).unwrap()), 0);
    }

    #[test]
    fn duplicate_gallery_descriptors_have_zero_ratio() {
        let q = float_set(&[axis(1.0, 4)]);
        let g = float_set(&[axis(1.0, 4), axis(1.0, 4)]);
        let ms = match_descriptors(&q, &g, &MatchConfig::default()).unwrap();
        assert_eq!(ms.len(), 1);
        assert_eq!(ms.matches[0].gallery_idx, 0);
        assert_eq!(ms.matches[0].ratio, 0.0);
    }

    #[test]
    fn errors() {
        let f = float_set(&[axis(1.0, 0), axis(1.0, 1)]);
        let b = FeatureSet {
            keypoints: vec![kp(255); 2],
            descriptors: Descriptors::Binary256(vec![[0; 4], [1; 4]]),
            source_dims: (64, 64),
            extractor: ExtractorKind::Orb,
            version: FORMAT_VERSION,
        };
        assert!(matches!(
            match_descriptors(&f, &b, &MatchConfig::default()),
            Err(Error::IncompatibleDescriptors { .. })
        ));
        let one = float_set(&[axis(1.0, 0)]);
        assert!(matches!(
            match_descriptors(&f, &one, &MatchConfig::default()),
            Err(Error::InsufficientGallery(1))
        ));
        let hamming_on_float = MatchConfig {
            metric: Metric::Hamming,
            ..Default::default()
        };
        assert!(match_descriptors(&f, &f, &hamming_on_float).is_err());
    }

    #[test]
    fn one_to_many_keeps_closest() {
        let mk = |q, g, d1| Match {
            query_idx: q,
            gallery_idx: g,
            d1,
            d2: 1.0,
            ratio: d1,
        };
        let out = suppress_one_to_many(vec![mk(0, 7, 0.3), mk(1, 7, 0.2), mk(2, 3, 0.1), mk(3, 7, 0.2)]);
        let pairs: Vec<(usize, usize)> = out.iter().map(|m| (m.query_idx, m.gallery_idx)).collect();
        assert_eq!(pairs, vec![(1, 7), (2, 3)]);
    }

    #[test]
    fn edge_exclusion_rule() {
        let mut q = float_set(&[axis(1.0, 0), axis(1.0, 1), axis(1.0, 2)]);
        let mut g = q.clone();
        let ms = MatchSet {
            matches: (0..3)
                .map(|i| Match {
                    query_idx: i,
                    gallery_idx: i,
                    d1: 0.0,
                    d2: 1.0,
                    ratio: 0.0,
                })
                .collect(),
        };
        assert_eq!(exclude_edge_matches(&ms, &q, &g, 5), ms);

        g.keypoints[1].edge_dist = 3;
        q.keypoints[2].edge_dist = 0;
        let out = exclude_edge_matches(&ms, &q, &g, 5);
        assert_eq!(out.matches.iter().map(|m| m.query_idx).collect::<Vec<_>>(), vec![0]);

        let out = exclude_edge_matches(&ms, &q, &g, 0);
        assert_eq!(out.matches.iter().map(|m| m.query_idx).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(match_count(&MatchSet::default()), 0);
    }

    #[test]
    fn l2_kernel_agrees_with_naive_sum() {
        let a: Vec<f32> = (0..128).map(|i| ((i * 37 % 101) as f32) / 101.0).collect();
        let b: Vec<f32> = (0..128).map(|i| ((i * 53 % 97) as f32) / 97.0).collect();
        let naive: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((l2_distance(&a, &b) - naive).abs() < 1e-5);
        assert_eq!(hamming_distance(&[u64::MAX, 0, 0, 1], &[0, 0, 0, 0]), 65.0);
    }

    #[test]
    fn dispatched_scan_equals_scalar_scan() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let gallery: Vec<f32> = (0..37 * 128).map(|_| rng.random::<f32>()).collect();
        for _ in 0..20 {
            let q: Vec<f32> = (0..128).map(|_| rng.random::<f32>()).collect();
            assert_eq!(scan_float(&q, &gallery), scan_float_dispatch(&q, &gallery));
        }
    }
}
