use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use texid::features::FORMAT_VERSION;
use texid::matching::{exclude_edge_matches, l2_distance, match_count, match_descriptors, ratio_test_matches, Match};
use texid::{Descriptors, ExtractorKind, FeatureSet, Keypoint, MatchConfig, MatchSet, Metric};

fn kp(edge_dist: u8) -> Keypoint {
    Keypoint {
        x: 10.0,
        y: 10.0,
        scale: 1.6,
        orientation: 0.0,
        response: 1.0,
        edge_dist,
    }
}

fn float_set(desc: Vec<f32>, edges: &[u8]) -> FeatureSet {
    let n = desc.len() / 128;
    FeatureSet {
        keypoints: (0..n).map(|i| kp(edges.get(i).copied().unwrap_or(255))).collect(),
        descriptors: Descriptors::Float128(desc),
        source_dims: (64, 64),
        extractor: ExtractorKind::Sift,
        version: FORMAT_VERSION,
    }
}

fn binary_set(desc: Vec<[u64; 4]>) -> FeatureSet {
    FeatureSet {
        keypoints: vec![kp(255); desc.len()],
        descriptors: Descriptors::Binary256(desc),
        source_dims: (64, 64),
        extractor: ExtractorKind::Orb,
        version: FORMAT_VERSION,
    }
}

/// Exhaustive double loop: `dist(i, j)` for every pair, nearest two by
/// `(distance, index)`, ratio rule, reverse nearest for cross-check, then
/// suppression by sorting on `(gallery, d1, query)`.
fn oracle(nq: usize, ng: usize, dist: impl Fn(usize, usize) -> f64, drt: f64, cross: bool) -> Vec<Match> {
    let top2 = |n: usize, d: &dyn Fn(usize) -> f64| {
        let mut all: Vec<(f64, usize)> = (0..n).map(|j| (d(j), j)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        (all[0], all.get(1).copied().unwrap_or((f64::INFINITY, usize::MAX)))
    };
    let mut kept = Vec::new();
    for i in 0..nq {
        let ((d1, best), (d2, _)) = top2(ng, &|j| dist(i, j));
        let ratio = if d2 > 0.0 { d1 / d2 } else { 0.0 };
        if ratio >= drt {
            continue;
        }
        if cross {
            let ((_, back), _) = top2(nq, &|k| dist(k, best));
            if back != i {
                continue;
            }
        }
        kept.push(Match {
            query_idx: i,
            gallery_idx: best,
            d1,
            d2,
            ratio,
        });
    }
    let mut by_gallery = kept.clone();
    by_gallery.sort_by(|a, b| {
        a.gallery_idx
            .cmp(&b.gallery_idx)
            .then(a.d1.total_cmp(&b.d1))
            .then(a.query_idx.cmp(&b.query_idx))
    });
    by_gallery.dedup_by_key(|m| m.gallery_idx);
    let winners: std::collections::HashSet<usize> = by_gallery.iter().map(|m| m.query_idx).collect();
    kept.retain(|m| winners.contains(&m.query_idx));
    kept
}

/// Descriptor entries on a 1/8 grid in [0, 2): every squared difference and
/// every partial sum is exact in f32, so distances are exact in any order.
fn grid_desc(max_n: usize) -> impl Strategy<Value = Vec<f32>> {
    (1..=max_n).prop_flat_map(|n| prop::collection::vec((0u8..16).prop_map(|k| k as f32 / 8.0), n * 128))
}

fn exact_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn rows(v: &[f32]) -> Vec<&[f32]> {
    v.chunks_exact(128).collect()
}

fn cfg(drt: f64, cross_check: bool) -> MatchConfig {
    MatchConfig {
        drt,
        cross_check,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn float_matching_equals_exhaustive_oracle(
        q in grid_desc(40),
        g in grid_desc(40).prop_filter("two gallery rows", |g| g.len() >= 256),
        drt in 0.05f64..=1.0,
        cross in any::<bool>(),
    ) {
        let (qr, gr) = (rows(&q), rows(&g));
        let want = oracle(qr.len(), gr.len(), |i, j| exact_l2(qr[i], gr[j]), drt, cross);
        let got = match_descriptors(&float_set(q.clone(), &[]), &float_set(g.clone(), &[]), &cfg(drt, cross)).unwrap();
        prop_assert_eq!(got.matches, want);
    }

    #[test]
    fn hamming_matching_equals_exhaustive_oracle(
        q in prop::collection::vec(any::<[u64; 4]>(), 1..40),
        g in prop::collection::vec(any::<[u64; 4]>(), 2..40),
        drt in 0.05f64..=1.0,
        cross in any::<bool>(),
    ) {
        let ham = |a: &[u64; 4], b: &[u64; 4]| a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum::<u32>() as f64;
        let want = oracle(q.len(), g.len(), |i, j| ham(&q[i], &g[j]), drt, cross);
        let c = MatchConfig { metric: Metric::Hamming, ..cfg(drt, cross) };
        let got = match_descriptors(&binary_set(q.clone()), &binary_set(g.clone()), &c).unwrap();
        prop_assert_eq!(got.matches, want);
    }

    #[test]
    fn raising_drt_only_adds_matches(
        q in grid_desc(30),
        g in grid_desc(30).prop_filter("two gallery rows", |g| g.len() >= 256),
        a in 0.05f64..=1.0,
        b in 0.05f64..=1.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (qs, gs) = (float_set(q, &[]), float_set(g, &[]));
        let small = ratio_test_matches(&qs, &gs, &cfg(lo, false)).unwrap();
        let large = ratio_test_matches(&qs, &gs, &cfg(hi, false)).unwrap();
        for m in &small {
            prop_assert!(large.contains(m));
        }
    }

    #[test]
    fn cross_check_only_removes(
        q in grid_desc(30),
        g in grid_desc(30).prop_filter("two gallery rows", |g| g.len() >= 256),
        drt in 0.05f64..=1.0,
    ) {
        let (qs, gs) = (float_set(q, &[]), float_set(g, &[]));
        let plain = match_descriptors(&qs, &gs, &cfg(drt, false)).unwrap();
        let checked = match_descriptors(&qs, &gs, &cfg(drt, true)).unwrap();
        for m in checked.iter() {
            prop_assert!(plain.matches.contains(m));
        }
    }

    #[test]
    fn suppressed_sets_are_one_to_one_and_obey_the_ratio(
        q in grid_desc(30),
        g in grid_desc(30).prop_filter("two gallery rows", |g| g.len() >= 256),
        drt in 0.05f64..=1.0,
    ) {
        let ms = match_descriptors(&float_set(q, &[]), &float_set(g, &[]), &cfg(drt, false)).unwrap();
        let mut gi: Vec<usize> = ms.iter().map(|m| m.gallery_idx).collect();
        let mut qi: Vec<usize> = ms.iter().map(|m| m.query_idx).collect();
        gi.sort();
        gi.dedup();
        qi.sort();
        qi.dedup();
        prop_assert_eq!(gi.len(), ms.len());
        prop_assert_eq!(qi.len(), ms.len());
        for m in ms.iter() {
            prop_assert!(m.d1 <= m.d2);
            prop_assert!(m.ratio < drt);
        }
    }

    #[test]
    fn edge_exclusion_only_removes_violators(
        q in grid_desc(20),
        g in grid_desc(20).prop_filter("two gallery rows", |g| g.len() >= 256),
        qe in prop::collection::vec(0u8..12, 20),
        ge in prop::collection::vec(0u8..12, 20),
        px in 0u8..10,
    ) {
        let (qs, gs) = (float_set(q, &qe), float_set(g, &ge));
        let ms = match_descriptors(&qs, &gs, &cfg(1.0, false)).unwrap();
        let out = exclude_edge_matches(&ms, &qs, &gs, px);
        let mut it = out.iter().peekable();
        for m in ms.iter() {
            let violates = qs.keypoints[m.query_idx].edge_dist <= px || gs.keypoints[m.gallery_idx].edge_dist <= px;
            if it.peek() == Some(&m) {
                prop_assert!(!violates);
                it.next();
            } else {
                prop_assert!(violates);
            }
        }
        prop_assert!(it.next().is_none());
    }
}

fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * 128);
    for _ in 0..n {
        let row: Vec<f32> = (0..128).map(|_| rng.random::<f32>()).collect();
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        out.extend(row.iter().map(|v| v / norm));
    }
    out
}

/// Large random sets of arbitrary floats, checked against a double loop that
/// calls the pairwise distance function directly.
#[test]
fn large_random_sets_match_the_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (nq, ng) in [(1000, 1000), (257, 13), (5, 2)] {
        let q = random_unit_rows(&mut rng, nq);
        let g = random_unit_rows(&mut rng, ng);
        let (qr, gr) = (rows(&q), rows(&g));
        for cross in [false, true] {
            let want = oracle(nq, ng, |i, j| l2_distance(qr[i], gr[j]), 0.9, cross);
            let got =
                match_descriptors(&float_set(q.clone(), &[]), &float_set(g.clone(), &[]), &cfg(0.9, cross)).unwrap();
            assert_eq!(got.matches, want, "{nq}x{ng} cross={cross}");
        }
    }
}

#[test]
fn planted_correspondences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0f32, 0.02).unwrap();
    let gallery = random_unit_rows(&mut rng, 250);
    // the first 200 gallery rows have a noisy twin in the query; the last 50
    // are distractors
    let query: Vec<f32> = gallery[..200 * 128]
        .iter()
        .map(|v| v + noise.sample(&mut rng))
        .collect();
    let (qr, gr) = (rows(&query), rows(&gallery));
    let ms: MatchSet = match_descriptors(
        &float_set(query.clone(), &[]),
        &float_set(gallery.clone(), &[]),
        &cfg(0.75, false),
    )
    .unwrap();
    let correct = ms.iter().filter(|m| m.query_idx == m.gallery_idx).count();
    assert!(correct >= 180, "{correct} correct matches");
    let want = oracle(200, 250, |i, j| exact_l2(qr[i], gr[j]), 0.75, false);
    assert_eq!(match_count(&ms), want.len());
}

#[test]
fn self_match_has_zero_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = random_unit_rows(&mut rng, 768);
    let s = float_set(d, &[]);
    let ms = match_descriptors(&s, &s, &MatchConfig::default()).unwrap();
    assert!((1..=768).contains(&match_count(&ms)));
    assert!(ms
        .iter()
        .all(|m| m.d1 == 0.0 && m.ratio == 0.0 && m.query_idx == m.gallery_idx));
}
