//! Enrollment, pair verification (normal and boosted), gallery search and
//! gallery persistence.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{self, read_feature_set, write_feature_set, ExtractorKind, FeatureSet};
use crate::geometry::{ransac_points, verdict, GeomResult, Homography, Point, RansacConfig, Verdict};
use crate::imgproc::{self, GrayImage, QualityConfig, QualityReport};
use crate::matching::{exclude_edge_matches, match_descriptors, MatchConfig, MatchSet, Metric};
use crate::synth::derive_seed;

/// Gallery store layout version.
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub extractor: ExtractorKind,
    pub keypoint_cap: usize,
    pub drt: f64,
    pub mpt_normal: usize,
    pub mpt_boosted: usize,
    pub edge_exclusion: bool,
    pub edge_exclusion_px: u8,
    /// Sobel magnitude threshold for the edge map.
    pub edge_threshold: f32,
    /// Working resolutions of the normal path; the first one is the common
    /// frame and the enrollment resolution.
    pub resolutions: Vec<(u32, u32)>,
    pub boosted_resolutions: Vec<(u32, u32)>,
    pub boosted_cap: usize,
    /// Histogram equalization on the normal path.
    pub equalize: bool,
    /// Mutual nearest-neighbour check on the normal path.
    pub cross_check: bool,
    pub quality: QualityConfig,
    /// Apply the quality gate to verification and search queries.
    pub query_quality_check: bool,
    pub ransac: RansacConfig,
    pub seed: u64,
    /// Worker count for parallel stages; 0 uses the ambient pool.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorKind::Sift,
            keypoint_cap: 768,
            drt: 0.75,
            mpt_normal: 6,
            mpt_boosted: 9,
            edge_exclusion: true,
            edge_exclusion_px: 5,
            edge_threshold: imgproc::DEFAULT_EDGE_THRESHOLD,
            resolutions: vec![imgproc::CANONICAL_DIMS],
            boosted_resolutions: vec![(448, 448), (672, 672)],
            boosted_cap: 1600,
            equalize: false,
            cross_check: false,
            quality: QualityConfig::default(),
            query_quality_check: true,
            ransac: RansacConfig::default(),
            seed: 0,
            threads: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.drt > 0.0 && self.drt <= 1.0) {
            return bad("drt must lie in (0, 1]");
        }
        if self.keypoint_cap == 0 || self.boosted_cap == 0 {
            return bad("keypoint caps must be positive");
        }
        if self.mpt_normal == 0 || self.mpt_boosted == 0 {
            return bad("mpt must be at least 1");
        }
        if self.resolutions.is_empty() || self.boosted_resolutions.is_empty() {
            return bad("resolution lists must not be empty");
        }
        for &(w, h) in self.resolutions.iter().chain(&self.boosted_resolutions) {
            if w < imgproc::MIN_DIM || h < imgproc::MIN_DIM || w > u16::MAX as u32 || h > u16::MAX as u32 {
                return bad("resolution out of range");
            }
        }
        if self.ransac.reproj_threshold.is_nan()
            || self.ransac.reproj_threshold <= 0.0
            || self.ransac.max_iterations == 0
        {
            return bad("ransac threshold and iterations must be positive");
        }
        if !(self.ransac.confidence > 0.0 && self.ransac.confidence < 1.0) {
            return bad("ransac confidence must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn canonical_dims(&self) -> (u32, u32) {
        self.resolutions[0]
    }

    fn metric(&self) -> Metric {
        match self.extractor {
            ExtractorKind::Sift => Metric::L2,
            ExtractorKind::Orb => Metric::Hamming,
        }
    }

    fn match_config(&self, cross_check: bool) -> MatchConfig {
        MatchConfig {
            drt: self.drt,
            cross_check,
            edge_exclusion_px: self.edge_exclusion_px,
            metric: self.metric(),
        }
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or inline when
/// `threads == 0`.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Metadata {
    pub manufacturer: String,
    pub batch_code: String,
    pub category: String,
    /// Unix seconds; filled at enrollment when zero.
    pub enrolled_at: u64,
    pub extra: BTreeMap<String, String>,
}

impl Metadata {
    /// Sets a field from a `key=value` style pair; unknown keys go to `extra`.
    pub fn set(&mut self, key: &str, value: &str) {
        match key {
            "manufacturer" => self.manufacturer = value.to_string(),
            "batch_code" | "batch" => self.batch_code = value.to_string(),
            "category" => self.category = value.to_string(),
            "enrolled_at" => match value.parse() {
                Ok(v) => self.enrolled_at = v,
                Err(_) => {
                    self.extra.insert(key.to_string(), value.to_string());
                }
            },
            _ => {
                self.extra.insert(key.to_string(), value.to_string());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryRecord {
    pub id: String,
    pub metadata: Metadata,
    /// Features at the canonical resolution, edge-annotated.
    pub features: FeatureSet,
    /// Keypoint cap the features were extracted with.
    pub feature_cap: usize,
    /// Canonical enrolled image, kept for re-extraction on the boosted path.
    pub image: GrayImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyResult {
    pub good_matches: usize,
    pub inliers: usize,
    pub skipped_homography: bool,
    pub verdict: Verdict,
    pub score: usize,
    /// Query-to-gallery homography in the common frame.
    pub homography: Option<Homography>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub score: usize,
    pub inliers: usize,
    pub good_matches: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub ranked: Vec<SearchHit>,
    pub top1: Option<SearchHit>,
    pub homography_invocations: usize,
}

/// Resizes to `dims`, annotates edges from the resized image, optionally
/// equalizes, then extracts.
///
/// The edge map is taken before equalization: stretching a dim capture would
/// otherwise turn ordinary texture into edges.
pub fn extract_at(
    img: &GrayImage,
    dims: (u32, u32),
    cap: usize,
    equalize: bool,
    cfg: &PipelineConfig,
) -> Result<FeatureSet> {
    let resized = imgproc::resize(img, dims)?;
    let edges = imgproc::edge_map(&resized, cfg.edge_threshold);
    let work = if equalize {
        imgproc::equalize_brightness(&resized)
    } else {
        resized
    };
    features::extract(cfg.extractor, &work, cap, &edges)
}

/// Quality gate on the image at the canonical resolution, or at its own
/// resolution when that is smaller: enlarging adds no detail but lowers the
/// Laplacian variance, so a sharp close-up would otherwise read as blurred.
pub fn input_quality(img: &GrayImage, cfg: &PipelineConfig) -> Result<QualityReport> {
    img.ensure_min_dims()?;
    let (cw, ch) = cfg.canonical_dims();
    let (w, h) = img.dims();
    if w as u64 * h as u64 <= cw as u64 * ch as u64 {
        return Ok(imgproc::quality_gate(img, &cfg.quality));
    }
    Ok(imgproc::quality_gate(&imgproc::resize(img, (cw, ch))?, &cfg.quality))
}

fn check_query(img: &GrayImage, cfg: &PipelineConfig) -> Result<()> {
    img.ensure_min_dims()?;
    if cfg.query_quality_check {
        let report = input_quality(img, cfg)?;
        if !report.pass {
            return Err(Error::RejectedLowQuality(report));
        }
    }
    Ok(())
}

/// Query features at the canonical resolution with the normal-path settings.
pub fn query_features(img: &GrayImage, cfg: &PipelineConfig) -> Result<FeatureSet> {
    extract_at(img, cfg.canonical_dims(), cfg.keypoint_cap, cfg.equalize, cfg)
}

fn id_seed(root: u64, id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    derive_seed(root, u64::from_le_bytes(d[..8].try_into().unwrap()))
}

pub fn ransac_config(cfg: &PipelineConfig, id: &str) -> RansacConfig {
    RansacConfig {
        seed: id_seed(cfg.seed, id),
        ..cfg.ransac
    }
}

/// Matching that treats a gallery with fewer than two descriptors as having
/// no matches.
fn match_or_empty(q: &FeatureSet, g: &FeatureSet, mc: &MatchConfig) -> Result<MatchSet> {
    match match_descriptors(q, g, mc) {
        Err(Error::InsufficientGallery(_)) => Ok(MatchSet::default()),
        r => r,
    }
}

/// Scores already-matched and edge-filtered correspondences under the skip
/// rule.
fn decide(src: &[Point], dst: &[Point], mpt: usize, ransac: &RansacConfig) -> VerifyResult {
    let good = src.len();
    if good < mpt {
        return VerifyResult {
            good_matches: good,
            inliers: 0,
            skipped_homography: true,
            verdict: Verdict::NoMatch,
            score: good,
            homography: None,
        };
    }
    let geom: GeomResult = ransac_points(src, dst, ransac);
    VerifyResult {
        good_matches: good,
        inliers: geom.inliers,
        skipped_homography: false,
        verdict: verdict(geom.inliers, mpt),
        score: geom.inliers,
        homography: geom.hom,
    }
}

fn endpoints(ms: &MatchSet, q: &FeatureSet, g: &FeatureSet) -> (Vec<Point>, Vec<Point>) {
    ms.matches
        .iter()
        .map(|m| {
            let a = &q.keypoints[m.query_idx];
            let b = &g.keypoints[m.gallery_idx];
            ((a.x, a.y), (b.x, b.y))
        })
        .unzip()
}

/// Verification on precomputed features: match, suppress, edge-exclude,
/// then RANSAC unless the skip rule applies.
pub fn verify_features(
    q: &FeatureSet,
    g: &FeatureSet,
    mpt: usize,
    cross_check: bool,
    ransac: &RansacConfig,
    cfg: &PipelineConfig,
) -> Result<VerifyResult> {
    let ms = match_or_empty(q, g, &cfg.match_config(cross_check))?;
    let ms = if cfg.edge_exclusion {
        exclude_edge_matches(&ms, q, g, cfg.edge_exclusion_px)
    } else {
        ms
    };
    let (src, dst) = endpoints(&ms, q, g);
    Ok(decide(&src, &dst, mpt, ransac))
}

impl GalleryRecord {
    /// Features for the requested extraction settings, reusing the stored
    /// set when it is equivalent.
    pub fn features_for(
        &self,
        dims: (u32, u32),
        cap: usize,
        equalize: bool,
        cfg: &PipelineConfig,
    ) -> Result<Cow<'_, FeatureSet>> {
        let stored = &self.features;
        let reusable = dims == self.image.dims()
            && !equalize
            && stored.extractor == cfg.extractor
            && (cap <= self.feature_cap || stored.len() < self.feature_cap);
        if reusable {
            if stored.len() <= cap {
                Ok(Cow::Borrowed(stored))
            } else {
                Ok(Cow::Owned(stored.truncated(cap)))
            }
        } else {
            extract_at(&self.image, dims, cap, equalize, cfg).map(Cow::Owned)
        }
    }
}

/// Multi-resolution verification. Matches from every resolution are mapped
/// into the frame of the first resolution and merged before edge exclusion
/// and RANSAC.
#[allow(clippy::too_many_arguments)]
fn verify_multi(
    query: &GrayImage,
    record: &GalleryRecord,
    resolutions: &[(u32, u32)],
    cap: usize,
    equalize: bool,
    cross_check: bool,
    mpt: usize,
    cfg: &PipelineConfig,
) -> Result<VerifyResult> {
    let ransac = ransac_config(cfg, &record.id);
    if resolutions.len() == 1 {
        let q = extract_at(query, resolutions[0], cap, equalize, cfg)?;
        let g = record.features_for(resolutions[0], cap, equalize, cfg)?;
        return verify_features(&q, &g, mpt, cross_check, &ransac, cfg);
    }

    let common = resolutions[0];
    let mc = cfg.match_config(cross_check);
    // (d1, resolution, query index, query point, gallery point, keep after edge rule)
    let mut pool: Vec<(f64, usize, usize, Point, Point, bool)> = Vec::new();
    for (ri, &dims) in resolutions.iter().enumerate() {
        let q = extract_at(query, dims, cap, equalize, cfg)?;
        let g = record.features_for(dims, cap, equalize, cfg)?;
        let ms = match_or_empty(&q, &g, &mc)?;
        let qc = features::rescale_keypoints(&q, dims, common);
        let gc = features::rescale_keypoints(&g, dims, common);
        for m in &ms.matches {
            let a = &qc.keypoints[m.query_idx];
            let b = &gc.keypoints[m.gallery_idx];
            let keep =
                !cfg.edge_exclusion || (a.edge_dist > cfg.edge_exclusion_px && b.edge_dist > cfg.edge_exclusion_px);
            pool.push((m.d1, ri, m.query_idx, (a.x, a.y), (b.x, b.y), keep));
        }
    }
    let merged = merge_matches(pool);
    let (src, dst): (Vec<Point>, Vec<Point>) = merged.into_iter().filter(|m| m.5).map(|m| (m.3, m.4)).unzip();
    Ok(decide(&src, &dst, mpt, &ransac))
}

/// Radius in common-frame pixels within which two correspondences are taken
/// to be the same physical point.
const MERGE_RADIUS: f64 = 1.5;

/// Greedy dedup in ascending `d1` order: a correspondence is dropped when an
/// accepted one already sits within [`MERGE_RADIUS`] on the query side or on
/// the gallery side.
fn merge_matches(
    mut pool: Vec<(f64, usize, usize, Point, Point, bool)>,
) -> Vec<(f64, usize, usize, Point, Point, bool)> {
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let near = |p: Point, r: Point| (p.0 - r.0).powi(2) + (p.1 - r.1).powi(2) <= MERGE_RADIUS * MERGE_RADIUS;
    let mut out: Vec<(f64, usize, usize, Point, Point, bool)> = Vec::with_capacity(pool.len());
    for m in pool {
        if !out.iter().any(|k| near(k.3, m.3) || near(k.4, m.4)) {
            out.push(m);
        }
    }
    out
}

pub fn verify_pair(query: &GrayImage, record: &GalleryRecord, cfg: &PipelineConfig) -> Result<VerifyResult> {
    cfg.validate()?;
    check_query(query, cfg)?;
    let res = cfg.resolutions.clone();
    with_threads(cfg.threads, || {
        verify_multi(
            query,
            record,
            &res,
            cfg.keypoint_cap,
            cfg.equalize,
            cfg.cross_check,
            cfg.mpt_normal,
            cfg,
        )
    })?
}

/// Hard-input path: several resolutions, a larger keypoint budget,
/// equalization and cross-check, judged against the boosted MPT. The query
/// quality gate is not applied.
pub fn verify_pair_boosted(query: &GrayImage, record: &GalleryRecord, cfg: &PipelineConfig) -> Result<VerifyResult> {
    cfg.validate()?;
    query.ensure_min_dims()?;
    let res = cfg.boosted_resolutions.clone();
    with_threads(cfg.threads, || {
        verify_multi(query, record, &res, cfg.boosted_cap, true, true, cfg.mpt_boosted, cfg)
    })?
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gallery {
    records: Vec<GalleryRecord>,
    next_counter: u64,
    salt: u64,
}

impl Gallery {
    pub fn new(seed: u64) -> Self {
        Self {
            records: Vec::new(),
            next_counter: 0,
            salt: derive_seed(seed, 0x1d5),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[GalleryRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&GalleryRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn require(&self, id: &str) -> Result<&GalleryRecord> {
        self.get(id).ok_or_else(|| Error::NotFound(id.to_string()))
    }

    /// 16 hex digits: allocation counter in the high half, salt in the low.
    fn allocate_id(&mut self) -> String {
        let c = self.next_counter;
        self.next_counter += 1;
        format!("{:08x}{:08x}", c, derive_seed(self.salt, c) & 0xffff_ffff)
    }

    /// Gates, extracts and stores a new record. Every call allocates a new id.
    pub fn enroll(&mut self, img: &GrayImage, metadata: Metadata, cfg: &PipelineConfig) -> Result<&GalleryRecord> {
        cfg.validate()?;
        img.ensure_min_dims()?;
        let report = input_quality(img, cfg)?;
        if !report.pass {
            return Err(Error::RejectedLowQuality(report));
        }
        let canon = imgproc::resize(img, cfg.canonical_dims())?;
        let features = with_threads(cfg.threads, || {
            extract_at(&canon, canon.dims(), cfg.keypoint_cap, false, cfg)
        })??;
        if features.is_empty() {
            return Err(Error::ExtractionFailed("no keypoints survived".into()));
        }
        let mut metadata = metadata;
        if metadata.enrolled_at == 0 {
            metadata.enrolled_at = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
        }
        let id = self.allocate_id();
        self.records.push(GalleryRecord {
            id,
            metadata,
            features,
            feature_cap: cfg.keypoint_cap,
            image: canon,
        });
        Ok(self.records.last().unwrap())
    }

    /// Adds a prebuilt record, e.g. from a benchmark with its own ids.
    pub fn insert(&mut self, record: GalleryRecord) -> Result<()> {
        if self.get(&record.id).is_some() {
            return Err(Error::StoreError(format!("duplicate id {}", record.id)));
        }
        if record.features.is_empty() {
            return Err(Error::StoreError(format!("record {} has no features", record.id)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_gallery(self, dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        load_gallery(dir)
    }
}

/// One candidate's score under a given edge-exclusion setting.
fn score_candidate(
    ms: &MatchSet,
    q: &FeatureSet,
    g: &FeatureSet,
    edge_exclusion: bool,
    ransac: &RansacConfig,
    cfg: &PipelineConfig,
) -> VerifyResult {
    let filtered;
    let ms = if edge_exclusion {
        filtered = exclude_edge_matches(ms, q, g, cfg.edge_exclusion_px);
        &filtered
    } else {
        ms
    };
    let (src, dst) = endpoints(ms, q, g);
    decide(&src, &dst, cfg.mpt_normal, ransac)
}

fn rank(gallery: &Gallery, scores: &[VerifyResult], k: usize) -> SearchResult {
    let mut ranked: Vec<SearchHit> = gallery
        .records
        .iter()
        .zip(scores)
        .map(|(r, s)| SearchHit {
            id: r.id.clone(),
            score: s.score,
            inliers: s.inliers,
            good_matches: s.good_matches,
        })
        .collect();
    ranked.sort_by(|a, b| b.score.cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    ranked.truncate(k);
    SearchResult {
        top1: ranked.first().cloned(),
        ranked,
        homography_invocations: scores.iter().filter(|s| !s.skipped_homography).count(),
    }
}

/// Searches with precomputed query features, once per edge-exclusion mode in
/// `modes`, sharing the descriptor matching between modes. Records are
/// scored in parallel on the current pool; the result does not depend on
/// the worker count.
pub fn search_features_modes(
    q: &FeatureSet,
    gallery: &Gallery,
    cfg: &PipelineConfig,
    k: usize,
    modes: &[bool],
) -> Result<Vec<SearchResult>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mc = cfg.match_config(cfg.cross_check);
    let per_record: Vec<Vec<VerifyResult>> = gallery
        .records
        .par_iter()
        .map(|rec| {
            let g = rec.features_for(cfg.canonical_dims(), cfg.keypoint_cap, cfg.equalize, cfg)?;
            let ms = match_or_empty(q, &g, &mc)?;
            let ransac = ransac_config(cfg, &rec.id);
            Ok(modes
                .iter()
                .map(|&on| score_candidate(&ms, q, &g, on, &ransac, cfg))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..modes.len())
        .map(|mi| {
            let scores: Vec<VerifyResult> = per_record.iter().map(|v| v[mi]).collect();
            rank(gallery, &scores, k)
        })
        .collect())
}

pub fn search_features(q: &FeatureSet, gallery: &Gallery, cfg: &PipelineConfig, k: usize) -> Result<SearchResult> {
    Ok(search_features_modes(q, gallery, cfg, k, &[cfg.edge_exclusion])?.remove(0))
}

/// Top-`k` search over the gallery. Every record is matched; RANSAC runs only
/// for records whose edge-filtered good-match count reaches the normal MPT.
pub fn search(query: &GrayImage, gallery: &Gallery, cfg: &PipelineConfig, k: usize) -> Result<SearchResult> {
    cfg.validate()?;
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    check_query(query, cfg)?;
    with_threads(cfg.threads, || {
        let q = query_features(query, cfg)?;
        search_features(&q, gallery, cfg, k)
    })?
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    format_version: u32,
    next_counter: u64,
    salt: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    metadata: Metadata,
    feature_cap: usize,
    features: String,
    digest: String,
    image: String,
    image_digest: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::StoreError(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::StoreError(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Writes the gallery directory. Feature and image files go first, the
/// manifest is replaced last, so readers never see a manifest that points
/// at missing files.
pub fn save_gallery(gallery: &Gallery, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::StoreError(format!("{}: {e}", dir.display())))?;
    let mut manifest = String::new();
    for r in &gallery.records {
        let fbytes = write_feature_set(&r.features);
        let ibytes = r.image.encode_png()?;
        let fname = format!("{}.tifx", r.id);
        let iname = format!("{}.png", r.id);
        write_atomic(&dir.join(&fname), &fbytes)?;
        write_atomic(&dir.join(&iname), &ibytes)?;
        let line = ManifestLine {
            id: r.id.clone(),
            metadata: r.metadata.clone(),
            feature_cap: r.feature_cap,
            features: fname,
            digest: sha256_hex(&fbytes),
            image: iname,
            image_digest: sha256_hex(&ibytes),
        };
        manifest.push_str(&serde_json::to_string(&line).expect("manifest line serializes"));
        manifest.push('\n');
    }
    let header = StoreHeader {
        format_version: STORE_VERSION,
        next_counter: gallery.next_counter,
        salt: gallery.salt,
    };
    write_atomic(
        &dir.join("store.json"),
        serde_json::to_string(&header).expect("header serializes").as_bytes(),
    )?;
    write_atomic(&dir.join("manifest.jsonl"), manifest.as_bytes())
}

fn read_checked(dir: &Path, name: &str, digest: &str) -> Result<Vec<u8>> {
    if name.contains('/') || name.contains('\\') || name.starts_with('.') {
        return Err(Error::CorruptStore(format!("bad file name {name}")));
    }
    let bytes = std::fs::read(dir.join(name)).map_err(|e| Error::CorruptStore(format!("{name}: {e}")))?;
    if sha256_hex(&bytes) != digest {
        return Err(Error::CorruptStore(format!("{name}: digest mismatch")));
    }
    Ok(bytes)
}

/// Loads a gallery directory, verifying every digest. Any inconsistency
/// fails the whole load.
pub fn load_gallery(dir: impl AsRef<Path>) -> Result<Gallery> {
    let dir = dir.as_ref();
    let header_text = std::fs::read_to_string(dir.join("store.json"))
        .map_err(|e| Error::StoreError(format!("{}: {e}", dir.join("store.json").display())))?;
    let header: StoreHeader =
        serde_json::from_str(&header_text).map_err(|e| Error::CorruptStore(format!("store.json: {e}")))?;
    if header.format_version != STORE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: header.format_version,
            expected: STORE_VERSION,
        });
    }
    let manifest = std::fs::read_to_string(dir.join("manifest.jsonl"))
        .map_err(|e| Error::CorruptStore(format!("manifest.jsonl: {e}")))?;
    let mut gallery = Gallery {
        records: Vec::new(),
        next_counter: header.next_counter,
        salt: header.salt,
    };
    for (n, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine =
            serde_json::from_str(line).map_err(|e| Error::CorruptStore(format!("manifest line {}: {e}", n + 1)))?;
        let features = read_feature_set(&read_checked(dir, &m.features, &m.digest)?)?;
        let image = imgproc::decode(&read_checked(dir, &m.image, &m.image_digest)?)
            .map_err(|e| Error::CorruptStore(format!("{}: {e}", m.image)))?;
        gallery
            .insert(GalleryRecord {
                id: m.id,
                metadata: m.metadata,
                features,
                feature_cap: m.feature_cap,
                image,
            })
            .map_err(|e| Error::CorruptStore(e.to_string()))?;
    }
    Ok(gallery)
}
