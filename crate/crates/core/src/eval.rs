//! Verification metrics, parameter sweeps, search evaluation and report
//! rendering over `synth` benchmarks.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::geometry::Verdict;
use crate::imgproc;
use crate::pipeline::{
    self, search_features_modes, verify_features, with_threads, Gallery, GalleryRecord, Metadata, PipelineConfig,
};
use crate::synth::{Benchmark, Role};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationMetrics {
    pub accuracy: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl VerificationMetrics {
    /// Exact counts from `(label, predicted match)` pairs.
    pub fn from_outcomes(outcomes: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut m = Self::default();
        for (label, predicted) in outcomes {
            match (label, predicted) {
                (true, true) => m.tp += 1,
                (true, false) => m.fn_ += 1,
                (false, true) => m.fp += 1,
                (false, false) => m.tn += 1,
            }
        }
        m.n_pos = m.tp + m.fn_;
        m.n_neg = m.tn + m.fp;
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        m.accuracy = ratio(m.tp + m.tn, m.n_pos + m.n_neg);
        m.tpr = ratio(m.tp, m.n_pos);
        m.fpr = ratio(m.fp, m.n_neg);
        m
    }
}

/// Per-pair verdict log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub query: String,
    pub gallery: String,
    pub label: bool,
    pub good_matches: usize,
    pub inliers: usize,
    pub skipped_homography: bool,
    /// Query rejected by the quality gate; counted as a non-match.
    pub rejected: bool,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRun {
    pub metrics: VerificationMetrics,
    pub outcomes: Vec<PairOutcome>,
}

/// Canonical-resolution features for every benchmark image, extracted once
/// at the largest budget needed. Smaller budgets are served by truncation,
/// which yields exactly what a fresh extraction at that budget would.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    cap: usize,
    equalize: bool,
    feats: BTreeMap<String, FeatureSet>,
    /// Query ids that fail the quality gate.
    rejected: BTreeMap<String, bool>,
}

impl FeatureCache {
    pub fn build(bench: &Benchmark, cap: usize, cfg: &PipelineConfig) -> Result<Self> {
        let ids: Vec<(&String, Role)> = bench.manifest.images().map(|e| (&e.id, e.role)).collect();
        let canon = cfg.canonical_dims();
        let built: Vec<(String, FeatureSet, bool)> = with_threads(cfg.threads, || {
            ids.par_iter()
                .map(|&(id, role)| {
                    let img = bench.image(id)?;
                    let fs = pipeline::extract_at(img, canon, cap, cfg.equalize, cfg)?;
                    let rejected = role == Role::Query && !pipeline::input_quality(img, cfg)?.pass;
                    Ok((id.clone(), fs, rejected))
                })
                .collect::<Result<Vec<_>>>()
        })??;
        let mut feats = BTreeMap::new();
        let mut rejected = BTreeMap::new();
        for (id, fs, r) in built {
            rejected.insert(id.clone(), r);
            feats.insert(id, fs);
        }
        Ok(Self {
            cap,
            equalize: cfg.equalize,
            feats,
            rejected,
        })
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn get(&self, id: &str, cap: usize) -> Result<Cow<'_, FeatureSet>> {
        if cap > self.cap {
            return Err(Error::InvalidConfig(format!(
                "cache holds {} keypoints per image, {cap} requested",
                self.cap
            )));
        }
        let fs = self
            .feats
            .get(id)
            .ok_or_else(|| Error::ManifestError(format!("no features for {id}")))?;
        Ok(if fs.len() > cap {
            Cow::Owned(fs.truncated(cap))
        } else {
            Cow::Borrowed(fs)
        })
    }

    fn rejected(&self, id: &str) -> bool {
        self.rejected.get(id).copied().unwrap_or(false)
    }

    fn check(&self, cfg: &PipelineConfig) -> Result<()> {
        if cfg.keypoint_cap > self.cap || cfg.equalize != self.equalize {
            return Err(Error::InvalidConfig("feature cache does not cover this config".into()));
        }
        Ok(())
    }
}

/// Verifies every pair of the manifest with the normal path.
pub fn run_verification(bench: &Benchmark, cfg: &PipelineConfig) -> Result<VerificationRun> {
    cfg.validate()?;
    let cache = FeatureCache::build(bench, cfg.keypoint_cap, cfg)?;
    run_verification_cached(bench, &cache, cfg)
}

pub fn run_verification_cached(
    bench: &Benchmark,
    cache: &FeatureCache,
    cfg: &PipelineConfig,
) -> Result<VerificationRun> {
    cfg.validate()?;
    cache.check(cfg)?;
    bench.manifest.check()?;
    let pairs: Vec<_> = bench.manifest.pairs().collect();
    let outcomes: Vec<PairOutcome> = with_threads(cfg.threads, || {
        pairs
            .par_iter()
            .map(|p| {
                if cfg.query_quality_check && cache.rejected(&p.query) {
                    return Ok(PairOutcome {
                        query: p.query.clone(),
                        gallery: p.gallery.clone(),
                        label: p.label,
                        good_matches: 0,
                        inliers: 0,
                        skipped_homography: true,
                        rejected: true,
                        verdict: Verdict::NoMatch,
                    });
                }
                let q = cache.get(&p.query, cfg.keypoint_cap)?;
                let g = cache.get(&p.gallery, cfg.keypoint_cap)?;
                let ransac = pipeline::ransac_config(cfg, &p.gallery);
                let r = verify_features(&q, &g, cfg.mpt_normal, cfg.cross_check, &ransac, cfg)?;
                Ok(PairOutcome {
                    query: p.query.clone(),
                    gallery: p.gallery.clone(),
                    label: p.label,
                    good_matches: r.good_matches,
                    inliers: r.inliers,
                    skipped_homography: r.skipped_homography,
                    rejected: false,
                    verdict: r.verdict,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let metrics = VerificationMetrics::from_outcomes(outcomes.iter().map(|o| (o.label, o.verdict == Verdict::Match)));
    Ok(VerificationRun { metrics, outcomes })
}

/// Gallery records for the benchmark's gallery images, keyed by manifest id,
/// so that verification of record `g` and pair `(q, g)` agree exactly.
pub fn benchmark_record(bench: &Benchmark, id: &str, cfg: &PipelineConfig) -> Result<GalleryRecord> {
    let img = imgproc::resize(bench.image(id)?, cfg.canonical_dims())?;
    let features = pipeline::extract_at(&img, img.dims(), cfg.keypoint_cap, false, cfg)?;
    Ok(GalleryRecord {
        id: id.to_string(),
        metadata: Metadata::default(),
        features,
        feature_cap: cfg.keypoint_cap,
        image: img,
    })
}

/// Runs both the normal and the boosted path on every pair; no quality gate.
pub fn run_boosted_comparison(bench: &Benchmark, cfg: &PipelineConfig) -> Result<(VerificationRun, VerificationRun)> {
    cfg.validate()?;
    let ungated = PipelineConfig {
        query_quality_check: false,
        threads: 0,
        ..cfg.clone()
    };
    let pairs: Vec<_> = bench.manifest.pairs().collect();
    with_threads(cfg.threads, || {
        let records: BTreeMap<String, GalleryRecord> = bench
            .manifest
            .gallery()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|e| Ok((e.id.clone(), benchmark_record(bench, &e.id, &ungated)?)))
            .collect::<Result<_>>()?;
        let both: Vec<(PairOutcome, PairOutcome)> = pairs
            .par_iter()
            .map(|p| {
                let q = bench.image(&p.query)?;
                let rec = &records[&p.gallery];
                let n = pipeline::verify_pair(q, rec, &ungated)?;
                let b = pipeline::verify_pair_boosted(q, rec, &ungated)?;
                let mk = |r: pipeline::VerifyResult| PairOutcome {
                    query: p.query.clone(),
                    gallery: p.gallery.clone(),
                    label: p.label,
                    good_matches: r.good_matches,
                    inliers: r.inliers,
                    skipped_homography: r.skipped_homography,
                    rejected: false,
                    verdict: r.verdict,
                };
                Ok((mk(n), mk(b)))
            })
            .collect::<Result<_>>()?;
        let (normal, boosted): (Vec<_>, Vec<_>) = both.into_iter().unzip();
        let run = |o: Vec<PairOutcome>| VerificationRun {
            metrics: VerificationMetrics::from_outcomes(o.iter().map(|o| (o.label, o.verdict == Verdict::Match))),
            outcomes: o,
        };
        Ok((run(normal), run(boosted)))
    })?
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "DRT")]
    Drt,
    #[serde(rename = "keypoints")]
    Keypoints,
    #[serde(rename = "MPT")]
    Mpt,
}

impl Axis {
    pub fn label(self) -> &'static str {
        match self {
            Axis::Drt => "DRT",
            Axis::Keypoints => "keypoints",
            Axis::Mpt => "MPT",
        }
    }

    fn format_value(self, v: f64) -> String {
        match self {
            Axis::Drt => format!("{v:.2}"),
            Axis::Keypoints | Axis::Mpt => format!("{}", v as u64),
        }
    }

    fn apply(self, cfg: &PipelineConfig, v: f64) -> Result<PipelineConfig> {
        let mut c = cfg.clone();
        match self {
            Axis::Drt => c.drt = v,
            Axis::Keypoints | Axis::Mpt => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "{} value {v} is not a positive integer",
                        self.label()
                    )));
                }
                if self == Axis::Keypoints {
                    c.keypoint_cap = v as usize;
                } else {
                    c.mpt_normal = v as usize;
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "drt" => Ok(Axis::Drt),
            "keypoints" | "kp" => Ok(Axis::Keypoints),
            "mpt" => Ok(Axis::Mpt),
            other => Err(Error::InvalidConfig(format!("unknown sweep axis {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub metrics: VerificationMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: Axis,
    pub points: Vec<SweepPoint>,
    pub config: PipelineConfig,
}

/// One full verification run per axis value, everything else fixed.
pub fn sweep(axis: Axis, values: &[f64], bench: &Benchmark, cfg: &PipelineConfig) -> Result<SweepReport> {
    if values.len() < 2 {
        return Err(Error::InvalidConfig("a sweep needs at least two values".into()));
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    let cfgs: Vec<PipelineConfig> = values.iter().map(|&v| axis.apply(cfg, v)).collect::<Result<_>>()?;
    let cap = cfgs.iter().map(|c| c.keypoint_cap).max().unwrap();
    let cache = FeatureCache::build(bench, cap, cfg)?;
    sweep_cached(axis, &values, bench, &cache, cfg)
}

pub fn sweep_cached(
    axis: Axis,
    values: &[f64],
    bench: &Benchmark,
    cache: &FeatureCache,
    cfg: &PipelineConfig,
) -> Result<SweepReport> {
    if values.len() < 2 {
        return Err(Error::InvalidConfig("a sweep needs at least two values".into()));
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let c = axis.apply(cfg, v)?;
        points.push(SweepPoint {
            value: v,
            metrics: run_verification_cached(bench, cache, &c)?.metrics,
        });
    }
    Ok(SweepReport {
        axis,
        points,
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchEval {
    pub edge_exclusion: bool,
    pub queries: usize,
    pub top1_accuracy: f64,
    pub mean_homography_invocations: f64,
    /// Median wall time of one full pass over the queries, seconds.
    pub wall_time_s: f64,
}

/// Gallery of all benchmark gallery images under their manifest ids.
pub fn benchmark_gallery(bench: &Benchmark, cache: &FeatureCache, cfg: &PipelineConfig) -> Result<Gallery> {
    let mut gallery = Gallery::new(cfg.seed);
    for e in bench.manifest.gallery() {
        let img = imgproc::resize(bench.image(&e.id)?, cfg.canonical_dims())?;
        gallery.insert(GalleryRecord {
            id: e.id.clone(),
            metadata: Metadata::default(),
            features: cache.get(&e.id, cfg.keypoint_cap)?.into_owned(),
            feature_cap: cfg.keypoint_cap,
            image: img,
        })?;
    }
    Ok(gallery)
}

/// Search evaluation for each edge-exclusion mode in `modes`; descriptor
/// matching is shared between modes, so the wall time covers all of them.
pub fn run_search_eval_modes(
    bench: &Benchmark,
    cache: &FeatureCache,
    cfg: &PipelineConfig,
    modes: &[bool],
    timing_runs: usize,
) -> Result<Vec<SearchEval>> {
    cfg.validate()?;
    cache.check(cfg)?;
    let gallery = benchmark_gallery(bench, cache, cfg)?;
    let queries: Vec<(&str, &str)> = bench
        .manifest
        .queries()
        .map(|q| (q.id.as_str(), q.source.as_deref().unwrap_or("")))
        .collect();
    let mut times = Vec::new();
    let mut tallies = vec![(0usize, 0usize); modes.len()];
    for run in 0..timing_runs.max(1) {
        let start = Instant::now();
        let mut t = vec![(0usize, 0usize); modes.len()];
        with_threads(cfg.threads, || -> Result<()> {
            for (qid, source) in &queries {
                let q = cache.get(qid, cfg.keypoint_cap)?;
                let results = search_features_modes(&q, &gallery, cfg, 1, modes)?;
                for (slot, r) in t.iter_mut().zip(results) {
                    slot.0 += r.top1.is_some_and(|h| h.id == *source) as usize;
                    slot.1 += r.homography_invocations;
                }
            }
            Ok(())
        })??;
        times.push(start.elapsed().as_secs_f64());
        if run == 0 {
            tallies = t;
        }
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let n = queries.len().max(1) as f64;
    Ok(modes
        .iter()
        .zip(tallies)
        .map(|(&on, (hits, inv))| SearchEval {
            edge_exclusion: on,
            queries: queries.len(),
            top1_accuracy: hits as f64 / n,
            mean_homography_invocations: inv as f64 / n,
            wall_time_s: median,
        })
        .collect())
}

pub fn run_search_eval(
    bench: &Benchmark,
    cfg: &PipelineConfig,
    edge_exclusion: bool,
    timing_runs: usize,
) -> Result<SearchEval> {
    let cache = FeatureCache::build(bench, cfg.keypoint_cap, cfg)?;
    Ok(run_search_eval_modes(bench, &cache, cfg, &[edge_exclusion], timing_runs)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(Error::InvalidConfig(format!("unknown report format {other}"))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 11] = [
    "axis", "value", "accuracy", "tpr", "fpr", "n_pos", "n_neg", "tp", "tn", "fp", "fn",
];

pub fn render_report(report: &SweepReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_COLUMNS).expect("in-memory csv");
            for p in &report.points {
                let m = &p.metrics;
                w.write_record([
                    report.axis.label().to_string(),
                    report.axis.format_value(p.value),
                    format!("{:.6}", m.accuracy),
                    format!("{:.6}", m.tpr),
                    format!("{:.6}", m.fpr),
                    m.n_pos.to_string(),
                    m.n_neg.to_string(),
                    m.tp.to_string(),
                    m.tn.to_string(),
                    m.fp.to_string(),
                    m.fn_.to_string(),
                ])
                .expect("in-memory csv");
            }
            String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
        }
        ReportFormat::Markdown => {
            let mut head = format!("| {} |", report.axis.label());
            let mut sep = "|---|".to_string();
            let mut row = "| Accuracy |".to_string();
            for p in &report.points {
                head.push_str(&format!(" {} |", report.axis.format_value(p.value)));
                sep.push_str("---|");
                row.push_str(&format!(" {:.2}% |", p.metrics.accuracy * 100.0));
            }
            if report.points.is_empty() {
                format!("{head}\n{sep}\n")
            } else {
                format!("{head}\n{sep}\n{row}\n")
            }
        }
    }
}

pub fn emit_report(report: &SweepReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, render_report(report, format))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting() {
        let m = VerificationMetrics::from_outcomes([(true, true), (false, false)]);
        assert_eq!((m.accuracy, m.tpr, m.fpr), (1.0, 1.0, 0.0));
        let m = VerificationMetrics::from_outcomes([(true, false), (true, true), (false, true), (false, false)]);
        assert_eq!((m.tp, m.fn_, m.fp, m.tn), (1, 1, 1, 1));
        assert_eq!((m.accuracy, m.tpr, m.fpr), (0.5, 0.5, 0.5));
        let m = VerificationMetrics::from_outcomes([]);
        assert_eq!(m.accuracy, 0.0);
    }

    fn report(points: Vec<(f64, f64)>) -> SweepReport {
        SweepReport {
            axis: Axis::Drt,
            points: points
                .into_iter()
                .map(|(value, acc)| SweepPoint {
                    value,
                    metrics: VerificationMetrics {
                        accuracy: acc,
                        ..Default::default()
                    },
                })
                .collect(),
            config: PipelineConfig::default(),
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = report(vec![]);
        assert_eq!(
            render_report(&r, ReportFormat::Csv),
            format!("{}\n", CSV_COLUMNS.join(","))
        );
        assert_eq!(render_report(&r, ReportFormat::Markdown), "| DRT |\n|---|\n");
    }

    #[test]
    fn markdown_layout() {
        let r = report(vec![(0.6, 0.9679), (0.75, 0.9899)]);
        assert_eq!(
            render_report(&r, ReportFormat::Markdown),
            "| DRT | 0.60 | 0.75 |\n|---|---|---|\n| Accuracy | 96.79% | 98.99% |\n"
        );
    }

    #[test]
    fn csv_parses_back() {
        let r = report(vec![(0.6, 0.5), (0.7, 0.25)]);
        let text = render_report(&r, ReportFormat::Csv);
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), CSV_COLUMNS.to_vec());
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[1][1], "0.70");
        assert_eq!(rows[1][2].parse::<f64>().unwrap(), 0.25);
    }

    #[test]
    fn axis_parsing_and_values() {
        assert_eq!("drt".parse::<Axis>().unwrap(), Axis::Drt);
        assert_eq!("MPT".parse::<Axis>().unwrap(), Axis::Mpt);
        assert!("speed".parse::<Axis>().is_err());
        let c = PipelineConfig::default();
        assert_eq!(Axis::Keypoints.apply(&c, 400.0).unwrap().keypoint_cap, 400);
        assert!(Axis::Mpt.apply(&c, 2.5).is_err());
        assert!(Axis::Drt.apply(&c, 1.5).is_err());
    }
}
