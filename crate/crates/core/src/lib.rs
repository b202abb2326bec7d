//! Fine-grained texture identification.
//!
//! Two images of a stochastic surface texture (tea-brick faces, wood grain,
//! cork) are judged to show the same physical product when enough local
//! features agree under a single planar homography. The crate covers the
//! whole chain: preprocessing ([`imgproc`]), keypoint extraction
//! ([`features`]), ratio-test matching with edge exclusion ([`matching`]),
//! RANSAC verification ([`geometry`]), enrollment and gallery search
//! ([`pipeline`]), plus a procedural texture generator ([`synth`]) and a
//! benchmark harness ([`eval`]) for working without the proprietary photos.

pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod imgproc;
pub mod matching;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use features::{Descriptors, ExtractorKind, FeatureSet, Keypoint};
pub use geometry::{GeomResult, Homography, RansacConfig, Verdict};
pub use imgproc::{EdgeMap, GrayImage, QualityConfig, QualityReport};
pub use matching::{Match, MatchConfig, MatchSet, Metric};
pub use pipeline::{Gallery, GalleryRecord, Metadata, PipelineConfig, SearchHit, SearchResult, VerifyResult};
