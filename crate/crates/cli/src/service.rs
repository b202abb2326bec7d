//! Operations shared by the CLI and the HTTP service, so both surfaces
//! produce the same JSON for the same inputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use texid::imgproc::{self, GrayImage};
use texid::pipeline::{search, verify_pair, verify_pair_boosted};
use texid::{Gallery, Metadata, PipelineConfig, SearchResult, VerifyResult};

use crate::error::{ApiError, ErrorCode};

/// Largest accepted encoded image.
pub const MAX_IMAGE_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollResponse {
    pub id: String,
    pub keypoints: usize,
    pub gallery_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductResponse {
    pub id: String,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub gallery_size: usize,
}

pub fn decode_image(bytes: &[u8]) -> Result<GrayImage, ApiError> {
    if bytes.len() > MAX_IMAGE_BYTES {
        return Err(ApiError::new(
            ErrorCode::BadImage,
            format!("image is {} bytes, limit {MAX_IMAGE_BYTES}", bytes.len()),
        ));
    }
    Ok(imgproc::decode(bytes)?)
}

/// Loads the store in `dir`; a missing or empty directory is an empty
/// gallery salted with the configured seed.
pub fn open_gallery(dir: &Path, cfg: &PipelineConfig) -> Result<Gallery, ApiError> {
    let empty = match std::fs::read_dir(dir) {
        Ok(mut entries) => entries.next().is_none(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => true,
        Err(e) => return Err(ApiError::new(ErrorCode::Internal, format!("{}: {e}", dir.display()))),
    };
    if empty {
        return Ok(Gallery::new(cfg.seed));
    }
    Ok(Gallery::load(dir)?)
}

pub fn parse_metadata<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Metadata {
    let mut m = Metadata::default();
    for (k, v) in pairs {
        m.set(k, v);
    }
    m
}

/// Enrolls into `gallery` and persists it to `dir`.
pub fn enroll(
    gallery: &mut Gallery,
    dir: &Path,
    image: &[u8],
    metadata: Metadata,
    cfg: &PipelineConfig,
) -> Result<EnrollResponse, ApiError> {
    let img = decode_image(image)?;
    let rec = gallery.enroll(&img, metadata, cfg)?;
    let resp = EnrollResponse {
        id: rec.id.clone(),
        keypoints: rec.features.len(),
        gallery_size: 0,
    };
    gallery.save(dir)?;
    Ok(EnrollResponse {
        gallery_size: gallery.len(),
        ..resp
    })
}

pub fn verify(
    gallery: &Gallery,
    image: &[u8],
    id: &str,
    boost: bool,
    cfg: &PipelineConfig,
) -> Result<VerifyResult, ApiError> {
    let img = decode_image(image)?;
    let rec = gallery.require(id)?;
    let r = if boost {
        verify_pair_boosted(&img, rec, cfg)?
    } else {
        verify_pair(&img, rec, cfg)?
    };
    Ok(r)
}

pub fn search_gallery(
    gallery: &Gallery,
    image: &[u8],
    k: usize,
    cfg: &PipelineConfig,
) -> Result<SearchResult, ApiError> {
    if k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let img = decode_image(image)?;
    Ok(search(&img, gallery, cfg, k)?)
}

pub fn product(gallery: &Gallery, id: &str) -> Result<ProductResponse, ApiError> {
    let rec = gallery.require(id)?;
    Ok(ProductResponse {
        id: rec.id.clone(),
        metadata: rec.metadata.clone(),
    })
}

pub fn health(gallery: &Gallery) -> HealthResponse {
    HealthResponse {
        status: "ok".into(),
        gallery_size: gallery.len(),
    }
}
