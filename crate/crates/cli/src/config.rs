//! Flat key-value configuration files and flag overrides.
//!
//! A config file is TOML restricted to top-level `key = value` pairs whose
//! keys mirror `PipelineConfig` fields, with nested structs flattened:
//!
//! ```toml
//! drt = 0.7
//! keypoint_cap = 1000
//! ransac_reproj_threshold = 3.0
//! boosted_resolutions = [[448, 448], [672, 672]]
//! ```
//!
//! Precedence is flags, then file, then defaults.

use std::path::Path;

use texid::{ExtractorKind, PipelineConfig};
use toml::Value;

use crate::error::ApiError;

/// Values given as global command-line flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub drt: Option<f64>,
    pub keypoints: Option<usize>,
    pub mpt: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        if let Some(v) = self.drt {
            cfg.drt = v;
        }
        if let Some(v) = self.keypoints {
            cfg.keypoint_cap = v;
        }
        if let Some(v) = self.mpt {
            cfg.mpt_normal = v;
        }
    }
}

/// Defaults, overlaid with the file at `path` if any, then with `overrides`.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<PipelineConfig, ApiError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ApiError::bad_request(format!("config {}: {e}", path.display())))?;
        apply_text(&mut cfg, &text)?;
    }
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse(text: &str) -> Result<PipelineConfig, ApiError> {
    let mut cfg = PipelineConfig::default();
    apply_text(&mut cfg, text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_text(cfg: &mut PipelineConfig, text: &str) -> Result<(), ApiError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ApiError::bad_request(format!("config: {}", e.message())))?;
    for (key, value) in &table {
        set(cfg, key, value).map_err(|m| ApiError::bad_request(format!("config key {key}: {m}")))?;
    }
    Ok(())
}

fn set(cfg: &mut PipelineConfig, key: &str, v: &Value) -> Result<(), String> {
    match key {
        "extractor" => cfg.extractor = string(v)?.parse::<ExtractorKind>().map_err(|e| e.to_string())?,
        "keypoint_cap" => cfg.keypoint_cap = uint(v)?,
        "drt" => cfg.drt = float(v)?,
        "mpt_normal" => cfg.mpt_normal = uint(v)?,
        "mpt_boosted" => cfg.mpt_boosted = uint(v)?,
        "edge_exclusion" => cfg.edge_exclusion = boolean(v)?,
        "edge_exclusion_px" => cfg.edge_exclusion_px = uint::<u8>(v)?,
        "edge_threshold" => cfg.edge_threshold = float(v)? as f32,
        "resolutions" => cfg.resolutions = dims_list(v)?,
        "boosted_resolutions" => cfg.boosted_resolutions = dims_list(v)?,
        "boosted_cap" => cfg.boosted_cap = uint(v)?,
        "equalize" => cfg.equalize = boolean(v)?,
        "cross_check" => cfg.cross_check = boolean(v)?,
        "quality_min_mean_luma" => cfg.quality.min_mean_luma = float(v)?,
        "quality_max_mean_luma" => cfg.quality.max_mean_luma = float(v)?,
        "quality_min_sharpness" => cfg.quality.min_sharpness = float(v)?,
        "query_quality_check" => cfg.query_quality_check = boolean(v)?,
        "ransac_reproj_threshold" => cfg.ransac.reproj_threshold = float(v)?,
        "ransac_max_iterations" => cfg.ransac.max_iterations = uint(v)?,
        "ransac_confidence" => cfg.ransac.confidence = float(v)?,
        "seed" => cfg.seed = uint(v)?,
        "threads" => cfg.threads = uint(v)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

fn string(v: &Value) -> Result<&str, String> {
    v.as_str().ok_or_else(|| "expected a string".into())
}

fn boolean(v: &Value) -> Result<bool, String> {
    v.as_bool().ok_or_else(|| "expected true or false".into())
}

fn float(v: &Value) -> Result<f64, String> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err("expected a number".into()),
    }
}

fn uint<T: TryFrom<i64>>(v: &Value) -> Result<T, String> {
    let i = v.as_integer().ok_or("expected an integer")?;
    T::try_from(i).map_err(|_| format!("{i} out of range"))
}

fn dims_list(v: &Value) -> Result<Vec<(u32, u32)>, String> {
    let items = v.as_array().ok_or("expected a list of [width, height]")?;
    items
        .iter()
        .map(|item| match item.as_array().map(Vec::as_slice) {
            Some([w, h]) => Ok((uint(w)?, uint(h)?)),
            _ => Err("expected [width, height]".to_string()),
        })
        .collect()
}
