//! TIFX binary feature format.
//!
//! ```text
//! "TIFX" | u16 version | u8 extractor | u8 descriptor kind | u32 count
//!        | u16 width | u16 height
//! count x { f32 x, y, scale, orientation, response; u8 edge_dist }
//! descriptor block: count x 128 f32 (Float128) or count x 4 u64 (Binary256)
//! ```
//!
//! Everything is little-endian.

use super::{Descriptors, ExtractorKind, FeatureSet, Keypoint, FLOAT_DESCRIPTOR_LEN};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TIFX";
pub const FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 4 + 2 + 2;
const KEYPOINT_LEN: usize = 5 * 4 + 1;

pub fn write_feature_set(fs: &FeatureSet) -> Vec<u8> {
    let n = fs.keypoints.len();
    let desc_len = match &fs.descriptors {
        Descriptors::Float128(_) => n * FLOAT_DESCRIPTOR_LEN * 4,
        Descriptors::Binary256(_) => n * 32,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + n * KEYPOINT_LEN + desc_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&fs.version.to_le_bytes());
    out.push(fs.extractor.id());
    out.push(fs.descriptors.kind_id());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(fs.source_dims.0 as u16).to_le_bytes());
    out.extend_from_slice(&(fs.source_dims.1 as u16).to_le_bytes());
    for kp in &fs.keypoints {
        for v in [kp.x, kp.y, kp.scale, kp.orientation, kp.response] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.push(kp.edge_dist);
    }
    match &fs.descriptors {
        Descriptors::Float128(v) => {
            for f in v {
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Descriptors::Binary256(v) => {
            for d in v {
                for w in d {
                    out.extend_from_slice(&w.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptStore(format!(
                "feature block truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_feature_set(buf: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptStore("bad magic".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version as u32,
            expected: FORMAT_VERSION as u32,
        });
    }
    let extractor =
        ExtractorKind::from_id(r.u8()?).ok_or_else(|| Error::CorruptStore("unknown extractor id".into()))?;
    let kind = r.u8()?;
    let n = r.u32()? as usize;
    let w = r.u16()? as u32;
    let h = r.u16()? as u32;

    let remaining = buf.len() - r.pos;
    let per = KEYPOINT_LEN
        + match kind {
            0 => FLOAT_DESCRIPTOR_LEN * 4,
            1 => 32,
            _ => return Err(Error::CorruptStore(format!("unknown descriptor kind {kind}"))),
        };
    if remaining != n * per {
        return Err(Error::CorruptStore(format!(
            "expected {} payload bytes for {n} features, found {remaining}",
            n * per
        )));
    }

    let mut keypoints = Vec::with_capacity(n);
    for _ in 0..n {
        let x = r.f32()? as f64;
        let y = r.f32()? as f64;
        let scale = r.f32()? as f64;
        let orientation = r.f32()? as f64;
        let response = r.f32()? as f64;
        let edge_dist = r.u8()?;
        keypoints.push(Keypoint {
            x,
            y,
            scale,
            orientation,
            response,
            edge_dist,
        });
    }
    let descriptors = if kind == 0 {
        let mut v = Vec::with_capacity(n * FLOAT_DESCRIPTOR_LEN);
        for _ in 0..n * FLOAT_DESCRIPTOR_LEN {
            v.push(r.f32()?);
        }
        Descriptors::Float128(v)
    } else {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push([r.u64()?, r.u64()?, r.u64()?, r.u64()?]);
        }
        Descriptors::Binary256(v)
    };
    Ok(FeatureSet {
        keypoints,
        descriptors,
        source_dims: (w, h),
        extractor,
        version,
    })
}
