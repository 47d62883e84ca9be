//! The `GLFT` binary tensor container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset | size      | field                                   |
//! |--------|-----------|-----------------------------------------|
//! | 0      | 4         | magic `b"GLFT"`                         |
//! | 4      | 2         | format version (`u16`, currently 1)     |
//! | 6      | 1         | dtype code (`0` = float32 LE)           |
//! | 7      | 1         | rank (`u8`, at most 6)                  |
//! | 8      | 4 * rank  | dims (`u32` each)                       |
//! | ..     | 4         | metadata length in bytes (`u32`)        |
//! | ..     | meta_len  | UTF-8 JSON object                       |
//! | ..     | 4 * prod  | row-major float32 payload               |

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GeolocError, Result};

pub const MAGIC: [u8; 4] = *b"GLFT";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32_LE: u8 = 0;
pub const MAX_RANK: usize = 6;

/// JSON metadata carried next to a tensor payload.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl TensorMeta {
    pub fn layer(name: impl Into<String>) -> Self {
        TensorMeta {
            layer: Some(name.into()),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub data: Vec<f32>,
    pub dims: Vec<usize>,
    pub meta: TensorMeta,
}

impl TensorRecord {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Size in bytes of the fixed header plus dims and metadata, excluding the payload.
pub fn header_len(rank: usize, meta_len: usize) -> usize {
    4 + 2 + 1 + 1 + 4 * rank + 4 + meta_len
}

pub fn encode_tensor(data: &[f32], dims: &[usize], meta: &TensorMeta) -> Result<Vec<u8>> {
    if dims.len() > MAX_RANK {
        return Err(GeolocError::Dimension(format!(
            "rank {} exceeds the maximum of {MAX_RANK}",
            dims.len()
        )));
    }
    let expected = checked_product(dims)?;
    if expected != data.len() {
        return Err(GeolocError::Dimension(format!(
            "dims {dims:?} describe {expected} values but the payload has {}",
            data.len()
        )));
    }
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| GeolocError::Format(format!("metadata serialization: {e}")))?;

    let mut out = Vec::with_capacity(header_len(dims.len(), meta_json.len()) + 4 * data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F32_LE);
    out.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d)
            .map_err(|_| GeolocError::Dimension(format!("dim {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    for v in data {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<TensorRecord> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(GeolocError::Format(format!(
            "bad magic {magic:02x?} at offset 0, expected \"GLFT\""
        )));
    }
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(GeolocError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let dtype = cur.take(1, "dtype")?[0];
    if dtype != DTYPE_F32_LE {
        return Err(GeolocError::Format(format!(
            "unknown dtype code {dtype} at offset 6"
        )));
    }
    let rank = cur.take(1, "rank")?[0] as usize;
    if rank > MAX_RANK {
        return Err(GeolocError::Format(format!(
            "rank {rank} at offset 7 exceeds {MAX_RANK}"
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u32::from_le_bytes(cur.take(4, "dims")?.try_into().unwrap()) as usize);
    }
    let meta_len = u32::from_le_bytes(cur.take(4, "metadata length")?.try_into().unwrap()) as usize;
    let meta_bytes = cur.take(meta_len, "metadata")?;
    let meta: TensorMeta = if meta_bytes.is_empty() {
        TensorMeta::default()
    } else {
        serde_json::from_slice(meta_bytes)
            .map_err(|e| GeolocError::Format(format!("metadata is not valid JSON: {e}")))?
    };
    let count = checked_product(&dims)?;
    let payload_start = cur.pos;
    let need = count
        .checked_mul(4)
        .ok_or_else(|| GeolocError::Format("payload size overflows".into()))?;
    let have = bytes.len() - payload_start;
    if have != need {
        return Err(GeolocError::Format(format!(
            "payload at bytes {payload_start}..{} holds {have} bytes, dims {dims:?} require {need} (expected end {})",
            bytes.len(),
            payload_start + need
        )));
    }
    let data = bytes[payload_start..]
        .chunks_exact(4)
        .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(TensorRecord { data, dims, meta })
}

pub fn write_tensor(
    path: impl AsRef<Path>,
    data: &[f32],
    dims: &[usize],
    meta: &TensorMeta,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(data, dims, meta)?;
    std::fs::write(path, bytes).map_err(|e| GeolocError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorRecord> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| GeolocError::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        GeolocError::Format(msg) => GeolocError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn checked_product(dims: &[usize]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| GeolocError::Dimension(format!("dims {dims:?} overflow")))
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(GeolocError::Format(format!(
                "truncated {what}: needed bytes {}..{} but file ends at {}",
                self.pos,
                self.pos + n,
                self.bytes.len()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_three_file_size() {
        let data = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bytes = encode_tensor(&data, &[2, 3], &TensorMeta::default()).unwrap();
        // "{}" metadata is two bytes.
        assert_eq!(bytes.len(), header_len(2, 2) + 24);
        assert_eq!(header_len(2, 2), 22);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode_tensor(&[1.0], &[1], &TensorMeta::default()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_tensor(&bytes), Err(GeolocError::Format(_))));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode_tensor(&[1.0], &[1], &TensorMeta::default()).unwrap();
        bytes[4] = 7;
        assert!(matches!(
            decode_tensor(&bytes),
            Err(GeolocError::UnsupportedVersion { found: 7, .. })
        ));
    }

    #[test]
    fn truncated_payload_reports_offsets() {
        let bytes = encode_tensor(&[1.0, 2.0, 3.0], &[3], &TensorMeta::default()).unwrap();
        let err = decode_tensor(&bytes[..bytes.len() - 3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("require 12"), "{msg}");
    }

    #[test]
    fn dim_mismatch_on_write() {
        assert!(matches!(
            encode_tensor(&[1.0, 2.0], &[3], &TensorMeta::default()),
            Err(GeolocError::Dimension(_))
        ));
        assert!(encode_tensor(&[1.0], &[1, 1, 1, 1, 1, 1, 1], &TensorMeta::default()).is_err());
    }

    #[test]
    fn metadata_survives() {
        let mut meta = TensorMeta {
            stride: Some(14),
            source_width: Some(518),
            source_height: Some(518),
            layer: Some("dense".into()),
            ..Default::default()
        };
        meta.extra.insert("model".into(), serde_json::json!("dinov2_vits14"));
        let bytes = encode_tensor(&[0.5; 4], &[1, 2, 2], &meta).unwrap();
        let rec = decode_tensor(&bytes).unwrap();
        assert_eq!(rec.meta, meta);
        assert_eq!(rec.dims, vec![1, 2, 2]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.glft");
        write_tensor(&path, &[1.5, -2.0], &[2], &TensorMeta::layer("x")).unwrap();
        let rec = read_tensor(&path).unwrap();
        assert_eq!(rec.data, vec![1.5, -2.0]);
        assert_eq!(rec.meta.layer.as_deref(), Some("x"));
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(bits in proptest::collection::vec(any::<u32>(), 0..64)) {
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let dims = [data.len()];
            let bytes = encode_tensor(&data, &dims, &TensorMeta::default()).unwrap();
            let rec = decode_tensor(&bytes).unwrap();
            let back: Vec<u32> = rec.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(back, bits);
            // Encoding is deterministic.
            prop_assert_eq!(bytes, encode_tensor(&data, &dims, &TensorMeta::default()).unwrap());
        }
    }
}
