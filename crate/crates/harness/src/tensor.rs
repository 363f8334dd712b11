//! Tensor files: the 8-byte magic `MCATTN01`, a little-endian `u32` header
//! length, a UTF-8 JSON header and a raw little-endian `f64` payload.

use std::fs;
use std::path::Path;

use lara_core::RealMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"MCATTN01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 2],
    dtype: String,
    order: String,
}

pub fn encode(m: &RealMatrix) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        dims: [m.rows(), m.cols()],
        dtype: "f64".into(),
        order: "row-major".into(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + 8 * m.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Decodes a tensor; errors carry the byte offset where parsing failed.
pub fn decode(bytes: &[u8], path: &Path) -> Result<RealMatrix> {
    let fail = |offset: usize, message: String| HarnessError::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail(0, "missing MCATTN01 magic".into()));
    }
    let len_bytes: [u8; 4] = bytes
        .get(8..12)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| fail(8, "truncated header length".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| fail(12, format!("header of {header_len} bytes runs past end of file")))?;
    let text = std::str::from_utf8(header_bytes)
        .map_err(|e| fail(12 + e.valid_up_to(), "header is not UTF-8".into()))?;
    let header: Header = serde_json::from_str(text).map_err(|e| fail(12, format!("header: {e}")))?;
    if header.dtype != "f64" {
        return Err(fail(12, format!("unsupported dtype '{}'", header.dtype)));
    }
    if header.order != "row-major" {
        return Err(fail(12, format!("unsupported order '{}'", header.order)));
    }
    let [rows, cols] = header.dims;
    let start = 12 + header_len;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| fail(12, "dims overflow".into()))?;
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(fail(
            start + payload.len().min(expected),
            format!("payload has {} bytes, dims need {expected}", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let x = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        if !x.is_finite() {
            return Err(fail(start + 8 * i, format!("non-finite value {x}")));
        }
        data.push(x);
    }
    RealMatrix::new(rows, cols, data).map_err(|e| fail(start, e.to_string()))
}

pub fn read_tensor(path: &Path) -> Result<RealMatrix> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_tensor(path: &Path, m: &RealMatrix) -> Result<()> {
    fs::write(path, encode(m)).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RealMatrix {
        RealMatrix::from_rows(&[[1.5, -0.0, f64::MIN_POSITIVE], [1e300, -2.25, 0.1]]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample();
        let back = decode(&encode(&m), Path::new("mem")).unwrap();
        assert_eq!(back.rows(), 2);
        assert_eq!(back.cols(), 3);
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..8], MAGIC);
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert_eq!(header["dims"], serde_json::json!([2, 3]));
        assert_eq!(header["dtype"], "f64");
        assert_eq!(header["order"], "row-major");
        assert_eq!(bytes.len(), 12 + len + 48);
    }

    fn offset_of(bytes: &[u8]) -> u64 {
        match decode(bytes, Path::new("x")) {
            Err(HarnessError::Parse { offset, .. }) => offset,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_files_report_offsets() {
        let good = encode(&sample());
        assert_eq!(offset_of(b"NOTMAGIC"), 0);
        assert_eq!(offset_of(&good[..10]), 8);
        assert_eq!(offset_of(&good[..20]), 12);
        let truncated = &good[..good.len() - 3];
        assert_eq!(offset_of(truncated), (truncated.len()) as u64);

        let mut nan = good.clone();
        let at = nan.len() - 8;
        nan[at..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(offset_of(&nan), at as u64);

        let mut bad_dtype = good.clone();
        let len = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(good[12..12 + len].to_vec()).unwrap().replace("f64", "f32");
        bad_dtype.splice(12..12 + len, header.into_bytes());
        assert_eq!(offset_of(&bad_dtype), 12);
    }
}
