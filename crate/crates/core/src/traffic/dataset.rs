//! The `WFDS` binary dataset container.
//!
//! Layout, all little-endian:
//!
//! | field        | type  |
//! |--------------|-------|
//! | magic        | `b"WFDS"` |
//! | version      | u16 (= 1) |
//! | sample_count | u32   |
//! | window_len   | u16   |
//!
//! followed by `sample_count` records of `u16 site_label`, `u16 env_id` and
//! `2 * window_len` f32 values in interleaved `(jitter_us, size_bytes)` order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::window::{SampleVector, WINDOW_LEN};
use crate::codec::Reader;
use crate::error::{Error, FormatError, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"WFDS";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 2;

/// Encodes samples into the container. All samples must share one window length.
pub fn encode_dataset(samples: &[SampleVector]) -> Result<Vec<u8>> {
    let window = samples.first().map_or(WINDOW_LEN, SampleVector::window_len);
    if let Some(bad) = samples.iter().find(|s| s.window_len() != window) {
        return Err(Error::Shape(format!(
            "mixed window lengths {window} and {} in one dataset",
            bad.window_len()
        )));
    }
    let window_u16 = u16::try_from(window)
        .map_err(|_| Error::Shape(format!("window length {window} exceeds u16")))?;
    let count = u32::try_from(samples.len())
        .map_err(|_| Error::Shape(format!("{} samples exceed u32", samples.len())))?;

    let mut buf = Vec::with_capacity(HEADER_LEN + samples.len() * (4 + 8 * window));
    buf.extend_from_slice(&DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&window_u16.to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&s.site_label.to_le_bytes());
        buf.extend_from_slice(&s.env_id.to_le_bytes());
        for v in s.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Decodes a container, distinguishing bad magic, unknown versions, short
/// payloads and trailing garbage.
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SampleVector>> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let count = r.u32()? as usize;
    let window = r.u16()? as usize;
    if window == 0 {
        return Err(FormatError::Malformed("window length 0".into()).into());
    }
    let record = 4 + 8 * window;
    let available = r.remaining();
    if available < count * record {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            needed: count * record - available,
        }
        .into());
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let site = r.u16()?;
        let env = r.u16()?;
        let values = r.f32s(2 * window)?;
        out.push(SampleVector::new(values, site, env)?);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[SampleVector]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(samples)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SampleVector>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u16, window: usize) -> SampleVector {
        let values = (0..2 * window).map(|i| (i as f32) * 0.5 + f32::from(seed)).collect();
        SampleVector::new(values, seed, seed + 1).unwrap()
    }

    #[test]
    fn round_trip_three() {
        let s = vec![sample(0, 500), sample(1, 500), sample(7, 500)];
        assert_eq!(decode_dataset(&encode_dataset(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn empty_dataset() {
        let bytes = encode_dataset(&[]).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert!(decode_dataset(&bytes).unwrap().is_empty());
    }

    #[test]
    fn header_count_larger_than_payload() {
        let s: Vec<_> = (0..9).map(|i| sample(i, 4)).collect();
        let mut bytes = encode_dataset(&s).unwrap();
        bytes[6..10].copy_from_slice(&10u32.to_le_bytes());
        assert!(matches!(
            decode_dataset(&bytes),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn distinct_header_errors() {
        let mut bytes = encode_dataset(&[sample(1, 4)]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_dataset(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_dataset(&bad),
            Err(Error::Format(FormatError::VersionMismatch { found: 2, .. }))
        ));
        assert!(matches!(
            decode_dataset(&bytes[..3]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        bytes.push(0);
        assert!(matches!(
            decode_dataset(&bytes),
            Err(Error::Format(FormatError::TrailingBytes(1)))
        ));
    }

    #[test]
    fn mixed_windows_rejected() {
        assert!(encode_dataset(&[sample(0, 4), sample(0, 5)]).is_err());
    }
}
