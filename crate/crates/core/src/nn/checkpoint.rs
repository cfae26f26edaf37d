//! The `WFCK` checkpoint container.
//!
//! Layout, all little-endian:
//!
//! | field          | type |
//! |----------------|------|
//! | magic          | `b"WFCK"` |
//! | version        | u16 (= 1) |
//! | fingerprint    | u64, architecture hash |
//! | manifest       | u32 length + UTF-8 TOML |
//! | blob_count     | u32 |
//! | blobs          | `blob_count` x blob |
//! | has_optimizer  | u8 (0 or 1) |
//! | optimizer      | u64 step count, u32 count, blobs (only if flagged) |
//!
//! A blob is `u16` name length, name bytes, `u8` rank, `rank` x u32 dims and
//! the f32 values.

use sha2::{Digest, Sha256};

use crate::codec::Reader;
use crate::error::{FormatError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSection {
    pub steps: u64,
    pub buffers: Vec<Blob>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub manifest: String,
    pub blobs: Vec<Blob>,
    pub optimizer: Option<OptimizerSection>,
}

/// First eight bytes of the SHA-256 digest, little-endian.
pub fn fingerprint(description: &[u8]) -> u64 {
    let digest = Sha256::digest(description);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn put_blob(buf: &mut Vec<u8>, blob: &Blob) -> Result<(), FormatError> {
    let name = blob.name.as_bytes();
    let name_len = u16::try_from(name.len()).map_err(|_| FormatError::Malformed(format!("blob name too long: {}", blob.name)))?;
    let rank = u8::try_from(blob.shape.len()).map_err(|_| FormatError::Malformed("rank above 255".into()))?;
    if blob.shape.iter().product::<usize>() != blob.values.len() {
        return Err(FormatError::Malformed(format!("blob {} shape does not match its values", blob.name)));
    }
    buf.extend_from_slice(&name_len.to_le_bytes());
    buf.extend_from_slice(name);
    buf.push(rank);
    for &d in &blob.shape {
        let d = u32::try_from(d).map_err(|_| FormatError::Malformed("dimension above u32".into()))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in &blob.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_blobs(buf: &mut Vec<u8>, blobs: &[Blob]) -> Result<(), FormatError> {
    let n = u32::try_from(blobs.len()).map_err(|_| FormatError::Malformed("too many blobs".into()))?;
    buf.extend_from_slice(&n.to_le_bytes());
    blobs.iter().try_for_each(|b| put_blob(buf, b))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ck.fingerprint.to_le_bytes());
    let manifest = ck.manifest.as_bytes();
    let len = u32::try_from(manifest.len()).map_err(|_| FormatError::Malformed("manifest too long".into()))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(manifest);
    put_blobs(&mut buf, &ck.blobs)?;
    match &ck.optimizer {
        None => buf.push(0),
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.steps.to_le_bytes());
            put_blobs(&mut buf, &opt.buffers)?;
        }
    }
    Ok(buf)
}

fn read_blobs(r: &mut Reader<'_>) -> Result<Vec<Blob>, FormatError> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(r.remaining()));
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FormatError::Malformed("blob name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FormatError::Malformed(format!("blob {name} is too large")))?;
        let values = r.f32s(count)?;
        out.push(Blob { name, shape, values });
    }
    Ok(out)
}

/// Decodes a checkpoint. When `expected` is given the stored fingerprint
/// must equal it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<u64>) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let fp = r.u64()?;
    if let Some(e) = expected {
        if e != fp {
            return Err(FormatError::FingerprintMismatch { expected: e, found: fp }.into());
        }
    }
    let len = r.u32()? as usize;
    let manifest = std::str::from_utf8(r.take(len)?)
        .map_err(|_| FormatError::Malformed("manifest is not UTF-8".into()))?
        .to_string();
    let blobs = read_blobs(&mut r)?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let steps = r.u64()?;
            Some(OptimizerSection {
                steps,
                buffers: read_blobs(&mut r)?,
            })
        }
        f => return Err(FormatError::Malformed(format!("optimizer flag {f}")).into()),
    };
    r.finish()?;
    Ok(Checkpoint {
        fingerprint: fp,
        manifest,
        blobs,
        optimizer,
    })
}
