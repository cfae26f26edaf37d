use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureConfig, TrainManifest, WfModel, WfNet};
use crate::error::{Error, FormatError, Result};
use crate::nn::checkpoint::{decode_checkpoint, encode_checkpoint, fingerprint, Blob, Checkpoint, OptimizerSection};
use crate::nn::{Optimizer, Sequential};
use crate::traffic::{ChannelMask, NormStats};

pub const MODEL_FORMAT: &str = "wflab-model-1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    split: usize,
    domain_count: Option<usize>,
    mask: ChannelMask,
    norm: NormStats,
    architecture: ArchitectureConfig,
    training: TrainManifest,
}

fn nets(net: &WfNet) -> impl Iterator<Item = &Sequential<f32>> {
    [&net.trunk, &net.head].into_iter().chain(net.domain.as_ref())
}

/// Hash of the layer stacks and every parameter name and shape.
fn net_fingerprint(net: &WfNet) -> u64 {
    let mut desc = String::new();
    for seq in nets(net) {
        desc.push_str(&serde_json::to_string(&seq.specs()).expect("layer specs serialize"));
        desc.push('\n');
        for p in seq.params() {
            desc.push_str(&format!("{} {:?}\n", p.name, p.tensor.shape()));
        }
    }
    fingerprint(desc.as_bytes())
}

/// Architecture fingerprint of a model built from `arch` with the default
/// split and no domain head.
pub fn arch_fingerprint(arch: &ArchitectureConfig) -> Result<u64> {
    Ok(net_fingerprint(&WfNet::zeros(arch, arch.default_split())?))
}

pub fn encode_model(model: &WfModel, optimizer: Option<&Optimizer<f32>>) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format: MODEL_FORMAT.into(),
        split: model.net.split(),
        domain_count: model.net.domain_count(),
        mask: model.mask,
        norm: model.norm,
        architecture: model.arch.clone(),
        training: model.manifest.clone(),
    };
    let manifest = toml::to_string(&manifest).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    let blobs = model
        .net
        .params()
        .map(|p| Blob {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            values: p.tensor.values().to_vec(),
        })
        .collect();
    let optimizer = optimizer.map(|o| {
        let (steps, bufs) = o.export_state();
        OptimizerSection {
            steps,
            buffers: bufs
                .into_iter()
                .map(|(name, values)| Blob {
                    name,
                    shape: vec![values.len()],
                    values,
                })
                .collect(),
        }
    });
    encode_checkpoint(&Checkpoint {
        fingerprint: net_fingerprint(&model.net),
        manifest,
        blobs,
        optimizer,
    })
}

/// Decodes a model and, when present, the optimizer buffers as
/// `(step count, named buffers)`.
pub fn decode_model(bytes: &[u8]) -> Result<(WfModel, Option<(u64, Vec<(String, Vec<f32>)>)>)> {
    let ck = decode_checkpoint(bytes, None)?;
    let m: Manifest =
        toml::from_str(&ck.manifest).map_err(|e| FormatError::Malformed(format!("checkpoint manifest: {e}")))?;
    if m.format != MODEL_FORMAT {
        return Err(FormatError::Malformed(format!("unknown model format {:?}", m.format)).into());
    }
    m.architecture
        .validate()
        .map_err(|e| FormatError::Malformed(format!("stored architecture: {e}")))?;
    let mut net = WfNet::zeros(&m.architecture, m.split)?;
    if let Some(d) = m.domain_count {
        net.attach_domain_head(d, 0.0, 0)?;
    }
    let expected = net_fingerprint(&net);
    if expected != ck.fingerprint {
        return Err(FormatError::FingerprintMismatch {
            expected,
            found: ck.fingerprint,
        }
        .into());
    }
    let count = net.params().count();
    if ck.blobs.len() != count {
        return Err(FormatError::Malformed(format!("{} parameter blobs, expected {count}", ck.blobs.len())).into());
    }
    for (p, blob) in net.params_mut().zip(ck.blobs) {
        if p.name != blob.name || p.tensor.shape() != blob.shape.as_slice() {
            return Err(FormatError::Malformed(format!("blob {} does not match parameter {}", blob.name, p.name)).into());
        }
        p.tensor.values_mut().copy_from_slice(&blob.values);
    }
    net.trunk.mark_stats_ready();
    net.head.mark_stats_ready();
    let opt = ck.optimizer.map(|o| (o.steps, o.buffers.into_iter().map(|b| (b.name, b.values)).collect()));
    Ok((
        WfModel {
            arch: m.architecture,
            net,
            norm: m.norm,
            mask: m.mask,
            manifest: m.training,
        },
        opt,
    ))
}

pub fn save_model(path: impl AsRef<Path>, model: &WfModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model, None)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<WfModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_model(&bytes)?.0)
}

/// Loads a model and requires its architecture to be `expected` (default
/// split, no domain head).
pub fn load_model_expecting(path: impl AsRef<Path>, expected: &ArchitectureConfig) -> Result<WfModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = arch_fingerprint(expected)?;
    decode_checkpoint(&bytes, Some(want))?;
    Ok(decode_model(&bytes)?.0)
}
