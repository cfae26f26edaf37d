//! WFNet classifiers: presets, supervised training, prediction, checkpoints
//! and freeze-and-finetune transfer.

mod arch;
mod io;
mod train;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use arch::{ArchitectureConfig, BlockConfig, Preset, StemConfig};
pub use io::{arch_fingerprint, decode_model, encode_model, load_model, load_model_expecting, save_model, MODEL_FORMAT};
pub use train::{finetune, train, EpochRecord, History, TrainConfig};
pub(crate) use train::{
    check_inputs, data_fingerprint, eval_accuracy, fit_masked_norm, logits_infer, BestTracker, Prepared,
};

use crate::error::{Error, Result};
use crate::nn::{Act, LayerSpec, Param, Sequential};
use crate::synth::mix_seed;
use crate::traffic::{ChannelMask, NormStats, SampleVector};

/// Width of the hidden layer of the domain classifier.
pub const DOMAIN_HIDDEN: usize = 256;

/// Feature extractor, website head and optional gradient-reversed domain head.
#[derive(Debug, Clone, PartialEq)]
pub struct WfNet {
    pub trunk: Sequential<f32>,
    pub head: Sequential<f32>,
    pub domain: Option<Sequential<f32>>,
    split: usize,
}

impl WfNet {
    /// Builds the classifier stack split after `split` layers, with
    /// He-uniform weights drawn from `seed`.
    pub fn build(arch: &ArchitectureConfig, split: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch, split)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.trunk.init_he_uniform(&mut rng);
        net.head.init_he_uniform(&mut rng);
        Ok(net)
    }

    fn zeros(arch: &ArchitectureConfig, split: usize) -> Result<Self> {
        let mut layers = arch.layers();
        if split == 0 || split >= layers.len() {
            return Err(Error::Config(format!(
                "split point {split} must leave at least one layer on each side (stack has {})",
                layers.len()
            )));
        }
        let head_layers = layers.split_off(split);
        let trunk = Sequential::new(arch.input_shape(), layers)?;
        let head = Sequential::new(trunk.output_shape(), head_layers)?;
        Ok(Self {
            trunk,
            head,
            domain: None,
            split,
        })
    }

    pub fn split(&self) -> usize {
        self.split
    }

    /// Appends `GRL -> [pool] -> FC 256 -> ReLU -> FC domain_count` on the
    /// extractor output.
    pub fn attach_domain_head(&mut self, domain_count: usize, lambda: f64, seed: u64) -> Result<()> {
        if domain_count < 2 {
            return Err(Error::Config(format!("domain_count must be at least 2, got {domain_count}")));
        }
        let feat = self.trunk.output_shape();
        let mut layers = vec![("domain.grl".to_string(), LayerSpec::GradientReversal { lambda })];
        let width = match feat {
            Act::Seq { channels, .. } => {
                layers.push(("domain.pool".into(), LayerSpec::GlobalAvgPool));
                channels
            }
            Act::Flat(n) => n,
        };
        layers.push(("domain.fc1".into(), LayerSpec::fc(width, DOMAIN_HIDDEN)));
        layers.push(("domain.relu1".into(), LayerSpec::Relu));
        layers.push(("domain.fc2".into(), LayerSpec::fc(DOMAIN_HIDDEN, domain_count)));
        let mut head = Sequential::new(feat, layers)?;
        head.init_he_uniform(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xD0_4A1D])));
        self.domain = Some(head);
        Ok(())
    }

    pub fn domain_count(&self) -> Option<usize> {
        self.domain.as_ref().map(|d| d.output_shape().size())
    }

    pub fn class_count(&self) -> usize {
        self.head.output_shape().size()
    }

    /// Learnable scalars of the website classifier (domain head excluded).
    pub fn parameter_count(&self) -> usize {
        self.trunk.parameter_count() + self.head.parameter_count()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<f32>> {
        self.trunk
            .params()
            .iter()
            .chain(self.head.params())
            .chain(self.domain.iter().flat_map(|d| d.params()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<f32>> {
        self.trunk
            .params_mut()
            .iter_mut()
            .chain(self.head.params_mut().iter_mut())
            .chain(self.domain.iter_mut().flat_map(|d| d.params_mut().iter_mut()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<f32>> {
        self.params().find(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        self.trunk.zero_grad();
        self.head.zero_grad();
        if let Some(d) = &mut self.domain {
            d.zero_grad();
        }
    }
}

/// Free-form provenance carried inside checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainManifest {
    pub seed: u64,
    /// SHA-256 (hex) of the training samples, empty before training.
    pub data_fingerprint: String,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    /// Class index to display name.
    pub labels: Vec<String>,
}

/// An architecture with its parameters, input normalization and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct WfModel {
    pub arch: ArchitectureConfig,
    pub net: WfNet,
    pub norm: NormStats,
    pub mask: ChannelMask,
    pub manifest: TrainManifest,
}

/// Builds an untrained model split at the default feature-extractor boundary.
pub fn build_model(arch: &ArchitectureConfig, seed: u64) -> Result<WfModel> {
    build_model_split(arch, arch.default_split(), seed)
}

pub fn build_model_split(arch: &ArchitectureConfig, split: usize, seed: u64) -> Result<WfModel> {
    arch.validate()?;
    Ok(WfModel {
        arch: arch.clone(),
        net: WfNet::build(arch, split, seed)?,
        norm: NormStats::identity(),
        mask: ChannelMask::Both,
        manifest: TrainManifest {
            seed,
            labels: (0..arch.class_count).map(|i| format!("site-{i}")).collect(),
            ..TrainManifest::default()
        },
    })
}

impl WfModel {
    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// Row per sample, `class_count` entries each.
    pub probabilities: Vec<Vec<f32>>,
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const PREDICT_CHUNK: usize = 256;

/// Infer-mode class probabilities and arg-max labels.
pub fn predict(model: &WfModel, samples: &[SampleVector]) -> Result<Prediction> {
    if samples.is_empty() {
        return Ok(Prediction::default());
    }
    let classes = model.net.class_count();
    let rows: Vec<Result<Vec<Vec<f32>>>> = samples
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let prepared = Prepared::new(chunk, &model.norm, model.mask)?;
            let logits = logits_infer(&model.net, &prepared.x, chunk.len())?;
            Ok(logits
                .chunks_exact(classes)
                .map(|l| {
                    let m = l.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
                    let e: Vec<f64> = l.iter().map(|&v| (v as f64 - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|v| (v / s) as f32).collect()
                })
                .collect())
        })
        .collect();
    let mut out = Prediction::default();
    for r in rows {
        for p in r? {
            out.labels.push(argmax(&p));
            out.probabilities.push(p);
        }
    }
    Ok(out)
}

/// Parameter names excluded from updates during [`finetune`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FreezeMask {
    names: BTreeSet<String>,
}

impl FreezeMask {
    /// Validates that every name belongs to the model.
    pub fn from_names<I, S>(model: &WfModel, names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let known: BTreeSet<&str> = model.net.params().map(|p| p.name.as_str()).collect();
        let mut set = BTreeSet::new();
        for n in names {
            let n = n.into();
            if !known.contains(n.as_str()) {
                return Err(Error::Config(format!("freeze mask names unknown parameter {n}")));
            }
            set.insert(n);
        }
        Ok(Self { names: set })
    }

    /// Every parameter and running statistic.
    pub fn all(model: &WfModel) -> Self {
        Self {
            names: model.net.params().map(|p| p.name.clone()).collect(),
        }
    }

    /// The whole feature extractor: convolutions, batch norms and their
    /// running statistics.
    pub fn trunk(model: &WfModel) -> Self {
        Self {
            names: model.net.trunk.params().iter().map(|p| p.name.clone()).collect(),
        }
    }

    /// Convolution kernels and biases of the extractor, skip projections
    /// included; batch norms stay trainable.
    pub fn conv_layers(model: &WfModel) -> Self {
        let names = model.net.trunk.param_names_where(|s| {
            matches!(
                s,
                LayerSpec::Conv1d { .. } | LayerSpec::ResidualEnd { projection: Some(_) }
            )
        });
        Self {
            names: names.into_iter().collect(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}
