use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wflab::adapt::DomainMode;
use wflab::defense::{Basis, DefendScope, Rotation, Targets};
use wflab::model::{Preset, TrainConfig};
use wflab::synth::DEFAULT_SITE_SPREAD;
use wflab::traffic::WINDOW_LEN;
use wflab::{Error, Result};

/// Everything a command needs; read from a TOML file, then overridden by
/// flags. Every command writes the resolved form as `resolved.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub synth: SynthSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub adapt: AdaptSection,
    pub finetune: FinetuneSection,
    pub defense: DefenseSection,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            synth: SynthSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            adapt: AdaptSection::default(),
            finetune: FinetuneSection::default(),
            defense: DefenseSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub sites: usize,
    pub envs: usize,
    pub packets_per_trace: usize,
    pub traces_per_site_env: usize,
    pub spread: f64,
    pub window: usize,
    pub stride: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            sites: 20,
            envs: 8,
            packets_per_trace: 10_000,
            traces_per_site_env: 4,
            spread: DEFAULT_SITE_SPREAD,
            window: WINDOW_LEN,
            stride: WINDOW_LEN,
        }
    }
}

/// Which part of a corpus directory a command reads.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    /// Env ids to use; empty means all.
    pub envs: Vec<u16>,
    /// Keep only the first `sites` site labels.
    pub sites: Option<usize>,
    pub source_envs: Vec<u16>,
    pub target_env: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    /// Input checkpoint for finetune and eval.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Tiny,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub lambda_d: f64,
    pub domain_mode: DomainMode,
    /// `"default"`, `"constant"` or a ramp length in epochs.
    pub lambda_ramp: String,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            domain_mode: DomainMode::Binary,
            lambda_ramp: "default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    /// `conv`, `trunk` or `none`.
    pub freeze: String,
    /// Training samples per site drawn from the target data; all when unset.
    pub per_class: Option<usize>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            freeze: "conv".into(),
            per_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSection {
    /// `none`, `inflation` or `injection`.
    pub kind: String,
    pub a: f64,
    pub basis: Basis,
    pub targets: Targets,
    pub k: usize,
    pub patterns: usize,
    pub rotation: Rotation,
    pub mode: DefendScope,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            kind: "none".into(),
            a: 0.0,
            basis: Basis::Mean,
            targets: Targets::Both,
            k: 0,
            patterns: 10,
            rotation: Rotation::PerTrace,
            mode: DefendScope::TrainAndTest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// `cross-domain`, `learning-curve`, `scaling`, `ablation` or
    /// `defense-curve`; unset means a plain evaluation.
    pub kind: Option<String>,
    pub curve_sizes: Vec<usize>,
    pub curve_mode: String,
    pub site_counts: Vec<usize>,
    pub inflation_a: Vec<f64>,
    pub injection_k: Vec<usize>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            kind: None,
            curve_sizes: vec![1000, 2000, 5000, 10000, 20000],
            curve_mode: "scratch".into(),
            site_counts: vec![5, 10, 20, 40],
            inflation_a: wflab::defense::INFLATION_SWEEP.to_vec(),
            injection_k: wflab::defense::INJECTION_SWEEP.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Flag, then config file, then `WFLAB_SEED`, then 0. The result is
    /// stored back so resolved configs carry it, and copied into the
    /// training section.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let seed = match (flag, self.seed) {
            (Some(s), _) | (None, Some(s)) => s,
            (None, None) => match std::env::var("WFLAB_SEED") {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("WFLAB_SEED must be an unsigned integer, got {v:?}")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        self.train.seed = seed;
        Ok(seed)
    }
}
