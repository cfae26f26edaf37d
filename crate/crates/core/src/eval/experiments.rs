use serde::{Deserialize, Serialize};

use super::corpus::{class_count, env_ids, filter_split, site_labels, stratified_subset, window_split, TraceSplit};
use super::metrics::{evaluate, EvalReport};
use crate::defense::{defend_dataset, DefendScope, DefenseConfig, OverheadSummary};
use crate::error::{Error, Result};
use crate::model::{build_model, finetune, train, ArchitectureConfig, FreezeMask, History, Preset, TrainConfig, WfModel};
use crate::synth::mix_seed;
use crate::traffic::{ChannelMask, DatasetSplit, SampleVector};

/// Model and training settings shared by every cell of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Tiny,
            train: TrainConfig::default(),
        }
    }
}

/// Outcome of one train-and-evaluate cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub report: EvalReport,
    pub history: History,
    pub model: WfModel,
}

/// Builds a fresh model, trains it and evaluates it on `test`.
pub fn run_cell(
    cfg: &ExperimentConfig,
    classes: usize,
    train_set: &[SampleVector],
    val: &[SampleVector],
    test: &[SampleVector],
) -> Result<CellResult> {
    let arch = ArchitectureConfig::preset(cfg.preset, classes)?;
    let mut model = build_model(&arch, cfg.train.seed)?;
    let history = train(&mut model, train_set, val, &cfg.train)?;
    Ok(CellResult {
        report: evaluate(&model, test)?,
        history,
        model,
    })
}

fn nonempty(split: &DatasetSplit) -> Result<()> {
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::EmptyInput("corpus has no training or test samples"));
    }
    Ok(())
}

/// Accuracy of a model trained on env `env_ids[row]` and tested on env
/// `env_ids[col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainMatrix {
    pub env_ids: Vec<u16>,
    pub accuracy: Vec<Vec<f64>>,
}

impl CrossDomainMatrix {
    /// Smallest gap between a diagonal entry and an off-diagonal entry of its
    /// row; `None` for a single env.
    pub fn min_diagonal_margin(&self) -> Option<f64> {
        let n = self.env_ids.len();
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.accuracy[i][i] - self.accuracy[i][j])
            .reduce(f64::min)
    }
}

pub fn cross_domain_run(corpus: &DatasetSplit, cfg: &ExperimentConfig) -> Result<CrossDomainMatrix> {
    nonempty(corpus)?;
    let classes = class_count(corpus);
    let envs = env_ids(corpus);
    let mut accuracy = Vec::with_capacity(envs.len());
    for &src in &envs {
        let part = filter_split(corpus, |s| s.env_id == src);
        let cell = run_cell(cfg, classes, &part.train, &part.validation, &part.test)?;
        let row = envs
            .iter()
            .map(|&dst| {
                let test: Vec<SampleVector> = corpus.test.iter().filter(|s| s.env_id == dst).cloned().collect();
                evaluate(&cell.model, &test).map(|r| r.accuracy)
            })
            .collect::<Result<Vec<f64>>>()?;
        accuracy.push(row);
    }
    Ok(CrossDomainMatrix { env_ids: envs, accuracy })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveMode {
    Scratch,
    /// Pretrain on every other env, then finetune with the convolutions
    /// frozen.
    PretrainFinetune,
}

impl std::str::FromStr for CurveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(CurveMode::Scratch),
            "pretrain-finetune" => Ok(CurveMode::PretrainFinetune),
            _ => Err(Error::Config(format!("unknown curve mode {s:?} (scratch, pretrain-finetune)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub per_class: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub mode: CurveMode,
    pub target_env: u16,
    pub points: Vec<CurvePoint>,
}

fn min_class_count(samples: &[SampleVector]) -> usize {
    let mut counts = std::collections::BTreeMap::<u16, usize>::new();
    for s in samples {
        *counts.entry(s.site_label).or_default() += 1;
    }
    counts.values().copied().min().unwrap_or(0)
}

/// Trains on `per_class` target-env samples per site for each size and
/// tests on the target env. Validation uses half as many samples per site.
pub fn learning_curve_run(
    corpus: &DatasetSplit,
    target_env: u16,
    sizes: &[usize],
    mode: CurveMode,
    cfg: &ExperimentConfig,
) -> Result<LearningCurve> {
    nonempty(corpus)?;
    if sizes.is_empty() || sizes.contains(&0) || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("curve sizes must be positive and strictly increasing, got {sizes:?}")));
    }
    let classes = class_count(corpus);
    let target = filter_split(corpus, |s| s.env_id == target_env);
    if target.train.is_empty() {
        return Err(Error::Config(format!("env {target_env} has no training samples")));
    }
    let pretrained = match mode {
        CurveMode::Scratch => None,
        CurveMode::PretrainFinetune => {
            let other = filter_split(corpus, |s| s.env_id != target_env);
            if other.train.is_empty() {
                return Err(Error::Config("pretraining needs at least one other env".into()));
            }
            Some(run_cell(cfg, classes, &other.train, &other.validation, &other.test)?.model)
        }
    };
    let val_cap = min_class_count(&target.validation);
    let mut points = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let seed = mix_seed(&[cfg.train.seed, n as u64]);
        let tr = stratified_subset(&target.train, n, seed)?;
        let va = if val_cap == 0 {
            Vec::new()
        } else {
            stratified_subset(&target.validation, (n / 2).clamp(1, val_cap), seed)?
        };
        let accuracy = match &pretrained {
            None => run_cell(cfg, classes, &tr, &va, &target.test)?.report.accuracy,
            Some(base) => {
                let mut model = base.clone();
                let freeze = FreezeMask::conv_layers(&model);
                finetune(&mut model, &tr, &va, &freeze, &cfg.train)?;
                evaluate(&model, &target.test)?.accuracy
            }
        };
        points.push(CurvePoint { per_class: n, accuracy });
    }
    Ok(LearningCurve {
        mode,
        target_env,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub sites: usize,
    pub accuracy: f64,
}

/// Trains and tests on the first `n` site labels for each count.
pub fn website_scaling_run(corpus: &DatasetSplit, counts: &[usize], cfg: &ExperimentConfig) -> Result<Vec<ScalingPoint>> {
    nonempty(corpus)?;
    let labels = site_labels(corpus);
    let mut out = Vec::with_capacity(counts.len());
    for &n in counts {
        if n == 0 || n > labels.len() {
            return Err(Error::Config(format!("site count {n} outside 1..={}", labels.len())));
        }
        if n == 1 {
            out.push(ScalingPoint { sites: 1, accuracy: 1.0 });
            continue;
        }
        let keep: Vec<u16> = labels[..n].to_vec();
        let part = filter_split(corpus, |s| keep.contains(&s.site_label));
        let classes = class_count(&part);
        let cell = run_cell(cfg, classes, &part.train, &part.validation, &part.test)?;
        out.push(ScalingPoint {
            sites: n,
            accuracy: cell.report.accuracy,
        });
    }
    Ok(out)
}

/// One report per channel mask, each from a freshly trained model.
pub fn ablation_run(
    corpus: &DatasetSplit,
    masks: &[ChannelMask],
    cfg: &ExperimentConfig,
) -> Result<Vec<(ChannelMask, EvalReport)>> {
    nonempty(corpus)?;
    let classes = class_count(corpus);
    masks
        .iter()
        .map(|&mask| {
            let cell_cfg = ExperimentConfig {
                train: TrainConfig { mask, ..cfg.train.clone() },
                ..cfg.clone()
            };
            let cell = run_cell(&cell_cfg, classes, &corpus.train, &corpus.validation, &corpus.test)?;
            Ok((mask, cell.report))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefensePoint {
    pub label: String,
    pub overhead: OverheadSummary,
    pub report: EvalReport,
}

/// For each defense: defends every trace, re-windows, retrains and tests.
pub fn defense_curve_run(
    traces: &TraceSplit,
    defenses: &[DefenseConfig],
    window: usize,
    stride: usize,
    cfg: &ExperimentConfig,
) -> Result<Vec<DefensePoint>> {
    let mut out = Vec::with_capacity(defenses.len());
    for d in defenses {
        let fit: Vec<_> = traces.train.iter().chain(&traces.validation).cloned().collect();
        let defended = defend_dataset(&fit, &traces.test, d, DefendScope::TrainAndTest)?;
        let mut train_traces = defended.train;
        let val_traces = train_traces.split_off(traces.train.len());
        let split = window_split(
            &TraceSplit {
                train: train_traces,
                validation: val_traces,
                test: defended.test,
            },
            window,
            stride,
        )?;
        nonempty(&split)?;
        let cell = run_cell(cfg, class_count(&split), &split.train, &split.validation, &split.test)?;
        out.push(DefensePoint {
            label: d.label(),
            overhead: defended.summary,
            report: cell.report,
        });
    }
    Ok(out)
}
