use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FreezeMask, WfModel, WfNet};
use crate::error::{Error, Result};
use crate::nn::{ops, Mode, Optimizer, OptimizerConfig};
use crate::traffic::{ChannelMask, NormStats, SampleVector, DEFAULT_NORM_EPSILON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Stop after this many epochs without a new best validation accuracy.
    pub patience: Option<usize>,
    pub mask: ChannelMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            patience: None,
            mask: ChannelMask::Both,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for train-mode batch norm, got {}",
                self.batch_size
            )));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be positive when set".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// Domain-head accuracy on the epoch's training batches (adaptation only).
    pub domain_accuracy: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Samples normalized, masked and laid out as `[n, 2, window]`.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub x: Vec<f32>,
    pub labels: Vec<usize>,
    pub row: usize,
}

impl Prepared {
    pub fn new(samples: &[SampleVector], norm: &NormStats, mask: ChannelMask) -> Result<Self> {
        let window = samples.first().map_or(0, SampleVector::window_len);
        let row = 2 * window;
        let mut x = Vec::with_capacity(samples.len() * row);
        let mut buf = vec![0.0f32; row];
        for s in samples {
            if s.window_len() != window {
                return Err(Error::Shape(format!(
                    "mixed window lengths {} and {window}",
                    s.window_len()
                )));
            }
            buf.copy_from_slice(s.values());
            norm.apply_in_place(&mut buf);
            let keep = [mask.keeps_jitter(), mask.keeps_size()];
            for (c, &k) in keep.iter().enumerate() {
                if k {
                    x.extend(buf.iter().skip(c).step_by(2));
                } else {
                    x.extend(std::iter::repeat_n(0.0, window));
                }
            }
        }
        Ok(Self {
            x,
            labels: samples.iter().map(|s| usize::from(s.site_label)).collect(),
            row,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn rows(&self, idx: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(idx.len() * self.row);
        for &i in idx {
            out.extend_from_slice(&self.x[i * self.row..][..self.row]);
        }
        out
    }
}

/// Channel statistics as if fitted on masked samples: removed channels get
/// zero mean and spread.
pub(crate) fn fit_masked_norm(samples: &[SampleVector], mask: ChannelMask) -> Result<NormStats> {
    let mut n = NormStats::fit(samples, DEFAULT_NORM_EPSILON)?;
    if !mask.keeps_jitter() {
        n.jitter_mean = 0.0;
        n.jitter_std = 0.0;
    }
    if !mask.keeps_size() {
        n.size_mean = 0.0;
        n.size_std = 0.0;
    }
    Ok(n)
}

pub(crate) fn check_labels(samples: &[SampleVector], classes: usize, what: &str) -> Result<()> {
    if let Some(s) = samples.iter().find(|s| usize::from(s.site_label) >= classes) {
        return Err(Error::Data(format!(
            "{what} contains label {} but the model has {classes} classes",
            s.site_label
        )));
    }
    Ok(())
}

pub(crate) fn data_fingerprint(samples: &[SampleVector]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.site_label.to_le_bytes());
        h.update(s.env_id.to_le_bytes());
        for v in s.values() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn logits_infer(net: &WfNet, x: &[f32], n: usize) -> Result<Vec<f32>> {
    let feat = net.trunk.forward_infer(x.to_vec(), n)?;
    net.head.forward_infer(feat, n)
}

const EVAL_CHUNK: usize = 256;

/// Fraction of correct arg-max predictions, or `None` for an empty set.
pub(crate) fn eval_accuracy(net: &WfNet, data: &Prepared) -> Result<Option<f64>> {
    if data.len() == 0 {
        return Ok(None);
    }
    let classes = net.class_count();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let logits = logits_infer(net, &data.rows(chunk), chunk.len())?;
        correct += logits
            .chunks_exact(classes)
            .zip(chunk)
            .filter(|(l, &i)| super::argmax(l) == data.labels[i])
            .count();
    }
    Ok(Some(correct as f64 / data.len() as f64))
}

/// Website-classifier forward and backward on one batch, accumulating
/// gradients. Returns the mean loss and the number of correct predictions.
pub(crate) fn supervised_step(net: &mut WfNet, x: Vec<f32>, labels: &[usize]) -> Result<(f64, usize)> {
    let b = labels.len();
    let classes = net.class_count();
    let (feat, t_trunk) = net.trunk.forward(x, b, Mode::Train)?;
    let (logits, t_head) = net.head.forward(feat, b, Mode::Train)?;
    let (loss, g) = ops::softmax_cross_entropy(&logits, labels, classes)?;
    let loss = f64::from(loss);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("training loss became {loss}")));
    }
    let correct = logits
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(l, &y)| super::argmax(l) == y)
        .count();
    let need = net.trunk.has_trainable();
    if let Some(gf) = net.head.backward(&t_head, g, need)? {
        net.trunk.backward(&t_trunk, gf, false)?;
    }
    Ok((loss, correct))
}

/// Tracks the best validation accuracy and the parameters that reached it.
pub(crate) struct BestTracker {
    best: Option<(f64, usize, WfNet)>,
    since_best: usize,
    patience: Option<usize>,
}

impl BestTracker {
    pub fn new(patience: Option<usize>) -> Self {
        Self {
            best: None,
            since_best: 0,
            patience,
        }
    }

    /// Records an epoch; returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, acc: Option<f64>, net: &WfNet) -> bool {
        let Some(acc) = acc else { return false };
        if self.best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            self.best = Some((acc, epoch, net.clone()));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.patience.is_some_and(|p| self.since_best >= p)
    }

    /// Restores the best parameters, if any were recorded.
    pub fn finish(self, net: &mut WfNet) -> Option<usize> {
        self.best.map(|(_, epoch, best)| {
            *net = best;
            epoch
        })
    }
}

fn run(model: &mut WfModel, train: &Prepared, val: &Prepared, cfg: &TrainConfig) -> Result<History> {
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    let mut tracker = BestTracker::new(cfg.patience);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen, mut batches) = (0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            model.net.zero_grad();
            let (loss, c) = supervised_step(&mut model.net, train.rows(chunk), &labels)?;
            opt.step(model.net.params_mut());
            loss_sum += loss;
            correct += c;
            seen += chunk.len();
            batches += 1;
        }
        let val_accuracy = eval_accuracy(&model.net, val)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            val_accuracy,
            domain_accuracy: None,
            lambda: None,
        });
        if tracker.observe(epoch, val_accuracy, &model.net) {
            break;
        }
    }
    history.best_epoch = tracker.finish(&mut model.net);
    model.manifest.epochs_run = history.epochs.len();
    model.manifest.best_epoch = history.best_epoch;
    Ok(history)
}

pub(crate) fn check_inputs(model: &WfModel, train: &[SampleVector], val: &[SampleVector]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let classes = model.net.class_count();
    check_labels(train, classes, "training set")?;
    check_labels(val, classes, "validation set")?;
    let want = model.arch.input_len;
    if let Some(s) = train.iter().chain(val).find(|s| s.window_len() != want) {
        return Err(Error::Shape(format!(
            "sample window {} does not match the model input length {want}",
            s.window_len()
        )));
    }
    Ok(())
}

/// Supervised training with shuffled mini-batches; the parameters with the
/// best validation accuracy are kept. Fits input normalization on the
/// (masked) training set.
pub fn train(model: &mut WfModel, train: &[SampleVector], val: &[SampleVector], cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    check_inputs(model, train, val)?;
    if cfg.epochs == 0 {
        return Ok(History::default());
    }
    model.mask = cfg.mask;
    model.norm = fit_masked_norm(train, cfg.mask)?;
    model.manifest.seed = cfg.seed;
    model.manifest.data_fingerprint = data_fingerprint(train);
    let tr = Prepared::new(train, &model.norm, model.mask)?;
    let va = Prepared::new(val, &model.norm, model.mask)?;
    run(model, &tr, &va, cfg)
}

/// Continues training with the parameters named in `mask` held fixed. The
/// normalization and channel mask of the pretrained model are kept.
pub fn finetune(
    model: &mut WfModel,
    train: &[SampleVector],
    val: &[SampleVector],
    mask: &FreezeMask,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    check_inputs(model, train, val)?;
    let known = FreezeMask::from_names(model, mask.names())?;
    if cfg.epochs == 0 {
        return Ok(History::default());
    }
    if cfg.mask != model.mask {
        return Err(Error::Config(format!(
            "finetune channel mask {} differs from the pretrained model's {}",
            cfg.mask.name(),
            model.mask.name()
        )));
    }
    for p in model.net.params_mut() {
        p.frozen = known.contains(&p.name);
    }
    let tr = Prepared::new(train, &model.norm, model.mask)?;
    let va = Prepared::new(val, &model.norm, model.mask)?;
    let result = run(model, &tr, &va, cfg);
    for p in model.net.params_mut() {
        p.frozen = false;
    }
    result
}
