//! Domain-adversarial training: website head on labeled source data, a
//! gradient-reversed domain head on source and target features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    argmax, check_inputs, data_fingerprint, eval_accuracy, fit_masked_norm, BestTracker, EpochRecord, History,
    Prepared, TrainConfig, WfModel, WfNet,
};
use crate::nn::{ops, Mode, Optimizer};
use crate::synth::mix_seed;
use crate::traffic::SampleVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainMode {
    /// Source rows are domain 0, target rows domain 1.
    Binary,
    /// Each source environment gets its own index; the target takes the last.
    MultiIndex,
}

impl std::str::FromStr for DomainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(DomainMode::Binary),
            "multi-index" | "multi" => Ok(DomainMode::MultiIndex),
            _ => Err(Error::Config(format!("unknown domain mode {s:?} (binary, multi-index)"))),
        }
    }
}

/// How the domain-loss weight evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSchedule {
    Constant,
    /// Linear in optimizer steps from `start` to `end` times `lambda_d` over
    /// the first `epochs` epochs, then held at `end`.
    Ramp { start: f64, end: f64, epochs: usize },
}

impl LambdaSchedule {
    /// Ramp 0 to 1 over the first third of training.
    pub fn default_for(epochs: usize) -> Self {
        LambdaSchedule::Ramp {
            start: 0.0,
            end: 1.0,
            epochs: epochs.div_ceil(3).max(1),
        }
    }

    /// Multiplier at fractional epoch `progress`.
    pub fn factor(&self, progress: f64) -> f64 {
        match *self {
            LambdaSchedule::Constant => 1.0,
            LambdaSchedule::Ramp { start, end, epochs } => {
                let p = (progress / epochs as f64).clamp(0.0, 1.0);
                start + (end - start) * p
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DAConfig {
    pub lambda_d: f64,
    pub domain_mode: DomainMode,
    pub schedule: LambdaSchedule,
    /// Layers in the feature extractor; `None` keeps the model's split.
    pub split: Option<usize>,
    pub train: TrainConfig,
}

impl DAConfig {
    pub fn new(lambda_d: f64, train: TrainConfig) -> Self {
        Self {
            lambda_d,
            domain_mode: DomainMode::Binary,
            schedule: LambdaSchedule::default_for(train.epochs),
            split: None,
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.lambda_d >= 0.0) || !self.lambda_d.is_finite() {
            return Err(Error::Config(format!("lambda_d must be a non-negative number, got {}", self.lambda_d)));
        }
        if let LambdaSchedule::Ramp { start, end, epochs } = self.schedule {
            if epochs == 0 || epochs > self.train.epochs {
                return Err(Error::Config(format!(
                    "lambda ramp over {epochs} epochs does not fit in {} training epochs",
                    self.train.epochs
                )));
            }
            if !(start >= 0.0 && end >= 0.0 && start.is_finite() && end.is_finite()) {
                return Err(Error::Config("lambda ramp endpoints must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Target-domain samples with their website labels removed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnlabeledSamples(Vec<SampleVector>);

impl UnlabeledSamples {
    pub fn from_samples(samples: &[SampleVector]) -> Self {
        Self(
            samples
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    s.site_label = 0;
                    s.env_id = 0;
                    s
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One training step's input: the first `website_labels.len()` rows are
/// labeled source rows, every row has a domain id.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    /// `[rows, channels, window]` normalized model input.
    pub x: Vec<f32>,
    pub website_labels: Vec<usize>,
    pub domains: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub website_loss: f64,
    pub website_correct: usize,
    pub domain_loss: f64,
    pub domain_correct: usize,
}

fn domain_head(net: &mut WfNet) -> Result<&mut crate::nn::Sequential<f32>> {
    net.domain
        .as_mut()
        .ok_or_else(|| Error::Config("model has no domain head".into()))
}

fn finite(loss: f32, what: &str) -> Result<f64> {
    let l = f64::from(loss);
    if !l.is_finite() {
        return Err(Error::Numeric(format!("{what} loss became {l}")));
    }
    Ok(l)
}

fn correct(logits: &[f32], classes: usize, labels: &[usize]) -> usize {
    logits
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(l, &y)| argmax(l) == y)
        .count()
}

/// Forward and backward for one batch, accumulating gradients. The website
/// loss averages over source rows, the domain loss over all rows; the
/// extractor receives the website gradient plus `-lambda` times the domain
/// gradient.
///
/// With `lambda > 0` source and target rows share one train-mode pass, so
/// batch-norm statistics cover both domains. With `lambda == 0` source rows
/// run alone and target rows reuse their statistics, which leaves the
/// extractor and website head exactly as plain supervised training would.
pub fn da_step(net: &mut WfNet, batch: &DomainBatch, lambda: f64) -> Result<StepStats> {
    let n = batch.domains.len();
    let ns = batch.website_labels.len();
    if ns < 1 || ns > n {
        return Err(Error::Shape(format!("{ns} labeled rows in a batch of {n}")));
    }
    let row = batch.x.len() / n.max(1);
    let classes = net.class_count();
    let domains = net.domain_count().ok_or_else(|| Error::Config("model has no domain head".into()))?;
    domain_head(net)?.set_grl_lambda(lambda);
    let feat_row = net.trunk.output_shape().size();

    let (feat, t_trunk, trunk_rows) = if lambda > 0.0 {
        let (f, t) = net.trunk.forward(batch.x.clone(), n, Mode::Train)?;
        (f, t, n)
    } else {
        let (mut f, t) = net.trunk.forward(batch.x[..ns * row].to_vec(), ns, Mode::Train)?;
        if n > ns {
            let (ft, _) = net.trunk.forward_pass(batch.x[ns * row..].to_vec(), n - ns, Mode::Reference(t.stats()), false)?;
            f.extend(ft);
        }
        (f, t, ns)
    };

    let (logits, t_head) = net.head.forward(feat[..ns * feat_row].to_vec(), ns, Mode::Train)?;
    let (wl, wg) = ops::softmax_cross_entropy(&logits, &batch.website_labels, classes)?;
    let website_loss = finite(wl, "website")?;
    let website_correct = correct(&logits, classes, &batch.website_labels);

    let dhead = domain_head(net)?;
    let (dlogits, t_dom) = dhead.forward(feat, n, Mode::Train)?;
    let (dl, dg) = ops::softmax_cross_entropy(&dlogits, &batch.domains, domains)?;
    let domain_loss = finite(dl, "domain")?;
    let domain_correct = correct(&dlogits, domains, &batch.domains);

    let need = net.trunk.has_trainable();
    let g_site = net.head.backward(&t_head, wg, need)?;
    let dhead = domain_head(net)?;
    let g_dom = dhead.backward(&t_dom, dg, need && lambda > 0.0)?;
    if need {
        let mut g = g_site.expect("requested");
        if let Some(gd) = g_dom {
            g.resize(trunk_rows * feat_row, 0.0);
            g.iter_mut().zip(&gd).for_each(|(a, &b)| *a += b);
        }
        net.trunk.backward(&t_trunk, g, false)?;
    }
    Ok(StepStats {
        website_loss,
        website_correct,
        domain_loss,
        domain_correct,
    })
}

struct Target {
    data: Prepared,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Target {
    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn prepare_net(model: &mut WfModel, cfg: &DAConfig, domain_count: usize) -> Result<()> {
    if let Some(split) = cfg.split {
        if split != model.net.split() {
            let mut rebuilt = WfNet::build(&model.arch, split, 0)?;
            let old = model.net.trunk.params().iter().chain(model.net.head.params());
            for (p, q) in rebuilt.params_mut().zip(old) {
                p.tensor.values_mut().copy_from_slice(q.tensor.values());
            }
            if model.net.trunk.stats_ready() && model.net.head.stats_ready() {
                rebuilt.trunk.mark_stats_ready();
                rebuilt.head.mark_stats_ready();
            }
            model.net = rebuilt;
        }
    }
    model.net.attach_domain_head(domain_count, cfg.lambda_d, mix_seed(&[cfg.train.seed, 0xDA]))
}

/// Source row `i` has domain `source_domains[i]`; `target_domain` applies to
/// every target row.
fn run(
    model: &mut WfModel,
    source: &[SampleVector],
    source_domains: Vec<usize>,
    target: Option<(&UnlabeledSamples, usize)>,
    val: &[SampleVector],
    cfg: &DAConfig,
    domain_count: usize,
) -> Result<History> {
    cfg.validate()?;
    check_inputs(model, source, val)?;
    let tc = &cfg.train;
    prepare_net(model, cfg, domain_count)?;
    if tc.epochs == 0 {
        return Ok(History::default());
    }
    model.mask = tc.mask;
    model.norm = fit_masked_norm(source, tc.mask)?;
    model.manifest.seed = tc.seed;
    model.manifest.data_fingerprint = data_fingerprint(source);
    let tr = Prepared::new(source, &model.norm, model.mask)?;
    let va = Prepared::new(val, &model.norm, model.mask)?;
    let mut tgt = match target {
        Some((t, dom)) => {
            if t.is_empty() {
                return Err(Error::EmptyInput("target set"));
            }
            if t.0[0].window_len() != model.arch.input_len {
                return Err(Error::Shape("target windows do not match the model input".into()));
            }
            let data = Prepared::new(&t.0, &model.norm, model.mask)?;
            let order: Vec<usize> = (0..data.len()).collect();
            Some((
                Target {
                    data,
                    pos: order.len(),
                    order,
                    rng: ChaCha8Rng::seed_from_u64(mix_seed(&[tc.seed, 0x7A26E7])),
                },
                dom,
            ))
        }
        None => None,
    };

    let mut opt = Optimizer::new(tc.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..tr.len()).collect();
    let steps_per_epoch = tr.len() / tc.batch_size + usize::from(tr.len() % tc.batch_size >= 2);
    let mut history = History::default();
    let mut tracker = BestTracker::new(tc.patience);
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut site_ok, mut seen, mut dom_ok, mut dom_seen, mut batches) = (0.0, 0, 0, 0, 0, 0);
        let mut lambda = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            lambda = cfg.lambda_d * cfg.schedule.factor(step as f64 / steps_per_epoch.max(1) as f64);
            let mut x = tr.rows(chunk);
            let website_labels: Vec<usize> = chunk.iter().map(|&i| tr.labels[i]).collect();
            let mut domains: Vec<usize> = chunk.iter().map(|&i| source_domains[i]).collect();
            if let Some((t, dom)) = &mut tgt {
                let idx = t.take(chunk.len());
                x.extend(t.data.rows(&idx));
                domains.extend(std::iter::repeat_n(*dom, idx.len()));
            }
            let batch = DomainBatch {
                x,
                website_labels,
                domains,
            };
            model.net.zero_grad();
            let s = da_step(&mut model.net, &batch, lambda)?;
            opt.step(model.net.params_mut());
            loss_sum += s.website_loss + lambda * s.domain_loss;
            site_ok += s.website_correct;
            seen += chunk.len();
            dom_ok += s.domain_correct;
            dom_seen += batch.domains.len();
            batches += 1;
            step += 1;
        }
        let val_accuracy = eval_accuracy(&model.net, &va)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            train_accuracy: site_ok as f64 / seen.max(1) as f64,
            val_accuracy,
            domain_accuracy: Some(dom_ok as f64 / dom_seen.max(1) as f64),
            lambda: Some(lambda),
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

/// Adversarial training on labeled `source` and unlabeled `target` samples.
/// Each step pairs a source mini-batch with an equally sized target batch.
pub fn da_train(
    model: &mut WfModel,
    source: &[SampleVector],
    target: &UnlabeledSamples,
    val: &[SampleVector],
    cfg: &DAConfig,
) -> Result<History> {
    let (domains, count, target_dom) = match cfg.domain_mode {
        DomainMode::Binary => (vec![0; source.len()], 2, 1),
        DomainMode::MultiIndex => {
            let mut envs: Vec<u16> = source.iter().map(|s| s.env_id).collect();
            envs.sort_unstable();
            envs.dedup();
            let doms = source
                .iter()
                .map(|s| envs.binary_search(&s.env_id).expect("collected above"))
                .collect();
            (doms, envs.len() + 1, envs.len())
        }
    };
    run(model, source, domains, Some((target, target_dom)), val, cfg, count)
}

/// Adversarial training over several labeled datasets whose index is the
/// domain label; the website loss uses every row.
pub fn multi_domain_train(
    model: &mut WfModel,
    datasets: &[&[SampleVector]],
    val: &[SampleVector],
    cfg: &DAConfig,
) -> Result<History> {
    if datasets.len() < 2 {
        return Err(Error::Config(format!(
            "multi-domain training needs at least 2 datasets, got {}",
            datasets.len()
        )));
    }
    let pooled: Vec<SampleVector> = datasets.iter().flat_map(|d| d.iter().cloned()).collect();
    let domains = datasets
        .iter()
        .enumerate()
        .flat_map(|(i, d)| std::iter::repeat_n(i, d.len()))
        .collect();
    run(model, &pooled, domains, None, val, cfg, datasets.len())
}

/// Accuracy of the domain head on `samples` tagged with `domains`.
pub fn domain_accuracy(model: &WfModel, samples: &[SampleVector], domains: &[usize]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("domain accuracy batch"));
    }
    if samples.len() != domains.len() {
        return Err(Error::Shape(format!("{} samples but {} domain ids", samples.len(), domains.len())));
    }
    let head = model
        .net
        .domain
        .as_ref()
        .ok_or_else(|| Error::Config("model has no domain head".into()))?;
    let count = head.output_shape().size();
    let data = Prepared::new(samples, &model.norm, model.mask)?;
    let mut ok = 0;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(256) {
        let feat = model.net.trunk.forward_infer(data.rows(chunk), chunk.len())?;
        let logits = head.forward_infer(feat, chunk.len())?;
        let labels: Vec<usize> = chunk.iter().map(|&i| domains[i]).collect();
        ok += correct(&logits, count, &labels);
    }
    Ok(ok as f64 / samples.len() as f64)
}
