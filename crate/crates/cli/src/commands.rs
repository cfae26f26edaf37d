use std::path::{Path, PathBuf};

use serde::Serialize;
use wflab::adapt::{da_train, DAConfig, LambdaSchedule, UnlabeledSamples};
use wflab::defense::{
    default_injection, defend_dataset, DefendScope, DefenseConfig, InflationConfig, OverheadSummary,
};
use wflab::eval::{
    ablation_run, append_results, config_hash, cross_domain_run, curve_columns, defense_curve_run, evaluate,
    learning_curve_run, read_results, render_matrix, render_results, render_table, split_traces,
    stratified_subset, website_scaling_run, CurveMode, EvalReport, ExperimentConfig, ResultRecord,
};
use wflab::model::{
    build_model, finetune, load_model, save_model, train, ArchitectureConfig, FreezeMask, History, WfModel,
};
use wflab::synth::{default_corpus_with_spread, generate_corpus, mix_seed, SynthConfig};
use wflab::traffic::{ingest_csv, ChannelMask, DatasetSplit, SampleVector, Trace};
use wflab::{Error, Result};

use crate::config::RunConfig;
use crate::corpus::{
    create_dir, load_manifest, load_split, load_traces, path_of, write_corpus, write_text, CorpusManifest,
    DefenseRecord, Selection,
};

/// Resolved settings plus the output directory of one invocation.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("this command needs --out".into()))
    }

    /// Creates the output directory and writes the resolved config into it.
    fn begin(&self) -> Result<Option<&Path>> {
        let Some(out) = self.out.as_deref() else { return Ok(None) };
        create_dir(out)?;
        write_text(&out.join("resolved.toml"), &self.cfg.to_toml()?)?;
        Ok(Some(out))
    }

    fn seed(&self) -> u64 {
        self.cfg.seed.unwrap_or(0)
    }

    fn data_dir(&self) -> Result<PathBuf> {
        path_of(&self.cfg.data.dir, "--data")
    }

    fn selection(&self, envs: Vec<u16>) -> Selection {
        Selection {
            envs,
            sites: self.cfg.data.sites,
        }
    }

    fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            preset: self.cfg.model.preset,
            train: self.cfg.train.clone(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("values serialize") + "\n"))
}

fn print_history(h: &History) {
    for e in &h.epochs {
        let val = e.val_accuracy.map_or("-".into(), |v| format!("{v:.4}"));
        let extra = match (e.domain_accuracy, e.lambda) {
            (Some(d), Some(l)) => format!("  domain_acc {d:.4}  lambda {l:.4}"),
            _ => String::new(),
        };
        println!(
            "epoch {:3}  loss {:.4}  train_acc {:.4}  val_acc {val}{extra}",
            e.epoch + 1,
            e.train_loss,
            e.train_accuracy
        );
    }
}

#[derive(Serialize)]
struct FinalRecord {
    split: &'static str,
    samples: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct HistoryFile<'a> {
    #[serde(flatten)]
    history: &'a History,
    #[serde(rename = "final")]
    last: FinalRecord,
}

/// Saves the checkpoint, history and a results record for a trained model.
fn finish_training(ctx: &Ctx, experiment: &str, model: &WfModel, history: &History, test: &[SampleVector]) -> Result<()> {
    let out = ctx.out()?;
    print_history(history);
    let report = evaluate(model, test)?;
    println!("test accuracy {:.4} on {} samples", report.accuracy, test.len());
    save_model(out.join("model.wfck"), model)?;
    write_json(
        &out.join("history.json"),
        &HistoryFile {
            history,
            last: FinalRecord {
                split: "test",
                samples: test.len(),
                accuracy: report.accuracy,
            },
        },
    )?;
    append_results(
        out.join("results.jsonl"),
        &[ResultRecord::from_report(experiment, "test", &ctx.cfg, ctx.seed(), &report)],
    )
}

pub fn synth(ctx: &Ctx) -> Result<()> {
    let out = ctx.begin()?.ok_or_else(|| Error::Config("synth needs --out".into()))?;
    let s = &ctx.cfg.synth;
    let base = default_corpus_with_spread(s.sites, s.envs, ctx.seed(), s.spread)?;
    let sc = SynthConfig {
        packets_per_trace: s.packets_per_trace,
        traces_per_site_env: s.traces_per_site_env,
        ..base
    };
    let traces = generate_corpus(&sc)?;
    write_text(&out.join("synth.toml"), &sc.to_toml()?)?;
    let m = write_corpus(out, &traces, s.window, s.stride, None)?;
    let windows: usize = m.files.iter().flat_map(|f| &f.traces).map(|t| t.windows).sum();
    println!(
        "wrote {} dataset files, {} traces, {windows} windows to {}",
        m.files.len(),
        traces.len(),
        out.display()
    );
    Ok(())
}

pub fn ingest(ctx: &Ctx, site: u16, env: u16, files: &[PathBuf]) -> Result<()> {
    let out = ctx.begin()?.ok_or_else(|| Error::Config("ingest needs --out".into()))?;
    if files.is_empty() {
        return Err(Error::Config("ingest needs at least one CSV file".into()));
    }
    let mut traces = if out.join(crate::corpus::MANIFEST).exists() {
        load_traces(out, &load_manifest(out)?)?
    } else {
        Vec::new()
    };
    for f in files {
        let mut t = ingest_csv(f, site, env)?;
        t.epoch_tag = f.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        traces.push(t);
    }
    let s = &ctx.cfg.synth;
    let m = write_corpus(out, &traces, s.window, s.stride, None)?;
    println!("corpus at {} now has {} dataset files", out.display(), m.files.len());
    Ok(())
}

pub fn train_cmd(ctx: &Ctx) -> Result<()> {
    ctx.out()?;
    ctx.begin()?;
    let dir = ctx.data_dir()?;
    let m = load_manifest(&dir)?;
    let split = load_split(&dir, &m, &ctx.selection(ctx.cfg.data.envs.clone()))?;
    let arch = ArchitectureConfig::preset(ctx.cfg.model.preset, wflab::eval::class_count(&split))?;
    let mut model = build_model(&arch, ctx.seed())?;
    let history = train(&mut model, &split.train, &split.validation, &ctx.cfg.train)?;
    finish_training(ctx, "train", &model, &history, &split.test)
}

fn schedule(spec: &str, epochs: usize) -> Result<LambdaSchedule> {
    match spec {
        "default" => Ok(LambdaSchedule::default_for(epochs)),
        "constant" => Ok(LambdaSchedule::Constant),
        n => n
            .parse()
            .map(|epochs| LambdaSchedule::Ramp {
                start: 0.0,
                end: 1.0,
                epochs,
            })
            .map_err(|_| Error::Config(format!("--lambda-ramp takes default, constant or an epoch count, got {n:?}"))),
    }
}

pub fn adapt(ctx: &Ctx) -> Result<()> {
    ctx.out()?;
    ctx.begin()?;
    let d = &ctx.cfg.data;
    let target_env = d
        .target_env
        .ok_or_else(|| Error::Config("adapt needs --target-env".into()))?;
    if d.source_envs.is_empty() || d.source_envs.contains(&target_env) {
        return Err(Error::Config("adapt needs --source-envs that exclude the target env".into()));
    }
    let dir = ctx.data_dir()?;
    let m = load_manifest(&dir)?;
    let source = load_split(&dir, &m, &ctx.selection(d.source_envs.clone()))?;
    let target = load_split(&dir, &m, &ctx.selection(vec![target_env]))?;
    let a = &ctx.cfg.adapt;
    let da = DAConfig {
        lambda_d: a.lambda_d,
        domain_mode: a.domain_mode,
        schedule: schedule(&a.lambda_ramp, ctx.cfg.train.epochs)?,
        split: None,
        train: ctx.cfg.train.clone(),
    };
    let classes = wflab::eval::class_count(&source).max(wflab::eval::class_count(&target));
    let arch = ArchitectureConfig::preset(ctx.cfg.model.preset, classes)?;
    let mut model = build_model(&arch, ctx.seed())?;
    let unlabeled = UnlabeledSamples::from_samples(&target.train);
    let history = da_train(&mut model, &source.train, &unlabeled, &source.validation, &da)?;
    let source_acc = evaluate(&model, &source.test)?.accuracy;
    println!("source test accuracy {source_acc:.4}");
    finish_training(ctx, "adapt", &model, &history, &target.test)
}

fn freeze_mask(model: &WfModel, kind: &str) -> Result<FreezeMask> {
    match kind {
        "conv" => Ok(FreezeMask::conv_layers(model)),
        "trunk" => Ok(FreezeMask::trunk(model)),
        "none" => FreezeMask::from_names(model, std::iter::empty::<String>()),
        other => Err(Error::Config(format!("unknown freeze set {other:?} (conv, trunk, none)"))),
    }
}

fn subset(samples: &[SampleVector], per_class: Option<usize>, seed: u64) -> Result<Vec<SampleVector>> {
    match per_class {
        Some(n) => stratified_subset(samples, n, seed),
        None => Ok(samples.to_vec()),
    }
}

pub fn finetune_cmd(ctx: &mut Ctx) -> Result<()> {
    let ckpt = path_of(&ctx.cfg.model.checkpoint, "--model")?;
    let mut model = load_model(&ckpt)?;
    ctx.cfg.train.mask = model.mask;
    ctx.cfg.model.preset = model.arch.preset;
    ctx.out()?;
    ctx.begin()?;
    let dir = ctx.data_dir()?;
    let m = load_manifest(&dir)?;
    let split = load_split(&dir, &m, &ctx.selection(ctx.cfg.data.envs.clone()))?;
    let f = &ctx.cfg.finetune;
    let seed = mix_seed(&[ctx.seed(), 0xF17E]);
    let tr = subset(&split.train, f.per_class, seed)?;
    let va = subset(&split.validation, f.per_class.map(|n| (n / 2).max(1)), seed)?;
    let mask = freeze_mask(&model, &f.freeze)?;
    let history = finetune(&mut model, &tr, &va, &mask, &ctx.cfg.train)?;
    println!("finetuned on {} samples with {} frozen tensors", tr.len(), mask.len());
    finish_training(ctx, "finetune", &model, &history, &split.test)
}

fn defense_config(ctx: &Ctx, kind: &str, a: f64, k: usize) -> Result<DefenseConfig> {
    let d = &ctx.cfg.defense;
    let seed = mix_seed(&[ctx.seed(), 0xDEF]);
    match kind {
        "none" => Ok(DefenseConfig::None),
        "inflation" => {
            let c = InflationConfig {
                a,
                basis: d.basis,
                targets: d.targets,
                seed,
            };
            if !(a >= 0.0) || !a.is_finite() {
                return Err(Error::Config(format!("--a must be non-negative, got {a}")));
            }
            Ok(DefenseConfig::Inflation(c))
        }
        "injection" => {
            let mut c = default_injection(k, d.patterns, seed)?;
            c.rotation = d.rotation;
            Ok(DefenseConfig::Injection(c))
        }
        other => Err(Error::Config(format!("unknown defense {other:?} (none, inflation, injection)"))),
    }
}

/// Indices of the traces that land in the test part under the by-trace rule.
fn test_trace_flags(m: &CorpusManifest) -> Result<Vec<bool>> {
    let mut flags = Vec::new();
    for f in &m.files {
        let n = f.traces.len();
        if n < 3 {
            return Err(Error::Config(format!(
                "{} has {n} traces; test-only defense needs at least 3 per file",
                f.file
            )));
        }
        flags.extend((0..n).map(|i| i + 1 == n));
    }
    Ok(flags)
}

pub fn defend(ctx: &Ctx) -> Result<()> {
    let out = ctx.begin()?.ok_or_else(|| Error::Config("defend needs --out".into()))?;
    let dir = ctx.data_dir()?;
    let m = load_manifest(&dir)?;
    let traces = load_traces(&dir, &m)?;
    let d = &ctx.cfg.defense;
    let cfg = defense_config(ctx, &d.kind, d.a, d.k)?;
    let is_test = match d.mode {
        DefendScope::TrainAndTest => vec![false; traces.len()],
        DefendScope::TestOnly => test_trace_flags(&m)?,
    };
    let (mut fit, mut test) = (Vec::new(), Vec::new());
    for (t, &flag) in traces.iter().zip(&is_test) {
        if flag { test.push(t.clone()) } else { fit.push(t.clone()) }
    }
    let defended = defend_dataset(&fit, &test, &cfg, d.mode)?;
    let (mut fit_iter, mut test_iter) = (defended.train.into_iter(), defended.test.into_iter());
    let merged: Vec<Trace> = is_test
        .iter()
        .map(|&flag| if flag { test_iter.next() } else { fit_iter.next() }.expect("one output per input"))
        .collect();
    let record = DefenseRecord {
        config: cfg,
        overhead: defended.summary,
    };
    print_overhead(&record.overhead);
    write_corpus(out, &merged, m.window, m.stride, Some(record))?;
    Ok(())
}

fn print_overhead(o: &OverheadSummary) {
    println!(
        "defended {} traces: delay x{:.4}  bytes +{:.4}  packets +{:.4}",
        o.traces, o.delay_multiplier, o.byte_overhead, o.packet_overhead
    );
}

fn pick_split(split: DatasetSplit, which: &str) -> Result<Vec<SampleVector>> {
    match which {
        "train" => Ok(split.train),
        "validation" | "val" => Ok(split.validation),
        "test" => Ok(split.test),
        "all" => Ok(split.train.into_iter().chain(split.validation).chain(split.test).collect()),
        other => Err(Error::Config(format!("unknown split {other:?} (train, validation, test, all)"))),
    }
}

fn print_report(r: &EvalReport, labels: &[String]) {
    let rows: Vec<Vec<String>> = (0..r.class_count())
        .map(|c| {
            vec![
                labels.get(c).cloned().unwrap_or_else(|| c.to_string()),
                r.support()[c].to_string(),
                format!("{:.4}", r.precision[c]),
                format!("{:.4}", r.recall[c]),
                format!("{:.4}", r.f1[c]),
            ]
        })
        .collect();
    print!("{}", render_table(&["class", "support", "precision", "recall", "f1"], &rows));
    println!("accuracy {:.4} on {} samples", r.accuracy, r.total);
}

pub fn eval(ctx: &Ctx, split_name: &str) -> Result<()> {
    if ctx.cfg.experiment.kind.is_some() {
        return experiment(ctx);
    }
    let ckpt = path_of(&ctx.cfg.model.checkpoint, "--model")?;
    let model = load_model(&ckpt)?;
    let dir = ctx.data_dir()?;
    let m = load_manifest(&dir)?;
    let split = load_split(&dir, &m, &ctx.selection(ctx.cfg.data.envs.clone()))?;
    let samples = pick_split(split, split_name)?;
    let report = evaluate(&model, &samples)?;
    print_report(&report, &model.manifest.labels);
    if let Some(out) = ctx.begin()? {
        write_json(&out.join("eval.json"), &report)?;
        append_results(
            out.join("results.jsonl"),
            &[ResultRecord::from_report("eval", split_name, &ctx.cfg, ctx.seed(), &report)],
        )?;
    }
    Ok(())
}

fn record(experiment: &str, cell: String, ctx: &Ctx, accuracy: f64) -> ResultRecord {
    ResultRecord {
        experiment: experiment.into(),
        cell,
        config_hash: config_hash(&ctx.cfg),
        seed: ctx.seed(),
        accuracy,
        metrics: Default::default(),
    }
}

fn experiment(ctx: &Ctx) -> Result<()> {
    let kind = ctx.cfg.experiment.kind.clone().unwrap_or_default();
    let out = ctx.begin()?;
    let dir = ctx.data_dir()?;
    let m = load_manifest(&dir)?;
    let x = &ctx.cfg.experiment;
    let cfg = ctx.experiment();
    let corpus = || load_split(&dir, &m, &ctx.selection(ctx.cfg.data.envs.clone()));
    let mut records = Vec::new();
    match kind.as_str() {
        "cross-domain" => {
            let mat = cross_domain_run(&corpus()?, &cfg)?;
            print!("{}", render_matrix(&mat));
            for (i, row) in mat.accuracy.iter().enumerate() {
                for (j, &a) in row.iter().enumerate() {
                    let cell = format!("train-env{}/test-env{}", mat.env_ids[i], mat.env_ids[j]);
                    records.push(record(&kind, cell, ctx, a));
                }
            }
        }
        "learning-curve" => {
            let target = ctx
                .cfg
                .data
                .target_env
                .ok_or_else(|| Error::Config("learning-curve needs --target-env".into()))?;
            let mode: CurveMode = x.curve_mode.parse()?;
            let curve = learning_curve_run(&corpus()?, target, &x.curve_sizes, mode, &cfg)?;
            print!("{}", curve_columns(&curve));
            for p in &curve.points {
                records.push(record(&kind, format!("{}-per-class", p.per_class), ctx, p.accuracy));
            }
        }
        "scaling" => {
            for p in website_scaling_run(&corpus()?, &x.site_counts, &cfg)? {
                println!("{:4} sites  accuracy {:.4}", p.sites, p.accuracy);
                records.push(record(&kind, format!("{}-sites", p.sites), ctx, p.accuracy));
            }
        }
        "ablation" => {
            for (mask, r) in ablation_run(&corpus()?, &ChannelMask::ALL, &cfg)? {
                println!("{:12} accuracy {:.4}", mask.name(), r.accuracy);
                records.push(record(&kind, mask.name().into(), ctx, r.accuracy));
            }
        }
        "defense-curve" => {
            let traces = split_traces(&load_traces(&dir, &m)?)?;
            let mut defenses = vec![DefenseConfig::None];
            for &a in &x.inflation_a {
                defenses.push(defense_config(ctx, "inflation", a, 0)?);
            }
            for &k in &x.injection_k {
                defenses.push(defense_config(ctx, "injection", 0.0, k)?);
            }
            for p in defense_curve_run(&traces, &defenses, m.window, m.stride, &cfg)? {
                println!(
                    "{:16} accuracy {:.4}  delay x{:.3}  bytes +{:.4}  packets +{:.4}",
                    p.label,
                    p.report.accuracy,
                    p.overhead.delay_multiplier,
                    p.overhead.byte_overhead,
                    p.overhead.packet_overhead
                );
                let mut r = record(&kind, p.label.clone(), ctx, p.report.accuracy);
                r.metrics.insert("delay_multiplier".into(), p.overhead.delay_multiplier);
                r.metrics.insert("byte_overhead".into(), p.overhead.byte_overhead);
                r.metrics.insert("packet_overhead".into(), p.overhead.packet_overhead);
                records.push(r);
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown experiment {other:?} (cross-domain, learning-curve, scaling, ablation, defense-curve)"
            )))
        }
    }
    if let Some(out) = out {
        append_results(out.join("results.jsonl"), &records)?;
    }
    Ok(())
}

pub fn report(results: &Path) -> Result<()> {
    print!("{}", render_results(&read_results(results)?));
    Ok(())
}
