mod commands;
mod config;
mod corpus;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wflab::adapt::DomainMode;
use wflab::defense::{Basis, DefendScope, Rotation, Targets};
use wflab::model::Preset;
use wflab::traffic::ChannelMask;
use wflab::{ErrorClass, Result};

use commands::Ctx;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "wflab", version, about = "Website-fingerprinting laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Add CSV traces (timestamp_us,size_bytes) to a corpus directory.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        site: u16,
        #[arg(long)]
        env: u16,
        #[command(flatten)]
        synth: SynthArgs,
        files: Vec<PathBuf>,
    },
    /// Train a classifier on a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Domain-adversarial training toward an unlabeled target env.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        lambda_d: Option<f64>,
        #[arg(long)]
        domain_mode: Option<DomainMode>,
        /// `default`, `constant` or a ramp length in epochs.
        #[arg(long)]
        lambda_ramp: Option<String>,
    },
    /// Continue training a checkpoint with some parameters frozen.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        /// `conv`, `trunk` or `none`.
        #[arg(long)]
        freeze: Option<String>,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Apply a traffic defense to every trace of a corpus.
    Defend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// `none`, `inflation` or `injection`.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        a: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        basis: Option<Basis>,
        #[arg(long)]
        targets: Option<Targets>,
        /// `both` (train+test) or `test-only`.
        #[arg(long)]
        mode: Option<DefendScope>,
        #[arg(long)]
        patterns: Option<usize>,
        #[arg(long)]
        rotation: Option<Rotation>,
    },
    /// Evaluate a checkpoint, or run an experiment grid with --experiment.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        /// `train`, `validation`, `test` or `all`.
        #[arg(long, default_value = "test")]
        split: String,
        /// `cross-domain`, `learning-curve`, `scaling`, `ablation` or `defense-curve`.
        #[arg(long)]
        experiment: Option<String>,
    },
    /// Render a results file as a table.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; falls back to the config file, then WFLAB_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for prediction and corpus generation.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    sites: Option<usize>,
    #[arg(long)]
    envs: Option<usize>,
    #[arg(long)]
    packets: Option<usize>,
    #[arg(long)]
    traces: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated env ids to use.
    #[arg(long = "envs", value_delimiter = ',')]
    env_ids: Option<Vec<u16>>,
    /// Use only the first N sites.
    #[arg(long = "sites")]
    first_sites: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    source_envs: Option<Vec<u16>>,
    #[arg(long)]
    target_env: Option<u16>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    mask: Option<ChannelMask>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl SynthArgs {
    fn apply(self, c: &mut RunConfig) {
        let s = &mut c.synth;
        set(&mut s.sites, self.sites);
        set(&mut s.envs, self.envs);
        set(&mut s.packets_per_trace, self.packets);
        set(&mut s.traces_per_site_env, self.traces);
        set(&mut s.spread, self.spread);
        set(&mut s.window, self.window);
        set(&mut s.stride, self.stride);
    }
}

impl DataArgs {
    fn apply(self, c: &mut RunConfig) {
        let d = &mut c.data;
        if self.data.is_some() {
            d.dir = self.data;
        }
        set(&mut d.envs, self.env_ids);
        if self.first_sites.is_some() {
            d.sites = self.first_sites;
        }
        set(&mut d.source_envs, self.source_envs);
        if self.target_env.is_some() {
            d.target_env = self.target_env;
        }
    }
}

impl TrainArgs {
    fn apply(self, c: &mut RunConfig) -> Result<()> {
        set(&mut c.model.preset, self.preset);
        let t = &mut c.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.mask, self.mask);
        if self.patience.is_some() {
            t.patience = self.patience;
        }
        if let Some(lr) = self.lr {
            t.optimizer = t.optimizer.with_lr(lr)?;
        }
        Ok(())
    }
}

fn context(common: Common, edit: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<Ctx> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    edit(&mut cfg)?;
    cfg.resolve_seed(common.seed)?;
    if let Some(n) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| wflab::Error::Config(format!("--jobs: {e}")))?;
    }
    Ok(Ctx { cfg, out: common.out })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, synth } => commands::synth(&context(common, |c| {
            synth.apply(c);
            Ok(())
        })?),
        Command::Ingest {
            common,
            site,
            env,
            synth,
            files,
        } => commands::ingest(
            &context(common, |c| {
                synth.apply(c);
                Ok(())
            })?,
            site,
            env,
            &files,
        ),
        Command::Train { common, data, train } => commands::train_cmd(&context(common, |c| {
            data.apply(c);
            train.apply(c)
        })?),
        Command::Adapt {
            common,
            data,
            train,
            lambda_d,
            domain_mode,
            lambda_ramp,
        } => commands::adapt(&context(common, |c| {
            data.apply(c);
            train.apply(c)?;
            set(&mut c.adapt.lambda_d, lambda_d);
            set(&mut c.adapt.domain_mode, domain_mode);
            set(&mut c.adapt.lambda_ramp, lambda_ramp);
            Ok(())
        })?),
        Command::Finetune {
            common,
            data,
            train,
            model,
            freeze,
            per_class,
        } => commands::finetune_cmd(&mut context(common, |c| {
            data.apply(c);
            train.apply(c)?;
            if model.is_some() {
                c.model.checkpoint = model;
            }
            set(&mut c.finetune.freeze, freeze);
            if per_class.is_some() {
                c.finetune.per_class = per_class;
            }
            Ok(())
        })?),
        Command::Defend {
            common,
            data,
            kind,
            a,
            k,
            basis,
            targets,
            mode,
            patterns,
            rotation,
        } => commands::defend(&context(common, |c| {
            if data.is_some() {
                c.data.dir = data;
            }
            let d = &mut c.defense;
            set(&mut d.kind, kind);
            set(&mut d.a, a);
            set(&mut d.k, k);
            set(&mut d.basis, basis);
            set(&mut d.targets, targets);
            set(&mut d.mode, mode);
            set(&mut d.patterns, patterns);
            set(&mut d.rotation, rotation);
            Ok(())
        })?),
        Command::Eval {
            common,
            data,
            train,
            model,
            split,
            experiment,
        } => commands::eval(
            &context(common, |c| {
                data.apply(c);
                train.apply(c)?;
                if model.is_some() {
                    c.model.checkpoint = model;
                }
                if experiment.is_some() {
                    c.experiment.kind = experiment;
                }
                Ok(())
            })?,
            &split,
        ),
        Command::Report { results } => commands::report(&results),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
