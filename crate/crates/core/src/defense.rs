//! Traffic-randomization defenses and their exact overhead accounting.
//!
//! * Inflation adds `ceil(U(0, X))` microseconds to each inter-arrival time
//!   and/or bytes to each size, with `X = a * basis` measured on the trace.
//! * Injection appends `k` trigger packets after every complete span of
//!   original packets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::mix_seed;
use crate::traffic::{PacketRecord, Trace, WINDOW_LEN};

pub const INFLATION_SWEEP: [f64; 10] = [15.0, 20.0, 25.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0];
pub const INJECTION_SWEEP: [usize; 5] = [10, 25, 35, 40, 50];
pub const TRIGGER_SIZE_RANGE: (u32, u32) = (50, 250);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    Mean,
    Stddev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Targets {
    Jitter,
    Size,
    Both,
}

impl Targets {
    fn jitter(self) -> bool {
        matches!(self, Targets::Jitter | Targets::Both)
    }

    fn size(self) -> bool {
        matches!(self, Targets::Size | Targets::Both)
    }
}

macro_rules! from_str_kebab {
    ($t:ty, $what:literal, $($s:literal => $v:expr),+) => {
        impl std::str::FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), s))),
                }
            }
        }
    };
}

from_str_kebab!(Basis, "basis", "mean" => Basis::Mean, "stddev" => Basis::Stddev);
from_str_kebab!(Targets, "inflation target", "jitter" => Targets::Jitter, "size" => Targets::Size, "both" => Targets::Both);
from_str_kebab!(Rotation, "rotation", "per-trace" => Rotation::PerTrace, "per-day" => Rotation::PerDaySimulated, "per-day-simulated" => Rotation::PerDaySimulated);
from_str_kebab!(DefendScope, "defense scope", "train+test" => DefendScope::TrainAndTest, "both" => DefendScope::TrainAndTest, "test-only" => DefendScope::TestOnly);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InflationConfig {
    pub a: f64,
    pub basis: Basis,
    pub targets: Targets,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerPattern {
    pub id: u32,
    pub sizes: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rotation {
    /// Each trace draws its own pattern.
    PerTrace,
    /// Traces sharing an `epoch_tag` (a simulated day) share a pattern.
    PerDaySimulated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    /// Packets inserted per span.
    pub k: usize,
    /// Original packets between insertions.
    pub span: usize,
    pub pool: Vec<TriggerPattern>,
    pub rotation: Rotation,
    pub seed: u64,
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.span == 0 {
            return Err(Error::Config("injection span must be positive".into()));
        }
        if self.k > 0 && self.pool.is_empty() {
            return Err(Error::Config("injection with k > 0 needs a non-empty trigger pool".into()));
        }
        if self.pool.iter().any(|p| p.sizes.is_empty() || p.sizes.contains(&0)) {
            return Err(Error::Config("trigger patterns need at least one packet and positive sizes".into()));
        }
        Ok(())
    }
}

/// Overheads with the raw quantities they are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OverheadReport {
    pub original_duration_us: f64,
    pub defended_duration_us: f64,
    pub original_bytes: u64,
    pub added_bytes: u64,
    pub original_packets: u64,
    pub added_packets: u64,
}

impl OverheadReport {
    /// Measures the overhead of `defended` relative to `original` from the
    /// traces alone.
    pub fn measure(original: &Trace, defended: &Trace) -> Self {
        Self {
            original_duration_us: original.duration_us(),
            defended_duration_us: defended.duration_us(),
            original_bytes: original.total_bytes(),
            added_bytes: defended.total_bytes().saturating_sub(original.total_bytes()),
            original_packets: original.len() as u64,
            added_packets: (defended.len() as u64).saturating_sub(original.len() as u64),
        }
    }

    /// Defended over original duration (1 when both are zero).
    pub fn delay_multiplier(&self) -> f64 {
        if self.original_duration_us == 0.0 {
            return if self.defended_duration_us == 0.0 { 1.0 } else { f64::INFINITY };
        }
        self.defended_duration_us / self.original_duration_us
    }

    pub fn byte_overhead(&self) -> f64 {
        ratio(self.added_bytes, self.original_bytes)
    }

    pub fn packet_overhead(&self) -> f64 {
        ratio(self.added_packets, self.original_packets)
    }
}

fn ratio(added: u64, original: u64) -> f64 {
    if original == 0 {
        0.0
    } else {
        added as f64 / original as f64
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

fn gaps(trace: &Trace) -> impl Iterator<Item = f64> + Clone + '_ {
    trace.packets().windows(2).map(|w| w[1].timestamp_us - w[0].timestamp_us)
}

/// Whole-unit draw `ceil(U(0, x))`, zero when `x` is zero. Always consumes
/// one random number.
fn draw_up(rng: &mut ChaCha8Rng, x: f64) -> f64 {
    let u: f64 = rng.random();
    (u * x).ceil()
}

pub fn apply_inflation(trace: &Trace, cfg: &InflationConfig) -> Result<(Trace, OverheadReport)> {
    if trace.is_empty() {
        return Err(Error::EmptyInput("cannot inflate an empty trace"));
    }
    if !(cfg.a >= 0.0) || !cfg.a.is_finite() {
        return Err(Error::Config(format!("inflation coefficient must be non-negative, got {}", cfg.a)));
    }
    let pick = |(m, s): (f64, f64)| match cfg.basis {
        Basis::Mean => m,
        Basis::Stddev => s,
    };
    let x_jitter = cfg.a * pick(mean_std(gaps(trace)));
    let x_size = cfg.a * pick(mean_std(trace.packets().iter().map(|p| f64::from(p.size))));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let packets = trace.packets();
    let mut out = Vec::with_capacity(packets.len());
    let (mut added_delay, mut added_bytes) = (0.0f64, 0u64);
    let mut t = packets[0].timestamp_us;
    for (i, p) in packets.iter().enumerate() {
        let dj = draw_up(&mut rng, x_jitter);
        let ds = draw_up(&mut rng, x_size);
        if i > 0 {
            let extra = if cfg.targets.jitter() { dj } else { 0.0 };
            t += packets[i].timestamp_us - packets[i - 1].timestamp_us + extra;
            added_delay += extra;
        }
        let size = if cfg.targets.size() {
            let grown = (f64::from(p.size) + ds).min(f64::from(u32::MAX)) as u32;
            grown.max(1)
        } else {
            p.size.max(1)
        };
        added_bytes += u64::from(size - p.size);
        out.push(PacketRecord::new(t, size));
    }
    let defended = trace.with_packets(out)?;
    let report = OverheadReport {
        original_duration_us: trace.duration_us(),
        defended_duration_us: trace.duration_us() + added_delay,
        original_bytes: trace.total_bytes(),
        added_bytes,
        original_packets: trace.len() as u64,
        added_packets: 0,
    };
    Ok((defended, report))
}

/// `n_patterns` distinct patterns of `count` packets with sizes drawn
/// uniformly from `size_range` (inclusive), or all equal to `size_override`.
pub fn make_trigger_pool(
    n_patterns: usize,
    size_range: (u32, u32),
    count: usize,
    seed: u64,
    size_override: Option<u32>,
) -> Result<Vec<TriggerPattern>> {
    let (lo, hi) = size_range;
    if n_patterns == 0 || count == 0 || lo == 0 || lo > hi {
        return Err(Error::Config(format!(
            "trigger pool needs patterns, packets and a valid size range, got {n_patterns} x {count} in [{lo}, {hi}]"
        )));
    }
    if size_override == Some(0) {
        return Err(Error::Config("trigger size override must be positive".into()));
    }
    if size_override.is_some() && n_patterns > 1 {
        return Err(Error::Config("a fixed trigger size allows only one distinct pattern".into()));
    }
    let distinct = f64::from(hi - lo + 1).powi(count.min(64) as i32);
    if size_override.is_none() && distinct < n_patterns as f64 {
        return Err(Error::Config("size range too narrow for that many distinct patterns".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x7216]));
    let mut pool: Vec<TriggerPattern> = Vec::with_capacity(n_patterns);
    while pool.len() < n_patterns {
        let sizes: Vec<u32> = match size_override {
            Some(s) => vec![s; count],
            None => (0..count).map(|_| rng.random_range(lo..=hi)).collect(),
        };
        if pool.iter().all(|p| p.sizes != sizes) {
            pool.push(TriggerPattern {
                id: pool.len() as u32,
                sizes,
            });
        }
    }
    Ok(pool)
}

pub fn apply_injection(trace: &Trace, cfg: &InjectionConfig) -> Result<(Trace, OverheadReport)> {
    cfg.validate()?;
    if trace.is_empty() {
        return Err(Error::EmptyInput("cannot inject into an empty trace"));
    }
    if cfg.k == 0 {
        return Ok((trace.clone(), OverheadReport::measure(trace, trace)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pattern = match cfg.rotation {
        Rotation::PerTrace => &cfg.pool[rng.random_range(0..cfg.pool.len())],
        Rotation::PerDaySimulated => {
            let day = Sha256::digest(trace.epoch_tag.as_bytes());
            let key = mix_seed(&[cfg.seed, u64::from_le_bytes(day[..8].try_into().unwrap())]);
            &cfg.pool[(key % cfg.pool.len() as u64) as usize]
        }
    };
    let (mean_gap, _) = mean_std(gaps(trace));
    let packets = trace.packets();
    let spans = packets.len() / cfg.span;
    let mut out = Vec::with_capacity(packets.len() + cfg.k * spans);
    let (mut added_delay, mut added_bytes) = (0.0f64, 0u64);
    let mut t = packets[0].timestamp_us;
    for (i, p) in packets.iter().enumerate() {
        if i > 0 {
            t += p.timestamp_us - packets[i - 1].timestamp_us;
        }
        out.push(PacketRecord::new(t, p.size));
        if (i + 1) % cfg.span == 0 {
            for j in 0..cfg.k {
                let gap = (rng.random::<f64>() * mean_gap).round();
                t += gap;
                added_delay += gap;
                let size = pattern.sizes[j % pattern.sizes.len()];
                added_bytes += u64::from(size);
                out.push(PacketRecord::new(t, size));
            }
        }
    }
    let defended = trace.with_packets(out)?;
    let report = OverheadReport {
        original_duration_us: trace.duration_us(),
        defended_duration_us: trace.duration_us() + added_delay,
        original_bytes: trace.total_bytes(),
        added_bytes,
        original_packets: trace.len() as u64,
        added_packets: (cfg.k * spans) as u64,
    };
    Ok((defended, report))
}

/// A defense with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    None,
    Inflation(InflationConfig),
    Injection(InjectionConfig),
}

impl DefenseConfig {
    fn seed(&self) -> u64 {
        match self {
            DefenseConfig::None => 0,
            DefenseConfig::Inflation(c) => c.seed,
            DefenseConfig::Injection(c) => c.seed,
        }
    }

    /// Applies the defense with its seed replaced by `seed`.
    pub fn apply_with_seed(&self, trace: &Trace, seed: u64) -> Result<(Trace, OverheadReport)> {
        match self {
            DefenseConfig::None => Ok((trace.clone(), OverheadReport::measure(trace, trace))),
            DefenseConfig::Inflation(c) => apply_inflation(trace, &InflationConfig { seed, ..*c }),
            DefenseConfig::Injection(c) => apply_injection(
                trace,
                &InjectionConfig {
                    seed,
                    ..c.clone()
                },
            ),
        }
    }

    /// Short label for reports, e.g. `inflation-a90` or `injection-k35`.
    pub fn label(&self) -> String {
        match self {
            DefenseConfig::None => "none".into(),
            DefenseConfig::Inflation(c) => format!("inflation-a{}", c.a),
            DefenseConfig::Injection(c) => format!("injection-k{}", c.k),
        }
    }
}

/// Seed for one trace: the defense seed mixed with a digest of the trace
/// content, so a trace's defended form never depends on its neighbours.
pub fn per_trace_seed(seed: u64, trace: &Trace) -> u64 {
    let mut h = Sha256::new();
    h.update(trace.site_label.to_le_bytes());
    h.update(trace.env_id.to_le_bytes());
    h.update(trace.epoch_tag.as_bytes());
    for p in trace.packets() {
        h.update(p.timestamp_us.to_le_bytes());
        h.update(p.size.to_le_bytes());
    }
    let d = h.finalize();
    mix_seed(&[seed, u64::from_le_bytes(d[..8].try_into().unwrap())])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefendScope {
    TrainAndTest,
    TestOnly,
}

/// Corpus overhead: every ratio pools the per-trace quantities first, so it
/// is the size-weighted mean of the per-trace ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OverheadSummary {
    pub traces: usize,
    pub delay_multiplier: f64,
    pub byte_overhead: f64,
    pub packet_overhead: f64,
    /// Unweighted mean of the per-trace delay multipliers.
    pub mean_trace_delay_multiplier: f64,
}

impl OverheadSummary {
    pub fn from_reports(reports: &[OverheadReport]) -> Self {
        let n = reports.len();
        if n == 0 {
            return Self::default();
        }
        let mut pooled = OverheadReport::default();
        for r in reports {
            pooled.original_duration_us += r.original_duration_us;
            pooled.defended_duration_us += r.defended_duration_us;
            pooled.original_bytes += r.original_bytes;
            pooled.added_bytes += r.added_bytes;
            pooled.original_packets += r.original_packets;
            pooled.added_packets += r.added_packets;
        }
        Self {
            traces: n,
            delay_multiplier: pooled.delay_multiplier(),
            byte_overhead: pooled.byte_overhead(),
            packet_overhead: pooled.packet_overhead(),
            mean_trace_delay_multiplier: reports.iter().map(OverheadReport::delay_multiplier).sum::<f64>() / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefendedCorpus {
    pub train: Vec<Trace>,
    pub test: Vec<Trace>,
    /// One report per defended trace, train traces first.
    pub reports: Vec<OverheadReport>,
    pub summary: OverheadSummary,
}

fn defend_all(traces: &[Trace], cfg: &DefenseConfig) -> Result<Vec<(Trace, OverheadReport)>> {
    traces
        .par_iter()
        .map(|t| cfg.apply_with_seed(t, per_trace_seed(cfg.seed(), t)))
        .collect()
}

/// Defends test traces, and training traces too unless `scope` is
/// [`DefendScope::TestOnly`].
pub fn defend_dataset(train: &[Trace], test: &[Trace], cfg: &DefenseConfig, scope: DefendScope) -> Result<DefendedCorpus> {
    let mut reports = Vec::new();
    let train_out = match scope {
        DefendScope::TestOnly => train.to_vec(),
        DefendScope::TrainAndTest => {
            let (t, r): (Vec<_>, Vec<_>) = defend_all(train, cfg)?.into_iter().unzip();
            reports.extend(r);
            t
        }
    };
    let (test_out, r): (Vec<_>, Vec<_>) = defend_all(test, cfg)?.into_iter().unzip();
    reports.extend(r);
    Ok(DefendedCorpus {
        train: train_out,
        test: test_out,
        summary: OverheadSummary::from_reports(&reports),
        reports,
    })
}

/// An injection config with `k` packets per window-length span, a pool of
/// `patterns` triggers of `k` packets and per-trace rotation.
pub fn default_injection(k: usize, patterns: usize, seed: u64) -> Result<InjectionConfig> {
    let pool = if k == 0 {
        Vec::new()
    } else {
        make_trigger_pool(patterns, TRIGGER_SIZE_RANGE, k, seed, None)?
    };
    Ok(InjectionConfig {
        k,
        span: WINDOW_LEN,
        pool,
        rotation: Rotation::PerTrace,
        seed,
    })
}
