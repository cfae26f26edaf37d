use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check, mix_seed, uniform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeComponent {
    pub mean: f64,
    pub std: f64,
    pub weight: f64,
}

/// Parameters of `exp(N(log_mean, log_std^2))`, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogNormal {
    pub log_mean: f64,
    pub log_std: f64,
}

impl LogNormal {
    /// The log-normal whose arithmetic mean is `mean`.
    pub fn with_mean(mean: f64, log_std: f64) -> Self {
        Self {
            log_mean: mean.ln() - log_std * log_std / 2.0,
            log_std,
        }
    }

    pub fn mean(&self) -> f64 {
        (self.log_mean + self.log_std * self.log_std / 2.0).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteProfile {
    pub site_label: u16,
    pub size_mixture: Vec<SizeComponent>,
    pub burst_len_geometric_p: f64,
    pub intra_burst_jitter: LogNormal,
    pub inter_burst_jitter: LogNormal,
}

impl SiteProfile {
    pub fn validate(&self) -> Result<()> {
        let label = self.site_label;
        check(!self.size_mixture.is_empty(), || format!("site {label}: empty size mixture"))?;
        let total: f64 = self.size_mixture.iter().map(|c| c.weight).sum();
        check((total - 1.0).abs() <= 1e-9, || {
            format!("site {label}: mixture weights sum to {total}")
        })?;
        for c in &self.size_mixture {
            check(c.weight >= 0.0 && c.std >= 0.0 && c.mean.is_finite(), || {
                format!("site {label}: invalid mixture component {c:?}")
            })?;
        }
        let p = self.burst_len_geometric_p;
        check(p > 0.0 && p <= 1.0, || format!("site {label}: burst p {p} outside (0, 1]"))?;
        for d in [self.intra_burst_jitter, self.inter_burst_jitter] {
            check(d.log_std >= 0.0 && d.log_mean.is_finite(), || {
                format!("site {label}: invalid jitter distribution {d:?}")
            })?;
        }
        Ok(())
    }

    /// Expected gap between packets (ignoring rounding) under `env`.
    pub fn expected_jitter(&self, env: &EnvProfile) -> f64 {
        let p = self.burst_len_geometric_p;
        let noise = (env.jitter_noise_std * env.jitter_noise_std / 2.0).exp();
        (p * self.inter_burst_jitter.mean() * env.cpu_slowdown + (1.0 - p) * self.intra_burst_jitter.mean())
            * env.latency_scale
            * noise
    }

    /// Expected size before scaling and clamping.
    pub fn expected_raw_size(&self) -> f64 {
        self.size_mixture.iter().map(|c| c.mean * c.weight).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvProfile {
    pub env_id: u16,
    /// Multiplies every gap.
    pub latency_scale: f64,
    /// Largest size on the wire; values above 1500 model segmentation offload.
    pub mtu_cap: u32,
    pub size_scale: f64,
    /// Standard deviation of extra log-space noise on each gap.
    pub jitter_noise_std: f64,
    /// Extra multiplier on inter-burst gaps.
    pub cpu_slowdown: f64,
}

impl EnvProfile {
    pub fn validate(&self) -> Result<()> {
        let id = self.env_id;
        check(self.latency_scale > 0.0 && self.latency_scale.is_finite(), || {
            format!("env {id}: latency_scale must be positive")
        })?;
        check(self.mtu_cap >= 64, || format!("env {id}: mtu_cap below 64"))?;
        check(self.size_scale > 0.0 && self.size_scale.is_finite(), || {
            format!("env {id}: size_scale must be positive")
        })?;
        check(self.jitter_noise_std >= 0.0, || format!("env {id}: negative jitter noise"))?;
        check(self.cpu_slowdown >= 1.0, || format!("env {id}: cpu_slowdown below 1"))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub master_seed: u64,
    pub packets_per_trace: usize,
    pub traces_per_site_env: usize,
    pub sites: Vec<SiteProfile>,
    pub envs: Vec<EnvProfile>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check(!self.sites.is_empty(), || "config has no sites".into())?;
        check(!self.envs.is_empty(), || "config has no environments".into())?;
        check(self.packets_per_trace > 0, || "packets_per_trace must be positive".into())?;
        check(self.traces_per_site_env > 0, || "traces_per_site_env must be positive".into())?;
        for s in &self.sites {
            s.validate()?;
        }
        for e in &self.envs {
            e.validate()?;
        }
        let mut labels: Vec<u16> = self.sites.iter().map(|s| s.site_label).collect();
        labels.sort_unstable();
        labels.dedup();
        check(labels.len() == self.sites.len(), || "duplicate site labels".into())?;
        let mut ids: Vec<u16> = self.envs.iter().map(|e| e.env_id).collect();
        ids.sort_unstable();
        ids.dedup();
        check(ids.len() == self.envs.len(), || "duplicate env ids".into())?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same config restricted to the given env ids (order preserved).
    pub fn with_envs(&self, env_ids: &[u16]) -> Self {
        Self {
            envs: self.envs.iter().filter(|e| env_ids.contains(&e.env_id)).cloned().collect(),
            ..self.clone()
        }
    }

    /// Same config restricted to the first `n` sites.
    pub fn with_first_sites(&self, n: usize) -> Self {
        Self {
            sites: self.sites.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }
}

/// Measured environment averages, sorted by mean gap: (mean inter-packet
/// interval in microseconds, mean packet size in bytes).
pub const ENV_ANCHORS: [(f64, f64); 8] = [
    (2604.0, 1180.0),
    (3959.0, 2014.0),
    (4553.0, 1281.0),
    (6052.0, 2579.0),
    (7185.0, 2125.0),
    (8708.0, 2452.0),
    (9418.0, 2670.0),
    (10893.0, 2711.0),
];

/// How far site profiles stray from the shared base profile; larger values
/// make sites easier to tell apart.
pub const DEFAULT_SITE_SPREAD: f64 = 0.3;

const BASE_SIZES: [f64; 3] = [300.0, 800.0, 1300.0];
const BASE_BURST_P: f64 = 0.35;
const BASE_INTRA_US: f64 = 100.0;
const BASE_INTER_US: f64 = 12_000.0;
const INTRA_LOG_STD: f64 = 0.5;
/// Burst structure survives environment scaling, so it carries the site
/// identity in the jitter channel.
const BURST_RANGE: f64 = 1.25;
const INTER_LOG_STD: f64 = 0.8;

fn make_site(label: u16, spread: f64, rng: &mut ChaCha8Rng) -> SiteProfile {
    let means: Vec<f64> = BASE_SIZES
        .iter()
        .map(|&m| m * (spread * uniform(rng, -0.5, 0.5)).exp())
        .collect();
    let raw_w: Vec<f64> = (0..BASE_SIZES.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            (spread * z).exp()
        })
        .collect();
    let total: f64 = raw_w.iter().sum();
    let mut size_mixture: Vec<SizeComponent> = means
        .iter()
        .zip(&raw_w)
        .map(|(&mean, &w)| SizeComponent {
            mean,
            std: 0.08 * mean + 10.0,
            weight: w / total,
        })
        .collect();
    // Make the weights sum to one exactly in floating point.
    let head: f64 = size_mixture[..size_mixture.len() - 1].iter().map(|c| c.weight).sum();
    size_mixture.last_mut().unwrap().weight = 1.0 - head;

    let p = BASE_BURST_P * (spread * uniform(rng, -BURST_RANGE, BURST_RANGE)).exp();
    let intra = BASE_INTRA_US * (spread * uniform(rng, -1.0, 1.0)).exp();
    let inter = BASE_INTER_US * (spread * uniform(rng, -1.0, 1.0)).exp();
    SiteProfile {
        site_label: label,
        size_mixture,
        burst_len_geometric_p: p.min(1.0),
        intra_burst_jitter: LogNormal::with_mean(intra, INTRA_LOG_STD),
        inter_burst_jitter: LogNormal::with_mean(inter, INTER_LOG_STD),
    }
}

/// Target (mean gap, mean size) of env `index` out of `count`: the measured
/// anchors are interpolated so that any number of envs spans the full range
/// (log-linear in the gap, linear in size).
fn env_target(index: usize, count: usize) -> (f64, f64) {
    if count == 1 {
        return ENV_ANCHORS[1];
    }
    let last = ENV_ANCHORS.len() - 1;
    let t = index as f64 * last as f64 / (count - 1) as f64;
    let i = (t.floor() as usize).min(last - 1);
    let f = t - i as f64;
    let (a, b) = (ENV_ANCHORS[i], ENV_ANCHORS[i + 1]);
    let gap = (a.0.ln() * (1.0 - f) + b.0.ln() * f).exp();
    (gap, a.1 * (1.0 - f) + b.1 * f)
}

/// A synthetic corpus description with default site and environment
/// profiles. Env means land on the measured ranges: mean gaps between 2.6 and
/// 10.9 ms and mean sizes between 1180 and 2711 bytes.
pub fn default_corpus(n_sites: usize, n_envs: usize, master_seed: u64) -> Result<SynthConfig> {
    default_corpus_with_spread(n_sites, n_envs, master_seed, DEFAULT_SITE_SPREAD)
}

pub fn default_corpus_with_spread(n_sites: usize, n_envs: usize, master_seed: u64, spread: f64) -> Result<SynthConfig> {
    if !(1..=64).contains(&n_sites) || !(1..=16).contains(&n_envs) {
        return Err(Error::Config(format!(
            "need 1..=64 sites and 1..=16 envs, got {n_sites} and {n_envs}"
        )));
    }
    if !(spread >= 0.0) {
        return Err(Error::Config(format!("site spread must be non-negative, got {spread}")));
    }
    let mut site_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[master_seed, 0x5173]));
    let sites: Vec<SiteProfile> = (0..n_sites)
        .map(|s| make_site(s as u16, spread, &mut site_rng))
        .collect();

    let mut env_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[master_seed, 0xE4F]));
    let envs = (0..n_envs)
        .map(|e| {
            let (gap, size) = env_target(e, n_envs);
            let cpu_slowdown = uniform(&mut env_rng, 1.0, 1.5);
            let jitter_noise_std = uniform(&mut env_rng, 0.05, 0.25);
            let unit = EnvProfile {
                env_id: e as u16,
                latency_scale: 1.0,
                mtu_cap: if size < 1500.0 { 1500 } else { 9000 },
                size_scale: 1.0,
                jitter_noise_std,
                cpu_slowdown,
            };
            let base_gap = sites.iter().map(|s| s.expected_jitter(&unit)).sum::<f64>() / n_sites as f64;
            let base_size = sites.iter().map(SiteProfile::expected_raw_size).sum::<f64>() / n_sites as f64;
            EnvProfile {
                latency_scale: gap / base_gap,
                size_scale: size / base_size,
                ..unit
            }
        })
        .collect();

    let cfg = SynthConfig {
        master_seed,
        packets_per_trace: 10_000,
        traces_per_site_env: 2,
        sites,
        envs,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_cover_measured_ranges() {
        let (g0, s0) = env_target(0, 8);
        let (g7, s7) = env_target(7, 8);
        assert_eq!((g0.round(), s0), (2604.0, 1180.0));
        assert_eq!((g7.round(), s7), (10893.0, 2711.0));
        for n in 1..=16 {
            for e in 0..n {
                let (g, s) = env_target(e, n);
                assert!((2603.9..=10893.1).contains(&g) && (1180.0..=2711.0).contains(&s));
            }
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = default_corpus(3, 2, 5).unwrap();
        let back = SynthConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_catches_bad_profiles() {
        let mut cfg = default_corpus(2, 1, 5).unwrap();
        cfg.sites[0].size_mixture[0].weight += 0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = default_corpus(2, 1, 5).unwrap();
        cfg.envs[0].mtu_cap = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = default_corpus(2, 1, 5).unwrap();
        cfg.sites[1].burst_len_geometric_p = 0.0;
        assert!(cfg.validate().is_err());
        assert!(default_corpus(0, 1, 0).is_err());
        assert!(default_corpus(65, 1, 0).is_err());
        assert!(default_corpus(1, 17, 0).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = default_corpus(1, 1, 5).unwrap().to_toml().unwrap();
        text.insert_str(0, "bogus = 1\n");
        assert!(SynthConfig::from_toml(&text).is_err());
    }
}
