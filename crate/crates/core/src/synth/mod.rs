//! Deterministic synthetic traffic: per-site burst/size/timing profiles shaped
//! by per-environment latency, MTU and CPU effects.

mod profile;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::traffic::{PacketRecord, Trace};

pub use profile::{
    default_corpus, default_corpus_with_spread, EnvProfile, LogNormal, SiteProfile, SizeComponent, SynthConfig,
    DEFAULT_SITE_SPREAD, ENV_ANCHORS,
};

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one seed by chained SplitMix64 mixing.
pub fn mix_seed(words: &[u64]) -> u64 {
    words.iter().fold(0u64, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Seed of one corpus trace; depends only on its own coordinates.
pub fn trace_seed(master_seed: u64, site_label: u16, env_id: u16, trace_index: usize) -> u64 {
    mix_seed(&[master_seed, u64::from(site_label), u64::from(env_id), trace_index as u64])
}

/// Epoch tag attached to the `index`-th trace of a (site, env) pair.
pub fn day_tag(index: usize) -> String {
    format!("day-{index}")
}

/// Generates one trace of `packets` packets.
///
/// Each packet starts a new burst with probability `p` (the first always
/// does), so burst lengths are geometric on `{1, 2, ...}`. Burst-opening
/// packets draw their gap from the inter-burst log-normal, the rest from the
/// intra-burst one. Every packet consumes the same number of random draws so
/// changing one parameter never desynchronizes the stream.
pub fn generate_trace(site: &SiteProfile, env: &EnvProfile, seed: u64, packets: usize, epoch_tag: &str) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cumulative: Vec<f64> = site
        .size_mixture
        .iter()
        .scan(0.0, |acc, c| {
            *acc += c.weight;
            Some(*acc)
        })
        .collect();
    let total_weight = cumulative.last().copied().unwrap_or(1.0);

    let mut out = Vec::with_capacity(packets);
    let mut t = 0.0f64;
    for i in 0..packets {
        let u_burst: f64 = rng.random();
        let u_comp: f64 = rng.random::<f64>() * total_weight;
        let z_size: f64 = StandardNormal.sample(&mut rng);
        let z_gap: f64 = StandardNormal.sample(&mut rng);
        let z_noise: f64 = StandardNormal.sample(&mut rng);

        let opens_burst = i == 0 || u_burst < site.burst_len_geometric_p;
        let comp_idx = cumulative.iter().position(|&c| u_comp < c).unwrap_or(cumulative.len() - 1);
        let comp = &site.size_mixture[comp_idx];
        let raw = (comp.mean + comp.std * z_size) * env.size_scale;
        let size = raw.round().clamp(64.0, f64::from(env.mtu_cap)) as u32;

        if i > 0 {
            let (dist, cpu) = if opens_burst {
                (&site.inter_burst_jitter, env.cpu_slowdown)
            } else {
                (&site.intra_burst_jitter, 1.0)
            };
            let gap = (dist.log_mean + dist.log_std * z_gap + env.jitter_noise_std * z_noise).exp()
                * env.latency_scale
                * cpu;
            t += gap.round();
        }
        out.push(PacketRecord::new(t, size));
    }
    Trace::new(out, site.site_label, env.env_id, epoch_tag).expect("cumulative non-negative gaps are ordered")
}

/// Every `(site, env, trace_index)` trace of the config, ordered by site, then
/// env, then index.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Vec<Trace>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize, usize)> = (0..cfg.sites.len())
        .flat_map(|s| (0..cfg.envs.len()).flat_map(move |e| (0..cfg.traces_per_site_env).map(move |i| (s, e, i))))
        .collect();
    Ok(jobs
        .par_iter()
        .map(|&(s, e, i)| {
            let site = &cfg.sites[s];
            let env = &cfg.envs[e];
            let seed = trace_seed(cfg.master_seed, site.site_label, env.env_id, i);
            generate_trace(site, env, seed, cfg.packets_per_trace, &day_tag(i))
        })
        .collect())
}

/// Draws a uniform value in `[lo, hi)`; used by profile construction.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub(crate) fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}
