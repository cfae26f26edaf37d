use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::traffic::{extract_windows, DatasetSplit, SampleVector, Trace};

/// Traces assigned to train, validation and test.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceSplit {
    pub train: Vec<Trace>,
    pub validation: Vec<Trace>,
    pub test: Vec<Trace>,
}

/// Splits traces so that no window straddles two parts.
///
/// Traces are grouped by `(site, env)` in input order. A group of at least
/// three traces gives its last trace to test, the one before to validation
/// and the rest to train. Smaller groups cut every trace into contiguous
/// packet blocks of 50/25/25%.
pub fn split_traces(traces: &[Trace]) -> Result<TraceSplit> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("no traces to split"));
    }
    let mut groups: BTreeMap<(u16, u16), Vec<&Trace>> = BTreeMap::new();
    for t in traces {
        groups.entry((t.site_label, t.env_id)).or_default().push(t);
    }
    let mut out = TraceSplit::default();
    for group in groups.values() {
        let n = group.len();
        if n >= 3 {
            out.train.extend(group[..n - 2].iter().map(|&t| t.clone()));
            out.validation.push(group[n - 2].clone());
            out.test.push(group[n - 1].clone());
            continue;
        }
        for t in group {
            let len = t.len();
            let (a, b) = (len / 2, len * 3 / 4);
            let p = t.packets();
            out.train.push(t.with_packets(p[..a].to_vec())?);
            out.validation.push(t.with_packets(p[a..b].to_vec())?);
            out.test.push(t.with_packets(p[b..].to_vec())?);
        }
    }
    Ok(out)
}

fn windows_of(traces: &[Trace], window: usize, stride: usize) -> Result<Vec<SampleVector>> {
    let mut out = Vec::new();
    for t in traces {
        out.extend(extract_windows(t, window, stride)?);
    }
    Ok(out)
}

/// Windows every part of a trace split.
pub fn window_split(split: &TraceSplit, window: usize, stride: usize) -> Result<DatasetSplit> {
    Ok(DatasetSplit {
        train: windows_of(&split.train, window, stride)?,
        validation: windows_of(&split.validation, window, stride)?,
        test: windows_of(&split.test, window, stride)?,
    })
}

/// Keeps the samples `keep` accepts in every part.
pub fn filter_split(split: &DatasetSplit, keep: impl Fn(&SampleVector) -> bool) -> DatasetSplit {
    let f = |v: &[SampleVector]| v.iter().filter(|s| keep(s)).cloned().collect();
    DatasetSplit {
        train: f(&split.train),
        validation: f(&split.validation),
        test: f(&split.test),
    }
}

pub fn env_ids(split: &DatasetSplit) -> Vec<u16> {
    all(split).map(|s| s.env_id).collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn site_labels(split: &DatasetSplit) -> Vec<u16> {
    all(split).map(|s| s.site_label).collect::<BTreeSet<_>>().into_iter().collect()
}

/// One more than the largest site label.
pub fn class_count(split: &DatasetSplit) -> usize {
    all(split).map(|s| usize::from(s.site_label) + 1).max().unwrap_or(0)
}

fn all(split: &DatasetSplit) -> impl Iterator<Item = &SampleVector> {
    split.train.iter().chain(&split.validation).chain(&split.test)
}

/// `per_class` samples of every label, drawn by a seeded shuffle within each
/// class; the result keeps input order.
pub fn stratified_subset(samples: &[SampleVector], per_class: usize, seed: u64) -> Result<Vec<SampleVector>> {
    let mut by_class: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.site_label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (label, mut idx) in by_class {
        if idx.len() < per_class {
            return Err(Error::Config(format!(
                "asked for {per_class} samples of site {label} but only {} are available",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..per_class]);
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| samples[i].clone()).collect())
}
