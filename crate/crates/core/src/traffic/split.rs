use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::window::SampleVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub train: Vec<SampleVector>,
    pub validation: Vec<SampleVector>,
    pub test: Vec<SampleVector>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.5, 0.25, 0.25);

/// Per-class part sizes by the largest-remainder rule: every part is the
/// floor of its exact share, and leftover samples go to the parts with the
/// largest fractional remainders (ties favour train, then validation).
pub fn part_sizes(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let exact = [ratios.0 * n as f64, ratios.1 * n as f64, ratios.2 * n as f64];
    let mut sizes = exact.map(|e| e.floor() as usize);
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &part in order.iter().take(n.saturating_sub(assigned)) {
        sizes[part] += 1;
    }
    sizes
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    Ok(())
}

/// Index-level stratified split; returns `[train, validation, test]` index
/// lists, each sorted ascending.
pub fn split_indices(labels: &[u16], ratios: (f64, f64, f64), seed: u64) -> Result<[Vec<usize>; 3]> {
    check_ratios(ratios)?;
    if labels.is_empty() {
        return Err(Error::EmptyInput("cannot split an empty dataset"));
    }
    let mut by_class: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let [n_train, n_val, _] = part_sizes(idx.len(), ratios);
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Stratified by site label and deterministic in `seed`. Within each part
/// samples keep their input order.
pub fn split_dataset(samples: &[SampleVector], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let labels: Vec<u16> = samples.iter().map(|s| s.site_label).collect();
    let [tr, va, te] = split_indices(&labels, ratios, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&tr),
        validation: pick(&va),
        test: pick(&te),
    })
}
