use serde::{Deserialize, Serialize};

use super::window::SampleVector;
use crate::error::{Error, Result};

pub const DEFAULT_NORM_EPSILON: f64 = 1e-6;

/// Per-channel standardization parameters fitted on a training collection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub jitter_mean: f64,
    pub jitter_std: f64,
    pub size_mean: f64,
    pub size_std: f64,
    pub epsilon: f64,
}

impl NormStats {
    /// Leaves values unchanged.
    pub fn identity() -> Self {
        Self {
            jitter_mean: 0.0,
            jitter_std: 1.0,
            size_mean: 0.0,
            size_std: 1.0,
            epsilon: DEFAULT_NORM_EPSILON,
        }
    }

    /// Population mean and standard deviation of each channel over every
    /// value of every sample.
    pub fn fit<'a, I>(samples: I, epsilon: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a SampleVector>,
        I::IntoIter: Clone,
    {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        let iter = samples.into_iter();
        let mut n = 0usize;
        let (mut sj, mut ss) = (0.0f64, 0.0f64);
        for s in iter.clone() {
            for pair in s.values().chunks_exact(2) {
                sj += f64::from(pair[0]);
                ss += f64::from(pair[1]);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::EmptyInput("cannot fit normalization on an empty set"));
        }
        let (mj, ms) = (sj / n as f64, ss / n as f64);
        let (mut vj, mut vs) = (0.0f64, 0.0f64);
        for s in iter {
            for pair in s.values().chunks_exact(2) {
                vj += (f64::from(pair[0]) - mj).powi(2);
                vs += (f64::from(pair[1]) - ms).powi(2);
            }
        }
        Ok(Self {
            jitter_mean: mj,
            jitter_std: (vj / n as f64).sqrt(),
            size_mean: ms,
            size_std: (vs / n as f64).sqrt(),
            epsilon,
        })
    }

    fn scales(&self) -> [(f64, f64); 2] {
        [
            (self.jitter_mean, self.jitter_std.max(self.epsilon)),
            (self.size_mean, self.size_std.max(self.epsilon)),
        ]
    }

    /// Normalizes an interleaved value slice in place.
    pub fn apply_in_place(&self, values: &mut [f32]) {
        let scales = self.scales();
        for pair in values.chunks_exact_mut(2) {
            for (v, (mean, std)) in pair.iter_mut().zip(scales) {
                *v = ((f64::from(*v) - mean) / std) as f32;
            }
        }
    }
}

/// `(x - mean_c) / max(std_c, epsilon)` on each channel.
pub fn apply_norm(sample: &SampleVector, stats: &NormStats) -> SampleVector {
    let mut out = sample.clone();
    stats.apply_in_place(out.values_mut());
    out
}
