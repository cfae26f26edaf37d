use serde::{Deserialize, Serialize};

use super::trace::{compute_jitter, Trace};
use crate::error::{Error, Result};

/// Packets per model input.
pub const WINDOW_LEN: usize = 500;
/// Values per model input: one (jitter, size) pair per packet.
pub const SAMPLE_LEN: usize = 2 * WINDOW_LEN;

/// A fixed-length feature vector of interleaved `(jitter_us, size_bytes)`
/// pairs, one per packet of a contiguous window.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleVector {
    values: Vec<f32>,
    pub site_label: u16,
    pub env_id: u16,
}

impl SampleVector {
    /// `values` must hold an even, non-zero number of entries.
    pub fn new(values: Vec<f32>, site_label: u16, env_id: u16) -> Result<Self> {
        if values.is_empty() || values.len() % 2 != 0 {
            return Err(Error::Shape(format!(
                "sample must hold a positive even number of values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            site_label,
            env_id,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    /// Packets in the window (half the value count).
    pub fn window_len(&self) -> usize {
        self.values.len() / 2
    }

    pub fn jitter(&self) -> impl Iterator<Item = f32> + '_ {
        self.values.iter().step_by(2).copied()
    }

    pub fn sizes(&self) -> impl Iterator<Item = f32> + '_ {
        self.values.iter().skip(1).step_by(2).copied()
    }
}

/// Which feature channels the model is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelMask {
    #[default]
    Both,
    JitterOnly,
    SizeOnly,
}

impl ChannelMask {
    pub const ALL: [ChannelMask; 3] = [ChannelMask::Both, ChannelMask::JitterOnly, ChannelMask::SizeOnly];

    pub fn keeps_jitter(self) -> bool {
        self != ChannelMask::SizeOnly
    }

    pub fn keeps_size(self) -> bool {
        self != ChannelMask::JitterOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelMask::Both => "both",
            ChannelMask::JitterOnly => "jitter-only",
            ChannelMask::SizeOnly => "size-only",
        }
    }
}

impl std::str::FromStr for ChannelMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ChannelMask::Both),
            "jitter-only" | "jitter" => Ok(ChannelMask::JitterOnly),
            "size-only" | "size" => Ok(ChannelMask::SizeOnly),
            other => Err(Error::Config(format!("unknown channel mask {other:?}"))),
        }
    }
}

/// Zeroes the channel(s) the mask removes.
pub fn apply_channel_mask(sample: &SampleVector, mask: ChannelMask) -> SampleVector {
    let mut out = sample.clone();
    mask_in_place(out.values_mut(), mask);
    out
}

pub(crate) fn mask_in_place(values: &mut [f32], mask: ChannelMask) {
    let zero_from = match mask {
        ChannelMask::Both => return,
        ChannelMask::JitterOnly => 1,
        ChannelMask::SizeOnly => 0,
    };
    for v in values.iter_mut().skip(zero_from).step_by(2) {
        *v = 0.0;
    }
}

/// Start offsets of every window: `0, stride, 2*stride, ...` while the window fits.
pub fn window_starts(packet_count: usize, window: usize, stride: usize) -> impl Iterator<Item = usize> {
    let count = if window == 0 || stride == 0 || packet_count < window {
        0
    } else {
        (packet_count - window) / stride + 1
    };
    (0..count).map(move |i| i * stride)
}

/// Cuts a trace into fixed-length windows. Jitter is computed over the whole
/// trace, so a window starting mid-stream keeps the true gap to the packet
/// before it; only the very first packet of the trace has jitter 0.
pub fn extract_windows(trace: &Trace, window: usize, stride: usize) -> Result<Vec<SampleVector>> {
    if window == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window ({window}) and stride ({stride}) must be positive"
        )));
    }
    if trace.len() < window {
        return Ok(Vec::new());
    }
    let jitter = compute_jitter(trace.packets())?;
    let packets = trace.packets();
    window_starts(trace.len(), window, stride)
        .map(|start| {
            let mut values = Vec::with_capacity(2 * window);
            for i in start..start + window {
                values.push(jitter[i] as f32);
                values.push(packets[i].size as f32);
            }
            SampleVector::new(values, trace.site_label, trace.env_id)
        })
        .collect()
}

/// Non-overlapping windows of [`WINDOW_LEN`] packets.
pub fn default_windows(trace: &Trace) -> Result<Vec<SampleVector>> {
    extract_windows(trace, WINDOW_LEN, WINDOW_LEN)
}
