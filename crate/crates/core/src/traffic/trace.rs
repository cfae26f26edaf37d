use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One captured packet: arrival time in microseconds since the trace start and
/// its size on the wire in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub timestamp_us: f64,
    pub size: u32,
}

impl PacketRecord {
    pub fn new(timestamp_us: f64, size: u32) -> Self {
        Self { timestamp_us, size }
    }
}

/// An ordered packet sequence together with the website it was collected from
/// and the environment (domain) it was collected in.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    packets: Vec<PacketRecord>,
    pub site_label: u16,
    pub env_id: u16,
    /// Collection batch, e.g. `"2022-12"` or `"day-0"`.
    pub epoch_tag: String,
}

impl Trace {
    /// Builds a trace, rejecting negative or non-finite timestamps and
    /// timestamps that decrease.
    pub fn new(
        packets: Vec<PacketRecord>,
        site_label: u16,
        env_id: u16,
        epoch_tag: impl Into<String>,
    ) -> Result<Self> {
        check_ordering(&packets)?;
        Ok(Self {
            packets,
            site_label,
            env_id,
            epoch_tag: epoch_tag.into(),
        })
    }

    pub fn packets(&self) -> &[PacketRecord] {
        &self.packets
    }

    pub fn into_packets(self) -> Vec<PacketRecord> {
        self.packets
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    /// Last timestamp minus first timestamp; zero for traces with fewer than two packets.
    pub fn duration_us(&self) -> f64 {
        match (self.packets.first(), self.packets.last()) {
            (Some(a), Some(b)) => b.timestamp_us - a.timestamp_us,
            _ => 0.0,
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.packets.iter().map(|p| u64::from(p.size)).sum()
    }

    pub fn jitter(&self) -> Result<Vec<f64>> {
        compute_jitter(&self.packets)
    }

    /// Same labels, different packets.
    pub fn with_packets(&self, packets: Vec<PacketRecord>) -> Result<Self> {
        Trace::new(packets, self.site_label, self.env_id, self.epoch_tag.clone())
    }

    /// Rebuilds a trace from inter-arrival times and sizes; the first packet
    /// is placed at `start_us` and its jitter entry is ignored.
    pub fn from_jitter(
        start_us: f64,
        jitter: &[f64],
        sizes: &[u32],
        site_label: u16,
        env_id: u16,
        epoch_tag: impl Into<String>,
    ) -> Result<Self> {
        if jitter.len() != sizes.len() {
            return Err(Error::Shape(format!(
                "{} jitter values for {} sizes",
                jitter.len(),
                sizes.len()
            )));
        }
        let mut t = start_us;
        let packets = jitter
            .iter()
            .zip(sizes)
            .enumerate()
            .map(|(i, (&dt, &size))| {
                if i > 0 {
                    t += dt;
                }
                PacketRecord::new(t, size)
            })
            .collect();
        Trace::new(packets, site_label, env_id, epoch_tag)
    }
}

fn check_ordering(packets: &[PacketRecord]) -> Result<()> {
    for (i, p) in packets.iter().enumerate() {
        if !p.timestamp_us.is_finite() || p.timestamp_us < 0.0 {
            return Err(Error::Data(format!(
                "packet {i} has invalid timestamp {}",
                p.timestamp_us
            )));
        }
        if i > 0 && p.timestamp_us < packets[i - 1].timestamp_us {
            return Err(Error::Ordering {
                index: i,
                previous: packets[i - 1].timestamp_us,
                current: p.timestamp_us,
            });
        }
    }
    Ok(())
}

/// Inter-arrival times in microseconds. The first entry is 0 by convention.
pub fn compute_jitter(packets: &[PacketRecord]) -> Result<Vec<f64>> {
    if packets.is_empty() {
        return Err(Error::EmptyInput("trace has no packets"));
    }
    check_ordering(packets)?;
    let mut out = Vec::with_capacity(packets.len());
    out.push(0.0);
    out.extend(
        packets
            .windows(2)
            .map(|w| w[1].timestamp_us - w[0].timestamp_us),
    );
    Ok(out)
}
