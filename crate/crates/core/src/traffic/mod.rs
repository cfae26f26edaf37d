//! Packets, traces, windowed samples and the on-disk dataset format.

mod csv;
mod dataset;
mod norm;
mod split;
mod trace;
mod window;

pub use self::csv::{format_csv_trace, ingest_csv, parse_csv_trace};
pub use dataset::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use norm::{apply_norm, NormStats, DEFAULT_NORM_EPSILON};
pub use split::{part_sizes, split_dataset, split_indices, DatasetSplit, DEFAULT_RATIOS};
pub use trace::{compute_jitter, PacketRecord, Trace};
pub use window::{
    apply_channel_mask, default_windows, extract_windows, window_starts, ChannelMask, SampleVector, SAMPLE_LEN,
    WINDOW_LEN,
};

/// Fits normalization statistics on a sample collection.
pub fn fit_norm_stats(train: &[SampleVector], epsilon: f64) -> crate::Result<NormStats> {
    NormStats::fit(train, epsilon)
}
