use std::collections::BTreeMap;

use proptest::prelude::*;
use wflab::nn::checkpoint::{decode_checkpoint, encode_checkpoint, Blob, Checkpoint, OptimizerSection};
use wflab::traffic::{
    apply_channel_mask, compute_jitter, decode_dataset, encode_dataset, extract_windows, format_csv_trace,
    parse_csv_trace, part_sizes, split_indices, ChannelMask, PacketRecord, SampleVector, Trace, DEFAULT_RATIOS,
};
use wflab::{Error, FormatError};

fn trace_strategy(max_len: usize) -> impl Strategy<Value = Trace> {
    prop::collection::vec((0u32..100_000, 1u32..65_536), 0..max_len).prop_map(|rows| {
        let mut t = 0.0;
        let packets = rows
            .into_iter()
            .map(|(gap, size)| {
                t += f64::from(gap);
                PacketRecord::new(t, size)
            })
            .collect();
        Trace::new(packets, 3, 1, "day-0").unwrap()
    })
}

fn finite_f32() -> impl Strategy<Value = f32> {
    prop_oneof![any::<f32>().prop_filter("finite", |v| v.is_finite()), Just(-0.0f32), Just(f32::MIN_POSITIVE)]
}

fn samples_strategy() -> impl Strategy<Value = Vec<SampleVector>> {
    (1usize..20).prop_flat_map(|w| {
        prop::collection::vec(
            (prop::collection::vec(finite_f32(), 2 * w), any::<u16>(), any::<u16>())
                .prop_map(|(v, s, e)| SampleVector::new(v, s, e).unwrap()),
            0..6,
        )
    })
}

fn blob_strategy() -> impl Strategy<Value = Blob> {
    (prop::collection::vec(1usize..4, 0..3), "[a-z0-9_.]{1,24}").prop_flat_map(|(shape, name)| {
        let n: usize = shape.iter().product();
        prop::collection::vec(finite_f32(), n).prop_map(move |values| Blob {
            name: name.clone(),
            shape: shape.clone(),
            values,
        })
    })
}

fn checkpoint_strategy() -> impl Strategy<Value = Checkpoint> {
    (
        any::<u64>(),
        ".{0,40}",
        prop::collection::vec(blob_strategy(), 0..5),
        prop::option::of((any::<u64>(), prop::collection::vec(blob_strategy(), 0..3))),
    )
        .prop_map(|(fingerprint, manifest, blobs, opt)| Checkpoint {
            fingerprint,
            manifest,
            blobs,
            optimizer: opt.map(|(steps, buffers)| OptimizerSection { steps, buffers }),
        })
}

fn bits(s: &[SampleVector]) -> Vec<(u16, u16, Vec<u32>)> {
    s.iter().map(|x| (x.site_label, x.env_id, x.values().iter().map(|v| v.to_bits()).collect())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dataset_round_trip_is_bit_exact(samples in samples_strategy()) {
        let back = decode_dataset(&encode_dataset(&samples).unwrap()).unwrap();
        prop_assert_eq!(bits(&back), bits(&samples));
    }

    #[test]
    fn checkpoint_round_trip_is_exact(ck in checkpoint_strategy()) {
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap(), Some(ck.fingerprint)).unwrap();
        prop_assert_eq!(back, ck);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn damaged_files_error_without_panicking(samples in samples_strategy(), ck in checkpoint_strategy(), cut in any::<prop::sample::Index>(), flip in any::<prop::sample::Index>(), byte: u8) {
        for bytes in [encode_dataset(&samples).unwrap(), encode_checkpoint(&ck).unwrap()] {
            let is_dataset = bytes[..4] == *b"WFDS";
            let decode = |b: &[u8]| -> Result<(), Error> {
                if is_dataset { decode_dataset(b).map(drop) } else { decode_checkpoint(b, None).map(drop) }
            };
            let short = &bytes[..cut.index(bytes.len())];
            prop_assert!(matches!(decode(short), Err(Error::Format(_))));
            let mut garbled = bytes.clone();
            let i = flip.index(garbled.len());
            garbled[i] ^= byte | 1;
            let result = decode(&garbled);
            if i < 4 {
                let bad_magic = matches!(result, Err(Error::Format(FormatError::BadMagic { .. })));
                prop_assert!(bad_magic);
            }
        }
    }

    #[test]
    fn window_count_and_contents(t in trace_strategy(3000), window in 1usize..400, stride in 1usize..500) {
        let w = extract_windows(&t, window, stride).unwrap();
        let n = t.len();
        let expected = if n < window { 0 } else { (n - window) / stride + 1 };
        prop_assert_eq!(w.len(), expected);
        if w.is_empty() {
            return Ok(());
        }
        let jitter = compute_jitter(t.packets()).unwrap();
        for (k, s) in w.iter().enumerate() {
            let start = k * stride;
            prop_assert_eq!(s.values().len(), 2 * window);
            prop_assert_eq!(s.values()[0], jitter[start] as f32);
            prop_assert_eq!(s.values()[2 * window - 1], t.packets()[start + window - 1].size as f32);
        }
    }

    #[test]
    fn channel_masks_are_idempotent_projections(samples in samples_strategy()) {
        for s in &samples {
            for m in ChannelMask::ALL {
                let once = apply_channel_mask(s, m);
                prop_assert_eq!(bits(&[apply_channel_mask(&once, m)]), bits(&[once.clone()]));
                for (i, (a, b)) in once.values().iter().zip(s.values()).enumerate() {
                    let kept = if i % 2 == 0 { m.keeps_jitter() } else { m.keeps_size() };
                    prop_assert_eq!(a.to_bits(), if kept { b.to_bits() } else { 0f32.to_bits() });
                }
            }
            let both = apply_channel_mask(&apply_channel_mask(s, ChannelMask::JitterOnly), ChannelMask::SizeOnly);
            prop_assert!(both.values().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn split_is_stratified_and_partitions(labels in prop::collection::vec(0u16..6, 1..400), seed: u64) {
        let parts = split_indices(&labels, DEFAULT_RATIOS, seed).unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        let mut per_class: BTreeMap<u16, usize> = BTreeMap::new();
        for &l in &labels {
            *per_class.entry(l).or_default() += 1;
        }
        for (class, n) in per_class {
            let want = part_sizes(n, DEFAULT_RATIOS);
            for (p, &w) in parts.iter().zip(&want) {
                prop_assert_eq!(p.iter().filter(|&&i| labels[i] == class).count(), w);
            }
        }
        prop_assert_eq!(split_indices(&labels, DEFAULT_RATIOS, seed).unwrap(), parts);
    }

    #[test]
    fn csv_round_trip(t in trace_strategy(500)) {
        let text = format_csv_trace(&t);
        let back = parse_csv_trace(text.as_bytes(), t.site_label, t.env_id, &t.epoch_tag).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn jitter_rebuilds_the_trace(t in trace_strategy(500)) {
        prop_assume!(!t.is_empty());
        let jitter = compute_jitter(t.packets()).unwrap();
        let sizes: Vec<u32> = t.packets().iter().map(|p| p.size).collect();
        let back = Trace::from_jitter(t.packets()[0].timestamp_us, &jitter, &sizes, t.site_label, t.env_id, "day-0").unwrap();
        prop_assert_eq!(back, t);
    }
}
