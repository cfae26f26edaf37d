use std::sync::OnceLock;

use proptest::prelude::*;
use wflab::adapt::{da_train, DAConfig, UnlabeledSamples};
use wflab::eval::{compute_metrics, split_traces, stratified_subset, window_split};
use wflab::model::{
    build_model, encode_model, finetune, predict, train, ArchitectureConfig, FreezeMask, Preset, TrainConfig,
    WfModel,
};
use wflab::synth::{default_corpus, generate_corpus, SynthConfig};
use wflab::traffic::{DatasetSplit, WINDOW_LEN};

/// 3 sites x 2 envs, 12 windows per trace.
fn corpus() -> &'static DatasetSplit {
    static C: OnceLock<DatasetSplit> = OnceLock::new();
    C.get_or_init(|| {
        let cfg = SynthConfig {
            packets_per_trace: 6_000,
            traces_per_site_env: 4,
            ..default_corpus(3, 2, 11).unwrap()
        };
        window_split(&split_traces(&generate_corpus(&cfg).unwrap()).unwrap(), WINDOW_LEN, WINDOW_LEN).unwrap()
    })
}

fn short(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

fn trained(seed: u64) -> WfModel {
    let c = corpus();
    let mut m = build_model(&ArchitectureConfig::preset(Preset::Tiny, 3).unwrap(), seed).unwrap();
    train(&mut m, &c.train, &c.validation, &short(seed)).unwrap();
    m
}

fn param_bits(m: &WfModel, name: &str) -> Vec<u32> {
    m.net.param(name).unwrap().tensor.values().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn training_is_deterministic() {
    let a = encode_model(&trained(5), None).unwrap();
    let b = encode_model(&trained(5), None).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, encode_model(&trained(6), None).unwrap());
}

#[test]
fn predictions_do_not_depend_on_thread_count() {
    let m = trained(5);
    let c = corpus();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| predict(&m, &c.test).unwrap());
    let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| predict(&m, &c.test).unwrap());
    assert_eq!(one, many);
}

#[test]
fn zero_lambda_adaptation_matches_supervised_training() {
    let c = corpus();
    let source: Vec<_> = c.train.iter().filter(|s| s.env_id == 0).cloned().collect();
    let target: Vec<_> = c.train.iter().filter(|s| s.env_id == 1).cloned().collect();
    let arch = ArchitectureConfig::preset(Preset::Tiny, 3).unwrap();
    let mut plain = build_model(&arch, 2).unwrap();
    train(&mut plain, &source, &c.validation, &short(2)).unwrap();
    let mut adv = build_model(&arch, 2).unwrap();
    let cfg = DAConfig::new(0.0, short(2));
    da_train(&mut adv, &source, &UnlabeledSamples::from_samples(&target), &c.validation, &cfg).unwrap();
    for p in plain.net.params() {
        assert_eq!(param_bits(&plain, &p.name), param_bits(&adv, &p.name), "{}", p.name);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn frozen_parameters_stay_bit_identical(pick in prop::collection::vec(any::<bool>(), 64), seed in 0u64..1000) {
        let mut m = trained(1);
        let names: Vec<String> = m.net.params().map(|p| p.name.clone()).collect();
        let chosen: Vec<&String> = names.iter().zip(pick.iter().cycle()).filter(|(_, &k)| k).map(|(n, _)| n).collect();
        let mask = FreezeMask::from_names(&m, chosen.iter().map(|s| s.as_str())).unwrap();
        let before: Vec<Vec<u32>> = names.iter().map(|n| param_bits(&m, n)).collect();
        let c = corpus();
        let few = stratified_subset(&c.train, 8, seed).unwrap();
        finetune(&mut m, &few, &c.validation, &mask, &short(seed)).unwrap();
        for (n, b) in names.iter().zip(&before) {
            if mask.contains(n) {
                prop_assert_eq!(&param_bits(&m, n), b, "{} moved", n);
            }
        }
        prop_assert!(m.net.params().all(|p| !p.frozen));
    }

    #[test]
    fn conv_freeze_keeps_every_kernel(seed in 0u64..1000) {
        let mut m = trained(1);
        let mask = FreezeMask::conv_layers(&m);
        prop_assert!(!mask.is_empty());
        let before: Vec<(String, Vec<u32>)> = mask.names().map(|n| (n.to_string(), param_bits(&m, n))).collect();
        let head = m.net.params().filter(|p| p.name.starts_with("head.")).last().unwrap().name.clone();
        let head_before = param_bits(&m, &head);
        let c = corpus();
        finetune(&mut m, &c.train, &c.validation, &mask, &short(seed)).unwrap();
        for (n, b) in &before {
            prop_assert_eq!(&param_bits(&m, n), b);
        }
        prop_assert_ne!(param_bits(&m, &head), head_before);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn metric_identities(pairs in prop::collection::vec((0usize..5, 0usize..5), 0..300)) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let r = compute_metrics(&pred, &truth, 5).unwrap();
        prop_assert_eq!(r.total as usize, pairs.len());
        prop_assert_eq!(r.confusion.iter().flatten().sum::<u64>(), r.total);
        let correct = pairs.iter().filter(|(p, t)| p == t).count();
        let acc = if pairs.is_empty() { 0.0 } else { correct as f64 / pairs.len() as f64 };
        prop_assert_eq!(r.accuracy, acc);
        for c in 0..5 {
            let tp = pairs.iter().filter(|&&(p, t)| p == c && t == c).count() as f64;
            let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
            let actual = truth.iter().filter(|&&t| t == c).count() as f64;
            prop_assert_eq!(r.precision[c], if predicted == 0.0 { 0.0 } else { tp / predicted });
            prop_assert_eq!(r.recall[c], if actual == 0.0 { 0.0 } else { tp / actual });
            prop_assert!((0.0..=1.0).contains(&r.f1[c]));
            prop_assert!(r.f1[c] <= r.precision[c].max(r.recall[c]) + 1e-12);
        }
        prop_assert_eq!(r.support().iter().sum::<u64>(), r.total);
    }
}
