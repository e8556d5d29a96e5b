mod common;

use std::fs;

use proptest::prelude::*;
use stmformer::bundle::{ADJACENCY, DEPLOYMENT, MANIFEST, STATES};
use stmformer::data::window_pairs;
use stmformer::{generate_dataset, preprocess, DatasetBundle, GenConfig, HarnessError, KvConfig, NormalizerState, SplitSpec};
use stmformer_core::sim::FeatureSchema;
use stmformer_core::SeededRng;

use common::tiny_gen;

#[test]
fn malformed_config_line_reports_its_number() {
    let err = KvConfig::parse("samples=4\n\n# note\nfoo\n", "gen.txt").unwrap_err();
    match &err {
        HarnessError::Parse { line, .. } => assert_eq!(*line, 4),
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().starts_with("gen.txt:4:"));
    assert!(KvConfig::parse("a=1\na=2\n", "x").is_err());
    assert!(KvConfig::parse("=1\n", "x").is_err());
}

#[test]
fn unknown_and_invalid_keys_are_rejected() {
    let kv = KvConfig::parse("samples=10\nsampels=3\n", "x").unwrap();
    assert!(GenConfig::from_kv(kv).is_err());
    let kv = KvConfig::parse("samples=ten\n", "x").unwrap();
    assert!(GenConfig::from_kv(kv).is_err());
    let kv = KvConfig::parse("ratio.normal=0.5\nratio.cpu-stress=0.4\n", "x").unwrap();
    assert!(GenConfig::from_kv(kv).is_err());
}

#[test]
fn manifest_lines_reproduce_the_config() {
    let cfg = GenConfig {
        ratios: [0.2, 0.3, 0.0, 0.1, 0.1, 0.2, 0.1],
        ..tiny_gen(3)
    };
    let text = cfg.to_kv_lines().join("\n");
    assert_eq!(GenConfig::from_kv(KvConfig::parse(&text, "x").unwrap()).unwrap(), cfg);
}

#[test]
fn regeneration_is_byte_identical() {
    let cfg = GenConfig {
        samples: 10,
        t: 16,
        n: 8,
        m: 3,
        c: 16,
        seed: 7,
        ..GenConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    generate_dataset(&cfg).unwrap().write(&a).unwrap();
    generate_dataset(&cfg).unwrap().write(&b).unwrap();
    for file in [MANIFEST, STATES, ADJACENCY, DEPLOYMENT] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let steps = 2 * cfg.t;
    assert_eq!(fs::metadata(a.join(STATES)).unwrap().len() as usize, 4 * cfg.samples * steps * cfg.n * cfg.c);
    assert_eq!(fs::metadata(a.join(ADJACENCY)).unwrap().len() as usize, 4 * cfg.samples * steps * cfg.n * cfg.n);
    assert_eq!(fs::metadata(a.join(DEPLOYMENT)).unwrap().len() as usize, 4 * cfg.m);
}

#[test]
fn bundle_round_trips_through_disk() {
    let bundle = generate_dataset(&tiny_gen(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bundle.write(dir.path()).unwrap();
    let back = DatasetBundle::load(dir.path(), true).unwrap();
    assert_eq!(back.config, bundle.config);
    assert_eq!(back.deployment, bundle.deployment);
    assert_eq!(back.faults, bundle.faults);
    assert_eq!(back.states, bundle.states);
    assert_eq!(back.adjacency, bundle.adjacency);
    assert_eq!(bundle.deployment.counts().iter().sum::<usize>(), bundle.config.n);
}

#[test]
fn adjacency_free_load_never_opens_the_file() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&tiny_gen(5)).unwrap().write(dir.path()).unwrap();
    fs::remove_file(dir.path().join(ADJACENCY)).unwrap();
    let b = DatasetBundle::load(dir.path(), false).unwrap();
    assert!(b.adjacency.is_none());
    assert!(preprocess(&b).unwrap().train.iter().all(|w| w.adjacency.is_none()));
    assert!(DatasetBundle::load(dir.path(), true).is_err());
}

#[test]
fn truncated_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&tiny_gen(6)).unwrap().write(dir.path()).unwrap();
    let states = dir.path().join(STATES);
    let mut bytes = fs::read(&states).unwrap();
    bytes.truncate(bytes.len() - 4);
    fs::write(&states, bytes).unwrap();
    assert!(DatasetBundle::load(dir.path(), true).is_err());
}

#[test]
fn fault_rows_follow_the_mix() {
    let normal = GenConfig {
        ratios: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ..tiny_gen(8)
    };
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&normal).unwrap().write(dir.path()).unwrap();
    let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    assert!(!manifest.lines().any(|l| l.starts_with("fault.")));

    let mixed = GenConfig { samples: 13, ..tiny_gen(8) };
    let b = generate_dataset(&mixed).unwrap();
    let mut per_kind = [0usize; 6];
    for f in &b.faults {
        per_kind[stmformer_core::sim::FaultKind::ALL.iter().position(|k| *k == f.spec.kind).unwrap()] += 1;
    }
    assert_eq!(per_kind, [2, 2, 1, 1, 1, 1]);
    assert_eq!(b.faults.len(), 8);
}

#[test]
fn invalid_generator_configs_fail() {
    for cfg in [
        GenConfig { samples: 0, ..tiny_gen(1) },
        GenConfig { t: 2, ..tiny_gen(1) },
        GenConfig { n: 1, ..tiny_gen(1) },
        GenConfig { ratios: [0.5; 7], ..tiny_gen(1) },
    ] {
        assert!(generate_dataset(&cfg).is_err(), "{cfg:?}");
    }
}

#[test]
fn min_max_examples() {
    let schema = FeatureSchema::with_features(1);
    let norm = NormalizerState::fit(&[2.0, 10.0, 6.0], &schema).unwrap();
    assert_eq!(norm.normalize(&[2.0, 10.0, 6.0], &schema).unwrap(), vec![0.0, 1.0, 0.5]);

    let constant = NormalizerState::fit(&[3.0, 3.0], &schema).unwrap();
    assert_eq!(constant.normalize(&[3.0, 7.0], &schema).unwrap(), vec![0.0, 0.0]);

    // connection_latency is network-flagged.
    let schema = FeatureSchema::with_features(5);
    assert!(schema.is_network(4));
    let rows = [0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 2.0, 2.0, 2.0, 9.0];
    let norm = NormalizerState::fit(&rows, &schema).unwrap();
    assert_eq!(norm.min[4], 0.0);
    assert!((norm.max[4] - 10f64.ln()).abs() < 1e-15);
    let bad = [0.0, 1.0, 1.0, 1.0, -0.5];
    assert!(matches!(NormalizerState::fit(&bad, &schema), Err(HarnessError::NegativeNetworkValue { .. })));
}

#[test]
fn statistics_come_from_train_only() {
    let mut bundle = generate_dataset(&tiny_gen(9)).unwrap();
    let clean = preprocess(&bundle).unwrap();
    let per = bundle.sample_len() * bundle.config.n * bundle.config.c;
    let split = bundle.split();
    for i in split.val.start * per..split.test.end * per {
        bundle.states[i] = if i % 2 == 0 { 1e6 } else { 0.0 };
    }
    let poisoned = preprocess(&bundle).unwrap();
    assert_eq!(clean.normalizer, poisoned.normalizer);
    assert_eq!(clean.train.len(), poisoned.train.len());
    for (a, b) in clean.train.iter().zip(&poisoned.train) {
        assert_eq!(a.history, b.history);
    }
}

#[test]
fn window_pairs_cut_at_the_window_length() {
    let (t, n, c) = (4, 2, 3);
    let states: Vec<f64> = (0..2 * t * n * c).map(|i| i as f64).collect();
    let pairs = window_pairs(0, &states, None, t, n, c).unwrap();
    assert_eq!(pairs.len(), 1);
    assert_eq!(pairs[0].history.data(), &states[..t * n * c]);
    assert_eq!(pairs[0].target.data(), &states[t * n * c..]);
    assert!(matches!(
        window_pairs(0, &states[..(2 * t - 1) * n * c], None, t, n, c),
        Err(HarnessError::ShortSample { .. })
    ));
}

#[test]
fn split_examples() {
    let s = SplitSpec::new(10);
    assert_eq!((s.train, s.val, s.test), (0..8, 8..9, 9..10));
    let s = SplitSpec::new(200);
    assert_eq!((s.train, s.val, s.test), (0..160, 160..180, 180..200));
    // 13 * [0.8, 0.1, 0.1] = [10.4, 1.3, 1.3]
    let s = SplitSpec::new(13);
    assert_eq!((s.train, s.val, s.test), (0..11, 11..12, 12..13));
}

proptest! {
    #[test]
    fn splits_partition_in_order(samples in 10usize..5000) {
        let s = SplitSpec::new(samples);
        prop_assert_eq!(s.train.start, 0);
        prop_assert_eq!(s.train.end, s.val.start);
        prop_assert_eq!(s.val.end, s.test.start);
        prop_assert_eq!(s.test.end, samples);
        for (r, w) in [(&s.train, 0.8), (&s.val, 0.1), (&s.test, 0.1)] {
            prop_assert!((r.len() as f64 - w * samples as f64).abs() < 1.0);
        }
    }

    #[test]
    fn normalization_inverts(seed in any::<u64>(), c in 1usize..17) {
        let schema = FeatureSchema::with_features(c);
        let mut rng = SeededRng::new(seed);
        let values: Vec<f64> = (0..50 * c).map(|_| rng.uniform(0.0, 500.0)).collect();
        let norm = NormalizerState::fit(&values, &schema).unwrap();
        prop_assert!(norm.max.iter().zip(&norm.min).all(|(hi, lo)| hi >= lo));
        let back = norm.denormalize(&norm.normalize(&values, &schema).unwrap());
        for (a, b) in values.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }
}
