use super::*;
use crate::data::{fit_normalize, window, RawSeries};
use crate::model::ParamStore;

fn values(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        window_size: 8,
        latent_size: 4,
        memory_size: 6,
        pred_step: 2,
        epochs: 2,
        batches_per_epoch: 3,
        batch_size: 4,
        conv_channels: vec![4, 6],
        hidden_size: 5,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn ramp_series(n: usize, k: usize) -> RawSeries {
    let values = (0..n * k).map(|i| ((i / k) as f64 * 0.3 + (i % k) as f64).sin()).collect();
    RawSeries::new(values, k, None).unwrap()
}

fn dataset(n: usize, config: &TrainConfig) -> (WindowedDataset, NormalizationStats) {
    let s = ramp_series(n, 2);
    let stats = fit_normalize(&s);
    let s = crate::data::apply_normalize(&s, &stats).unwrap();
    (window(&s, config.window_size).unwrap(), stats)
}

fn checkpoint_bytes(bundle: &ModelBundle) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(bundle, &mut buf).unwrap();
    buf
}

#[test]
fn eligible_range_matches_enumeration() {
    let r = eligible_ends(100, 32, 7).unwrap();
    assert_eq!((*r.start(), *r.end()), (38, 92));
    assert_eq!(r.clone().count(), 55);
    let brute: Vec<usize> = (0..100).filter(|&t| t + 1 >= 32 + 7 && t + 7 <= 99).collect();
    assert_eq!(brute, r.collect::<Vec<_>>());
    assert!(eligible_ends(45, 32, 7).is_err());
    assert!(eligible_ends(100, 32, 0).is_err());
}

#[test]
fn batches_hold_the_right_targets() {
    let config = TrainConfig {
        batch_size: 16,
        ..tiny_config()
    };
    let (ds, _) = dataset(40, &config);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = sample_batch(&ds, &config, &mut rng).unwrap();
    let s = ds.series();
    let (w, t_steps, k) = (8, 2, 2);
    for (b, &t) in batch.ends.iter().enumerate() {
        assert!((9..=37).contains(&t));
        let win = &batch.windows.data()[b * w * k..(b + 1) * w * k];
        assert_eq!(win, s.rows(t - 7, t + 1));
        for i in 1..=t_steps {
            let off = (b * t_steps + i - 1) * k;
            assert_eq!(&batch.forward.data()[off..off + k], s.row(t + i));
            assert_eq!(&batch.backward.data()[off..off + k], s.row(t - w + 1 - i));
        }
    }
}

#[test]
fn batch_sequence_is_seeded() {
    let config = tiny_config();
    let (ds, _) = dataset(40, &config);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..5).map(|_| sample_batch(&ds, &config, &mut rng).unwrap().ends).collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}

#[test]
fn short_series_is_a_configuration_error() {
    let config = tiny_config();
    let (ds, stats) = dataset(11, &config);
    assert!(matches!(
        train(&ds, &config, &stats),
        Err(TrainError::NoEligibleWindow { .. })
    ));
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let config = TrainConfig { epochs: 0, ..tiny_config() };
    let (ds, stats) = dataset(40, &config);
    let (bundle, log) = train(&ds, &config, &stats).unwrap();
    assert!(log.epochs.is_empty());
    let fresh = ModelBundle::new(config, stats).unwrap();
    assert_eq!(values(bundle.model.params()), values(fresh.model.params()));
}

#[test]
fn equal_seeds_give_identical_checkpoints() {
    let config = tiny_config();
    let (ds, stats) = dataset(40, &config);
    let (a, log_a) = train(&ds, &config, &stats).unwrap();
    let (b, _) = train(&ds, &config, &stats).unwrap();
    assert_eq!(log_a.epochs.len(), 2);
    assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));
    let other = TrainConfig { seed: 12, ..config };
    let (c, _) = train(&ds, &other, &stats).unwrap();
    assert_ne!(values(a.model.params()), values(c.model.params()));
}

#[test]
fn each_step_only_touches_its_own_group() {
    let config = tiny_config();
    let (ds, stats) = dataset(40, &config);
    let mut trainer = Trainer::new(ModelBundle::new(config, stats).unwrap());
    let batch = trainer.next_batch(&ds).unwrap();
    let snapshot = |t: &Trainer| -> Vec<(String, Vec<f64>, ParamGroup)> {
        let s = t.bundle().model.params();
        s.ids().map(|id| (s.name(id).to_string(), s.get(id).data().to_vec(), s.group(id))).collect()
    };
    let changed = |before: &[(String, Vec<f64>, ParamGroup)], after: &[(String, Vec<f64>, ParamGroup)], group| {
        for (b, a) in before.iter().zip(after) {
            if b.2 == group {
                assert_ne!(b.1, a.1, "{} did not move", b.0);
            } else {
                assert_eq!(b.1, a.1, "{} moved", b.0);
            }
        }
    };
    let s0 = snapshot(&trainer);
    trainer.discriminator_step(&batch).unwrap();
    let s1 = snapshot(&trainer);
    changed(&s0, &s1, ParamGroup::Discriminator);
    trainer.generator_step(&batch).unwrap();
    let s2 = snapshot(&trainer);
    changed(&s1, &s2, ParamGroup::Generator);
}

#[test]
fn double_ablation_drops_prediction_terms() {
    let config = TrainConfig {
        no_memory: true,
        no_prediction: true,
        ..tiny_config()
    };
    let (ds, stats) = dataset(40, &config);
    let mut trainer = Trainer::new(ModelBundle::new(config.clone(), stats).unwrap());
    let batch = trainer.next_batch(&ds).unwrap();
    let r = trainer.generator_step(&batch).unwrap();
    assert_eq!((r.pred_fwd, r.pred_back), (0.0, 0.0));
    assert!((r.full - (r.adv_g + config.reconstruction_weight * r.rec)).abs() < 1e-12);
}

#[test]
fn non_finite_input_aborts_with_location() {
    let config = tiny_config();
    let mut values: Vec<f64> = ramp_series(40, 2).values().to_vec();
    values.iter_mut().for_each(|v| *v = f64::NAN);
    let s = RawSeries::new(values, 2, None).unwrap();
    let stats = NormalizationStats {
        min: vec![0.0; 2],
        max: vec![1.0; 2],
    };
    let ds = window(&s, 8).unwrap();
    match train(&ds, &config, &stats) {
        Err(TrainError::NonFinite { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, 0)),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let config = tiny_config();
    let (ds, stats) = dataset(40, &config);
    let (bundle, _) = train(&ds, &config, &stats).unwrap();
    let bytes = checkpoint_bytes(&bundle);
    let loaded = read_checkpoint(&mut bytes.as_slice(), None).unwrap();
    assert_eq!(loaded.config, bundle.config);
    assert_eq!(loaded.stats, bundle.stats);
    assert_eq!(values(loaded.model.params()), values(bundle.model.params()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&bundle, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(values(load_checkpoint(&path).unwrap().model.params()), values(bundle.model.params()));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let config = TrainConfig { epochs: 0, ..tiny_config() };
    let (ds, stats) = dataset(40, &config);
    let (bundle, _) = train(&ds, &config, &stats).unwrap();
    let bytes = checkpoint_bytes(&bundle);
    for cut in [0, 5, 10, 20, bytes.len() / 2, bytes.len() - 1] {
        let err = read_checkpoint(&mut &bytes[..cut], None).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated { .. }), "cut {cut}: {err}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(read_checkpoint(&mut extra.as_slice(), None), Err(CheckpointError::Trailing)));
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&mut bad.as_slice(), None), Err(CheckpointError::Magic)));
}

#[test]
fn incompatible_config_names_the_block() {
    let config = TrainConfig { epochs: 0, ..tiny_config() };
    let (ds, stats) = dataset(40, &config);
    let (bundle, _) = train(&ds, &config, &stats).unwrap();
    let bytes = checkpoint_bytes(&bundle);
    let wider = TrainConfig {
        latent_size: 5,
        ..config.clone()
    };
    let err = read_checkpoint(&mut bytes.as_slice(), Some(&wider)).unwrap_err();
    match &err {
        CheckpointError::BlockShape { name, .. } => assert_eq!(name, "encoder.proj.weight"),
        other => panic!("{other}"),
    }
    assert!(err.to_string().contains("encoder.proj.weight"));
    let no_memory = TrainConfig {
        no_memory: true,
        ..config
    };
    let err = read_checkpoint(&mut bytes.as_slice(), Some(&no_memory)).unwrap_err();
    assert!(err.to_string().contains("memory.psi.weight"), "{err}");
}
