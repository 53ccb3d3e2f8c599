use hashvfl::data::{align, synth_blobs, train_test_split, vertical_split, KeyedLabels, KeyedSource, Split};
use hashvfl::optim::AdamConfig;
use hashvfl::protocol::{train, SystemConfig, TrainConfig, VflSystem};
use hashvfl::Matrix;

fn blobs_run(seed: u64, cfg: SystemConfig, epochs: usize) -> (VflSystem, hashvfl::protocol::TrainLog) {
    let ds = train_test_split(&synth_blobs(2, 400, 8, 3.0, seed).unwrap(), 0.7, seed).unwrap();
    let partition = vertical_split(8, &[0.5, 0.5]).unwrap();
    let mut sys = VflSystem::new(&cfg, &partition, 2, AdamConfig::default(), seed).unwrap();
    let log = train(
        &mut sys,
        &ds,
        &TrainConfig {
            epochs,
            seed,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    (sys, log)
}

#[test]
fn one_bit_codes_learn_separable_blobs() {
    let cfg = SystemConfig {
        code_length: 1,
        ..SystemConfig::default()
    };
    let (_, log) = blobs_run(0, cfg, 30);
    assert!(log.final_accuracy(Split::Test).unwrap() >= 0.9);
    assert!(log.final_accuracy(Split::Train).unwrap() >= 0.9);
}

#[test]
fn training_is_deterministic_per_seed() {
    let cfg = SystemConfig::default();
    let (a, la) = blobs_run(3, cfg.clone(), 3);
    let (b, lb) = blobs_run(3, cfg.clone(), 3);
    assert_eq!(la, lb);
    assert_eq!(a, b);
    let (_, lc) = blobs_run(4, cfg, 3);
    assert_ne!(la.batch_losses, lc.batch_losses);
}

#[test]
fn log_has_one_record_per_split_and_epoch() {
    let (_, log) = blobs_run(1, SystemConfig::default(), 4);
    assert_eq!(log.records.len(), 8);
    let csv = log.to_csv();
    assert!(csv.starts_with("epoch,split,accuracy,ce,cos_term,lr\n"));
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn learning_rate_follows_the_step_schedule() {
    let (_, log) = blobs_run(1, SystemConfig::default(), 12);
    let lr: Vec<f64> = log.records.iter().filter(|r| r.split == Split::Test).map(|r| r.lr).collect();
    assert!(lr[..10].iter().all(|&v| v == 1e-3));
    assert!((lr[10] - 9e-4).abs() < 1e-15);
}

#[test]
fn frozen_affine_keeps_gamma_and_beta() {
    let cfg = SystemConfig {
        freeze_bn_affine: true,
        ..SystemConfig::default()
    };
    let (sys, _) = blobs_run(2, cfg, 2);
    for p in &sys.parties {
        let bn = p.bn.as_ref().unwrap();
        assert!(bn.gamma.iter().all(|&g| g == 1.0));
        assert!(bn.beta.iter().all(|&b| b == 0.0));
    }
}

#[test]
fn aligned_sources_train_end_to_end() {
    // Two parties hold disjoint columns of the same blobs under shuffled ids.
    let ds = synth_blobs(3, 100, 6, 4.0, 9).unwrap();
    let ids: Vec<String> = (0..ds.len()).map(|i| format!("u{i}")).collect();
    let left = ds.features.select_columns(&[0, 1, 2]).unwrap();
    let right_rows: Vec<usize> = (0..ds.len()).rev().collect();
    let right = ds.features.select_rows(&right_rows).select_columns(&[3, 4, 5]).unwrap();
    let right_ids: Vec<String> = right_rows.iter().map(|&r| ids[r].clone()).collect();
    let aligned = align(
        &[
            KeyedSource {
                ids: ids.clone(),
                features: left,
            },
            KeyedSource {
                ids: right_ids,
                features: right,
            },
        ],
        &KeyedLabels {
            ids: ids.clone(),
            labels: ds.labels.clone(),
            classes: 3,
        },
    )
    .unwrap();
    assert_eq!(aligned.features, ds.features);
    let aligned = train_test_split(&aligned, 0.7, 1).unwrap();
    let mut sys = VflSystem::new(
        &SystemConfig::default(),
        &aligned.feature_partition,
        3,
        AdamConfig::default(),
        1,
    )
    .unwrap();
    let log = train(&mut sys, &aligned, &TrainConfig { epochs: 20, ..TrainConfig::default() }).unwrap();
    assert!(log.final_accuracy(Split::Test).unwrap() > 0.8);
    let one = Matrix::new(1, 6, aligned.features.row(0).to_vec()).unwrap();
    assert_eq!(sys.predict(&one).unwrap().len(), 1);
}
