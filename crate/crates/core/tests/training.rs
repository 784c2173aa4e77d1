use semisup::checkpoint::{decode_checkpoint, encode_checkpoint};
use semisup::config::RunConfig;
use semisup::data::{generate_synthetic_test_set, load_cifar10_binary, write_cifar10_binary, SyntheticSpec};
use semisup::trainer::{run_training, NoObserver, TrainData};
use semisup::Error;

fn config(overrides: &[&str]) -> RunConfig {
    let text = r#"
seed = 9
[data]
source = "synthetic"
labels_per_class = 2
test_per_class = 10
[data.synthetic]
class_count = 3
per_class = 24
noise = 0.3
[model]
conv_channels = [4, 6]
[train]
total_steps = 20
labeled_batch = 6
unlabeled_batch = 12
log_interval = 5
"#;
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml_str(text, &o).unwrap()
}

#[test]
fn zero_steps_leave_an_empty_log() {
    let cfg = config(&["train.total_steps=0"]);
    let data = TrainData::from_config(&cfg).unwrap();
    let out = run_training(&cfg, &data, None, &mut NoObserver).unwrap();
    assert!(out.rows.is_empty());
    assert_eq!(out.state.step, 0);
    assert_eq!(out.state.params, out.state.ema);
}

#[test]
fn rows_follow_the_log_interval() {
    let cfg = config(&["train.total_steps=17"]);
    let data = TrainData::from_config(&cfg).unwrap();
    let out = run_training(&cfg, &data, None, &mut NoObserver).unwrap();
    let steps: Vec<u64> = out.rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, [5, 10, 15, 17]);
    for r in &out.rows {
        assert!((0.0..=1.0).contains(&r.mask_rate));
        assert!(r.top1_err_ema.is_some_and(|e| (0.0..=1.0).contains(&e)));
    }
}

#[test]
fn different_seeds_diverge() {
    let a = config(&[]);
    let b = config(&["seed=10"]);
    let da = TrainData::from_config(&a).unwrap();
    let db = TrainData::from_config(&b).unwrap();
    let ra = run_training(&a, &da, None, &mut NoObserver).unwrap();
    let rb = run_training(&b, &db, None, &mut NoObserver).unwrap();
    assert_ne!(ra.state.params, rb.state.params);
}

#[test]
fn resume_rejects_a_foreign_checkpoint() {
    let a = config(&[]);
    let data = TrainData::from_config(&a).unwrap();
    let done = run_training(&a, &data, None, &mut NoObserver).unwrap();
    let other = config(&["model.conv_channels=[4]"]);
    let d2 = TrainData::from_config(&other).unwrap();
    let err = run_training(&other, &d2, Some(done.state.clone()), &mut NoObserver).unwrap_err();
    assert!(matches!(err, Error::Config(_) | Error::Checkpoint { .. }), "{err}");

    let reseeded = config(&["seed=3"]);
    assert!(run_training(&reseeded, &data, Some(done.state), &mut NoObserver).is_err());
}

#[test]
fn checkpoint_bytes_round_trip_after_training() {
    let cfg = config(&[]);
    let data = TrainData::from_config(&cfg).unwrap();
    let out = run_training(&cfg, &data, None, &mut NoObserver).unwrap();
    let bytes = encode_checkpoint(&out.state).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, out.state);
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
}

#[test]
fn binary_records_round_trip_through_disk() {
    let spec = SyntheticSpec {
        class_count: 10,
        per_class: 1,
        height: 32,
        width: 32,
        channels: 3,
        noise: 0.5,
        max_shift: 2,
        shared_blobs: 0,
        pixel_noise: None,
        mirror: false,
        seed: 4,
    };
    let set = generate_synthetic_test_set(&spec, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    write_cifar10_binary(&path, &set.labeled).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 20 * 3073);
    let back = load_cifar10_binary(&path).unwrap();
    assert_eq!(back.labels(), set.labels());
    for (a, b) in back.labeled.iter().zip(&set.labeled) {
        for (&x, &y) in a.image.data().iter().zip(b.image.data()) {
            assert!((x - y.clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
    write_cifar10_binary(dir.path().join("again.bin"), &back.labeled).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("again.bin")).unwrap());
}
