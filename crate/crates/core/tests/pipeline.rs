use brnlab::inference::{InferenceConfig, Preset};
use brnlab::metrics::evaluate;
use brnlab::model::ModelPreset;
use brnlab::synth::{generate, generate_dataset, load_dataset, SynthConfig};
use brnlab::train::{detect_videos, load_checkpoint, parse_loss_log, train, TrainConfig};

fn small_data() -> SynthConfig {
    SynthConfig { num_videos: 12, sequence_length: 64, ..SynthConfig::default() }
}

fn quick(model: ModelPreset) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        milestones: vec![2],
        batch_size: 4,
        hidden_dim: 4,
        num_levels: 3,
        model,
        crop_window: Some(48),
        ..TrainConfig::desk()
    }
}

#[test]
fn same_seed_gives_identical_loss_logs() {
    let data = generate(&small_data()).unwrap();
    for preset in [ModelPreset::Brn, ModelPreset::Baseline] {
        let a = train(&data, &quick(preset), None).unwrap();
        let b = train(&data, &quick(preset), None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }
    let other = train(&data, &TrainConfig { seed: 1, ..quick(ModelPreset::Brn) }, None).unwrap();
    let base = train(&data, &quick(ModelPreset::Brn), None).unwrap();
    assert_ne!(other.log, base.log);
}

#[test]
fn disk_round_trip_and_checkpoint_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_data();
    generate_dataset(&cfg, &dir.path().join("data")).unwrap();
    let data = load_dataset(&dir.path().join("data")).unwrap();
    assert_eq!(data, generate(&cfg).unwrap());

    let run = dir.path().join("run");
    let tc = TrainConfig { checkpoint_every: 1, ..quick(ModelPreset::Brn) };
    let outcome = train(&data, &tc, Some(&run)).unwrap();
    let log = parse_loss_log(&std::fs::read_to_string(run.join("loss_log.csv")).unwrap()).unwrap();
    assert_eq!(log, outcome.log);
    assert!(run.join("checkpoint_epoch0001").join("manifest.json").exists());

    let ck = load_checkpoint(&run.join("checkpoint")).unwrap();
    assert_eq!(ck.params, outcome.params);
    assert_eq!(ck.epoch, tc.epochs);
    let icfg = InferenceConfig::anet();
    let a = detect_videos(&outcome.model, &outcome.params, &data, &data.split.val, &icfg).unwrap();
    let b = detect_videos(&ck.model, &ck.params, &data, &data.split.val, &icfg).unwrap();
    assert_eq!(a, b);
    let val = data.annotations.subset(&data.split.val).unwrap();
    let report = evaluate(&a, &val, Preset::Anet).unwrap();
    assert!((0.0..=100.0).contains(&report.average_map()));
}
