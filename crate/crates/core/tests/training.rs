use brnlab::model::{Model, ModelPreset};
use brnlab::synth::{generate, SynthConfig};
use brnlab::train::{train, TrainConfig};

#[test]
fn classification_only_training_reduces_cls_loss() {
    let data = generate(&SynthConfig::default()).unwrap();
    let cfg = TrainConfig { lambda: 0.0, epochs: 20, milestones: vec![], ..TrainConfig::desk() };
    let outcome = train(&data, &cfg, None).unwrap();
    let cls: Vec<f64> = outcome.log.iter().map(|e| e.l_cls).collect();
    assert_eq!(cls.len(), 20);
    let head = cls[..5].iter().sum::<f64>() / 5.0;
    let tail = cls[15..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.5 * head, "cls loss {cls:?}");
    assert!(cls[19] < cls[0]);

    // Regression loss is still reported but never reaches the optimizer.
    assert!(outcome.log.iter().all(|e| e.l_reg > 0.0 && e.total == e.l_cls));
    let init = Model::new::<f32>(cfg.model_config(16, 3), cfg.seed).unwrap().1;
    let mut reg_entries = 0;
    for (a, b) in init.entries().iter().zip(outcome.params.entries()) {
        if a.name.starts_with("head.reg") {
            reg_entries += 1;
            assert_eq!(a, b, "{} moved", a.name);
        } else if a.name.starts_with("head.cls") {
            assert_ne!(a, b, "{} did not move", a.name);
        }
    }
    assert!(reg_entries > 0);
}

#[test]
fn baseline_is_smaller_than_brn() {
    let cfg = TrainConfig::desk();
    let count = |model| {
        let c = TrainConfig { model, ..cfg.clone() }.model_config(16, 3);
        Model::num_params(&Model::new::<f32>(c, 0).unwrap().1)
    };
    assert!(count(ModelPreset::Baseline) < count(ModelPreset::Brn));
}
