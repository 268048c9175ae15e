use dlfa_core::bankio::{decode_params, encode_params};
use dlfa_core::harness::{build_model, evaluate, generate_task, train, RowConfig, SweepSettings, SyntheticTaskSpec, TrainConfig};
use dlfa_core::{
    load_params, read_bank, save_params, write_bank, AifVariant, BnMode, Error, LayerBank, Model, Parameterized, Split,
    TaskFlavor,
};

fn small(spec: SyntheticTaskSpec) -> LayerBank {
    generate_task(&SyntheticTaskSpec {
        invariance: vec![0.9, 0.6, 0.2],
        train_per_language: 64,
        test_per_language: 16,
        channels: 12,
        latent_dim: 6,
        tokens_per_sentence: 4,
        ..spec
    })
    .unwrap()
    .source
}

fn fused(bank: &LayerBank, lower: usize) -> Model {
    build_model(
        RowConfig::Fused {
            lower,
            variant: AifVariant::Full,
        },
        bank,
        &SweepSettings::default(),
    )
    .unwrap()
}

#[test]
fn zero_epochs_returns_the_model_unchanged() {
    let bank = small(Default::default());
    let model = fused(&bank, 1);
    let out = train(&model, &bank, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
    assert_eq!(out.model, model);
    assert!(out.loss_curve.is_empty());
    assert_eq!(out.initial_loss, out.final_loss);
}

#[test]
fn zero_learning_rate_leaves_the_loss_unchanged() {
    let bank = small(Default::default());
    let model = fused(&bank, 2);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        weight_decay: 0.0,
        epochs: 3,
        ..Default::default()
    };
    let out = train(&model, &bank, &cfg).unwrap();
    assert!((out.final_loss - out.initial_loss).abs() < 1e-12);
    let before: Vec<Vec<f64>> = model.parameters().into_iter().map(|(_, v)| v.to_vec()).collect();
    let after: Vec<Vec<f64>> = out.model.parameters().into_iter().map(|(_, v)| v.to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn training_reduces_the_loss() {
    let bank = small(Default::default());
    let out = train(&fused(&bank, 1), &bank, &TrainConfig { epochs: 10, ..Default::default() }).unwrap();
    assert!(out.final_loss < out.initial_loss, "{} -> {}", out.initial_loss, out.final_loss);
    assert_eq!(out.loss_curve.len(), 10 * 2);
}

#[test]
fn separable_task_is_learned() {
    let bank = small(SyntheticTaskSpec {
        num_classes: 2,
        noise_std: 0.0,
        token_spread: 0.0,
        prototype_scale: 3.0,
        ..Default::default()
    });
    let model = build_model(RowConfig::Baseline, &bank, &SweepSettings::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let out = train(&model, &bank, &cfg).unwrap();
    let m = evaluate(&out.model, &bank, Split::Train).unwrap();
    assert!(m.accuracy >= 0.99, "train accuracy {}", m.accuracy);
}

#[test]
fn token_flavor_trains_and_scores() {
    let bank = small(SyntheticTaskSpec {
        flavor: TaskFlavor::Token,
        ..Default::default()
    });
    let out = train(&fused(&bank, 2), &bank, &TrainConfig { epochs: 2, ..Default::default() }).unwrap();
    let m = evaluate(&out.model, &bank, Split::Test).unwrap();
    assert_eq!(m.count, 16 * 4);
    assert!((0.0..=1.0).contains(&m.micro_f1));
}

#[test]
fn params_roundtrip_preserves_the_forward_pass() {
    let bank = small(Default::default());
    let trained = train(&fused(&bank, 1), &bank, &TrainConfig { epochs: 2, ..Default::default() })
        .unwrap()
        .model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_params(&trained, &path).unwrap();
    let loaded: Model = load_params(&path).unwrap();
    assert_eq!(loaded, trained);

    let idx = bank.indices(Split::Test);
    let inputs = trained.system.gather(&bank, &idx).unwrap();
    let (a, b) = (trained.logits(&inputs).unwrap(), loaded.logits(&inputs).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let first = std::fs::read(&path).unwrap();
    save_params(&loaded, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn missing_batch_norm_block_is_named() {
    let bank = small(Default::default());
    let mut doc: serde_json::Value = serde_json::from_slice(&encode_params(&fused(&bank, 1)).unwrap()).unwrap();
    doc["model"]["system"]["params"]["branches"][0]
        .as_object_mut()
        .unwrap()
        .remove("bn1")
        .unwrap();
    match decode_params::<Model>(&serde_json::to_vec(&doc).unwrap()) {
        Err(Error::Format(msg)) => assert!(msg.contains("bn1"), "{msg}"),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn evaluation_does_not_touch_running_statistics() {
    let bank = small(Default::default());
    let mut model = fused(&bank, 1);
    model.set_mode(BnMode::Evaluation);
    let before = model.clone();
    evaluate(&model, &bank, Split::Test).unwrap();
    model.loss(&bank, &bank.indices(Split::Train), BnMode::Training).unwrap();
    assert_eq!(model, before);
}

#[test]
fn bank_file_roundtrip() {
    let bank = small(Default::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("en.bank");
    write_bank(&bank, &path).unwrap();
    assert_eq!(read_bank(&path).unwrap(), bank);
}
