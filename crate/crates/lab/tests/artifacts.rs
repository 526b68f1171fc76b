use ifso::net::{build_model, checkpoint, train, TrainConfig};
use ifso::pruner::{prune, PruneConfig};
use ifso_lab::datasets::{checksum, gen_dataset, generate, DatasetSpec};

#[test]
fn bars_checksum_golden() {
    let d = generate(&DatasetSpec::bars(64, 0.1, 7)).unwrap();
    assert_eq!(checksum(&d), 0x8f65_1632_50a0_a84a);
}

#[test]
fn point_blobs_are_linearly_separable() {
    let spec = DatasetSpec::blobs(40, 0.0, 11);
    let (train_set, _) = gen_dataset(&spec).unwrap();
    let mut linear = build_model("mlp:2-2", 0).unwrap();
    let cfg = TrainConfig { epochs: 50, batch_size: 8, lr: 0.1, ..TrainConfig::default() };
    train(&mut linear, &train_set, &cfg).unwrap();
    assert_eq!(ifso::net::evaluate(&linear, &train_set).unwrap().1, 1.0);
}

#[test]
fn checkpoint_round_trips_and_rejects_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, _) = gen_dataset(&DatasetSpec::blobs(50, 1.0, 2)).unwrap();
    let mut model = build_model("mlp-tiny", 2).unwrap();
    train(&mut model, &train_set, &TrainConfig { epochs: 2, ..TrainConfig::default() }).unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &model).unwrap();
    let back = checkpoint::load(&path).unwrap();
    let batch = train_set.full_batch();
    assert_eq!(back.forward_loss(&batch).unwrap().to_bits(), model.forward_loss(&batch).unwrap().to_bits());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    let err = checkpoint::load(&path).unwrap_err().to_string();
    assert!(err.contains("length mismatch"), "{err}");
}

#[test]
fn compacted_model_round_trips_with_reduced_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, _) = gen_dataset(&DatasetSpec::bars(48, 0.1, 3)).unwrap();
    let model = build_model("vgg-tiny", 3).unwrap();
    let cfg = PruneConfig { target_flops_reduction: 0.3, k_accumulate: 1, score_batch_size: 8, channels_per_action: 4, ..PruneConfig::default() };
    let out = prune(&model, &train_set, &cfg).unwrap();
    assert!(out.compacted.num_weights() < model.num_weights());
    let path = dir.path().join("c.ckpt");
    checkpoint::save(&path, &out.compacted).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.layers, out.compacted.layers);
    assert_eq!(back.weights_flat(), out.compacted.weights_flat());
}
