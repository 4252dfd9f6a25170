//! End-to-end training runs on a small synthetic corpus, exercised
//! through the public API only.

use jpis_core::config::TrainConfig;
use jpis_core::metrics::evaluate;
use jpis_core::model::JpisModel;
use jpis_core::synth::{synth_generate, synth_train_config, SynthCorpus};
use jpis_core::train::train;

fn small_setup() -> (TrainConfig, SynthCorpus) {
    let mut cfg = synth_train_config();
    cfg.model.word_dim = 24;
    cfg.model.lstm_hidden = 12;
    cfg.model.sa_dim = 12;
    cfg.model.sa_key_dim = 12;
    cfg.model.d_p = 12;
    cfg.model.d_a = 12;
    cfg.model.d_c = 16;
    cfg.model.d_y = 8;
    cfg.learning_rate = 3e-3;
    cfg.batch_size = 16;
    cfg.epochs = 6;
    let corpus = synth_generate(3, 240, 0.3).unwrap();
    (cfg, corpus)
}

#[test]
fn training_learns_the_synthetic_task() {
    let (cfg, corpus) = small_setup();
    let out = train(&cfg, &corpus.train, &corpus.valid, 1).unwrap();

    let first_loss = out.log.epochs.first().unwrap().mean_loss.unwrap();
    let last_loss = out.log.epochs.last().unwrap().mean_loss.unwrap();
    assert!(
        last_loss < 0.5 * first_loss,
        "loss barely moved: {first_loss} -> {last_loss}"
    );

    let test = evaluate(&out.model, &corpus.test).unwrap();
    assert!(
        test.intent_accuracy > 0.6,
        "intent accuracy {} after training",
        test.intent_accuracy
    );
    assert!(test.slot_f1 > 0.5, "slot f1 {} after training", test.slot_f1);
    assert!(test.overall_accuracy <= test.intent_accuracy);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let (cfg, corpus) = small_setup();
    let a = train(&cfg, &corpus.train, &corpus.valid, 9).unwrap();
    let b = train(&cfg, &corpus.train, &corpus.valid, 9).unwrap();
    assert_eq!(
        serde_json::to_string(&a.log).unwrap(),
        serde_json::to_string(&b.log).unwrap()
    );
    let ta = evaluate(&a.model, &corpus.test).unwrap();
    let tb = evaluate(&b.model, &corpus.test).unwrap();
    assert_eq!(ta.overall_accuracy.to_bits(), tb.overall_accuracy.to_bits());
    assert_eq!(ta.slot_f1.to_bits(), tb.slot_f1.to_bits());
}

#[test]
fn trained_checkpoint_survives_disk_round_trip() {
    let (mut cfg, corpus) = small_setup();
    cfg.epochs = 2;
    let out = train(&cfg, &corpus.train, &corpus.valid, 4).unwrap();
    let before = evaluate(&out.model, &corpus.test).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    out.model.save(&path).unwrap();
    let loaded = JpisModel::load(&path).unwrap();
    let after = evaluate(&loaded, &corpus.test).unwrap();

    assert_eq!(before.intent_accuracy.to_bits(), after.intent_accuracy.to_bits());
    assert_eq!(before.slot_f1.to_bits(), after.slot_f1.to_bits());
    assert_eq!(before.overall_accuracy.to_bits(), after.overall_accuracy.to_bits());
}
