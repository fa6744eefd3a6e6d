//! Small end-to-end training runs.

use ssat_core::attack::{pretrain_target, train_attack, train_attack_with, AttackSpec, AttackTrainConfig, PretrainConfig};
use ssat_core::nets::{Model, ModelConfig};
use ssat_core::scenes::{SampleSet, SceneConfig, PERSON, RIDER};

fn tiny() -> (SampleSet, SampleSet) {
    let cfg = SceneConfig {
        width: 32,
        height: 32,
        ..SceneConfig::default()
    };
    (SampleSet::generate(&cfg, 0..24).unwrap(), SampleSet::generate(&cfg, 24..32).unwrap())
}

fn target(train: &SampleSet, test: &SampleSet) -> (Model, f32) {
    let cfg = PretrainConfig {
        epochs: 3,
        ..PretrainConfig::default()
    };
    let r = pretrain_target(&ModelConfig::target(8, 1).with_base_width(16), train, test, &cfg).unwrap();
    assert!(r.epoch_losses.windows(2).all(|w| w[1] < w[0]), "{:?}", r.epoch_losses);
    (r.model, r.test_pixel_acc)
}

#[test]
fn pretraining_beats_chance_and_freezes() {
    let (train, test) = tiny();
    let (model, acc) = target(&train, &test);
    assert!(model.is_frozen());
    assert!(acc > 0.5, "accuracy {acc}");
}

#[test]
fn attack_training_is_deterministic_and_leaves_target_alone() {
    let (train, test) = tiny();
    let (tgt, _) = target(&train, &test);
    let before = tgt.checksum();
    let spec = AttackSpec::vanish([PERSON, RIDER]);
    let cfg = AttackTrainConfig {
        epochs: 2,
        lr: 1e-3,
        seed: 3,
        ..AttackTrainConfig::default()
    };
    let run = || train_attack(Model::build(ModelConfig::generator(8, 2).with_base_width(4)).unwrap(), &tgt, &train, &spec, &cfg).unwrap();
    let (g1, h1) = run();
    let (g2, h2) = run();
    assert_eq!(g1.params(), g2.params());
    assert_eq!(h1, h2);
    assert_eq!(h1.epochs.len(), 2);
    assert_eq!(tgt.checksum(), before);
    assert!(h1.epochs.iter().all(|e| e.reg_loss.is_some()));
}

#[test]
fn regularizer_off_leaves_its_head_untouched() {
    let (train, test) = tiny();
    let (tgt, _) = target(&train, &test);
    let gen = Model::build(ModelConfig::generator(8, 2).with_base_width(4)).unwrap();
    let head = gen.param("reg_head.weight").unwrap().clone();
    let cfg = AttackTrainConfig {
        epochs: 1,
        regularizer_enabled: false,
        ..AttackTrainConfig::default()
    };
    let mut calls = 0;
    let (out, hist) = train_attack_with(gen, &tgt, &train, &AttackSpec::vanish([PERSON]), &cfg, |_, _| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 1);
    assert_eq!(out.param("reg_head.weight").unwrap().data(), head.data());
    assert!(hist.epochs[0].reg_loss.is_none());
    assert_ne!(out.param("pert_head.weight").unwrap().data(), Model::build(ModelConfig::generator(8, 2).with_base_width(4)).unwrap().param("pert_head.weight").unwrap().data());
}

#[test]
fn unfrozen_target_is_rejected() {
    let (train, _) = tiny();
    let tgt = Model::build(ModelConfig::target(8, 1).with_base_width(4)).unwrap();
    let gen = Model::build(ModelConfig::generator(8, 2).with_base_width(4)).unwrap();
    assert!(train_attack(gen, &tgt, &train, &AttackSpec::vanish([PERSON]), &AttackTrainConfig::default()).is_err());
}
