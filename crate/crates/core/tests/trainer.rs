//! Optimizer-step isolation, loss bookkeeping, run logging and resume.

mod common;

use vtgan_core::config::{RunConfig, Scale};
use vtgan_core::data::{FundusAngioPair, Label};
use vtgan_core::features::IdentityExtractor;
use vtgan_core::losses::LossWeights;
use vtgan_core::models::Vtgan;
use vtgan_core::nn::Ctx;
use vtgan_core::train::{discriminator_step, generator_step, Adam, Batch, Trainer, RUN_LOG};
use vtgan_core::ParameterStore;

use common::*;

fn pairs(n: usize) -> Vec<FundusAngioPair> {
    (0..n)
        .map(|i| synthetic_pair(64, 0.7 * i as f64, if i % 2 == 0 { Label::Abnormal } else { Label::Normal }, &format!("t{i}")))
        .collect()
}

fn snapshot(store: &ParameterStore, prefixes: &[&str]) -> Vec<(String, Vec<u64>)> {
    prefixes
        .iter()
        .flat_map(|p| store.paths_under(p).map(|q| (q.to_string(), store.values(q).unwrap().iter().map(|v| v.to_bits()).collect())))
        .collect()
}

#[test]
fn steps_only_touch_their_own_networks() {
    let cfg = RunConfig::for_scale(Scale::Desk);
    let (model, mut store) = Vtgan::new(&cfg.gan, 1).unwrap();
    let batch = Batch::new(&pairs(2)).unwrap();
    let mut adam_d = Adam::new(&cfg.train);
    let mut adam_g = Adam::new(&cfg.train);
    let w = LossWeights::default();

    let g_before = snapshot(&store, &Vtgan::GENERATOR_PREFIXES);
    let d_before = snapshot(&store, &Vtgan::DISCRIMINATOR_PREFIXES);
    discriminator_step(&model, &mut store, &batch, &mut adam_d, &w, 1, 0).unwrap();
    assert_eq!(snapshot(&store, &Vtgan::GENERATOR_PREFIXES), g_before, "generator changed in a discriminator step");
    assert_ne!(snapshot(&store, &Vtgan::DISCRIMINATOR_PREFIXES), d_before);

    let d_before = snapshot(&store, &Vtgan::DISCRIMINATOR_PREFIXES);
    let g = generator_step(&model, &mut store, &batch, &mut adam_g, &w, &IdentityExtractor, 1, 1).unwrap();
    assert_eq!(snapshot(&store, &Vtgan::DISCRIMINATOR_PREFIXES), d_before, "discriminator changed in a generator step");
    assert_ne!(snapshot(&store, &Vtgan::GENERATOR_PREFIXES), g_before);
    // frozen only for the duration of the step
    assert!(Vtgan::DISCRIMINATOR_PREFIXES.iter().all(|p| !store.trainable_paths(p).is_empty()));

    assert!((g.total - g.weighted_sum(&w)).abs() < 1e-6);
    assert!((g.mse - (g.mse_fine + g.mse_coarse)).abs() < 1e-12);
    assert!((g.adv - (g.adv_fine + g.adv_coarse)).abs() < 1e-12);
}

#[test]
fn every_discriminator_parameter_gets_a_gradient() {
    let cfg = RunConfig::for_scale(Scale::Desk);
    let (model, store) = Vtgan::new(&cfg.gan, 2).unwrap();
    let batch = Batch::new(&pairs(2)).unwrap();
    let mut total = None;
    for (vt, x, y) in [
        (&model.discriminators.fine, &batch.fundus, &batch.angio),
        (&model.discriminators.coarse, &batch.fundus_lo, &batch.angio_lo),
    ] {
        let out = vt.forward(&store, &Ctx::train(3, 0), x, y).unwrap();
        let targets = vtgan_core::losses::one_hot(&batch.classes, 2).unwrap();
        let l = out.adv_map.mean().add(&vtgan_core::losses::cce(&targets, &out.class_probs).unwrap()).unwrap();
        total = Some(match total {
            None => l,
            Some(t) => l.add(&t).unwrap(),
        });
    }
    total.unwrap().backward().unwrap();
    for prefix in Vtgan::DISCRIMINATOR_PREFIXES {
        for p in store.trainable_paths(prefix) {
            let g = store.grad(&p).unwrap().unwrap_or_else(|| panic!("{p} has no gradient"));
            assert!(g.iter().any(|v| *v != 0.0), "{p} has an all-zero gradient");
        }
    }
    store.zero_grad();
}

#[test]
fn perfect_discriminator_has_zero_hinge() {
    let real = vtgan_core::Tensor::full(&[2, 8, 8], 1.0);
    let fake = vtgan_core::Tensor::full(&[2, 8, 8], -1.0);
    assert_eq!(vtgan_core::losses::hinge_d(&real, &fake).unwrap().item(), 0.0);
}

#[test]
fn one_epoch_with_logging_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::for_scale(Scale::Desk);
    cfg.train.epochs = 1;
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.set_run_dir(tmp.path()).unwrap();
    let data = pairs(4);
    trainer.train(&data).unwrap();
    assert_eq!((trainer.state.epoch, trainer.state.step), (1, 2));
    let log = std::fs::read_to_string(tmp.path().join(RUN_LOG)).unwrap();
    let events: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events[0]["event"], "start");
    let steps: Vec<&serde_json::Value> = events.iter().filter(|e| e["event"] == "step").collect();
    assert_eq!(steps.len(), 2);
    for s in steps {
        let total = s["g"]["total"].as_f64().unwrap();
        assert!(total.is_finite());
    }
    assert!(events.iter().any(|e| e["event"] == "epoch"));
    for dir in ["latest", "best", "epoch-0001"] {
        assert!(tmp.path().join("checkpoints").join(dir).join("weights.vtgw").exists(), "{dir}");
    }
}

#[test]
fn full_scale_run_log_echoes_epochs_and_batch_size() {
    let tmp = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(RunConfig::for_scale(Scale::Full)).unwrap();
    trainer.set_run_dir(tmp.path()).unwrap();
    // no data: the start event is written before the first batch fails
    let empty: Vec<FundusAngioPair> = Vec::new();
    assert!(trainer.train(&empty).is_err());
    let log = std::fs::read_to_string(tmp.path().join(RUN_LOG)).unwrap();
    let start: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(start["epochs"], 200);
    assert_eq!(start["batch_size"], 2);
}

#[test]
fn identical_runs_agree_and_resume_continues_bitwise() {
    let data = pairs(6);
    let mut a = desk_trainer(4);
    let mut b = desk_trainer(4);
    for _ in 0..2 {
        assert_eq!(loss_bits(&a.advance(&data).unwrap()), loss_bits(&b.advance(&data).unwrap()));
    }
    let tmp = tempfile::tempdir().unwrap();
    a.save_checkpoint(tmp.path()).unwrap();
    let mut c = Trainer::resume(tmp.path()).unwrap();
    // crosses the epoch boundary at step 3
    for _ in 0..3 {
        let la = loss_bits(&a.advance(&data).unwrap());
        assert_eq!(la, loss_bits(&c.advance(&data).unwrap()));
    }
    assert_eq!(a.state, c.state);
}

#[test]
fn losses_stay_finite_for_500_steps_on_random_data() {
    let mut r = rng(77);
    let data: Vec<FundusAngioPair> = (0..4)
        .map(|i| {
            let f = vtgan_core::data::Image::new(64, 64, 3, random_vec(&mut r, 64 * 64 * 3)).unwrap();
            let a = vtgan_core::data::Image::new(64, 64, 1, random_vec(&mut r, 64 * 64)).unwrap();
            FundusAngioPair::new(f, a, if i % 2 == 0 { Label::Abnormal } else { Label::Normal }, "r", (0, 0)).unwrap()
        })
        .collect();
    let mut trainer = desk_trainer(9);
    for step in 0..500 {
        let l = trainer.advance(&data).unwrap();
        assert!(all_finite(&l), "non-finite loss at step {step}");
    }
}
