//! Generator and discriminator contracts at desk scale.

mod common;

use vtgan_core::config::GanConfig;
use vtgan_core::losses;
use vtgan_core::models::{downscale_batch, generators, Vtgan};
use vtgan_core::nn::Ctx;
use vtgan_core::tensor::no_grad;
use vtgan_core::{ParameterStore, Tensor};

use common::*;

fn desk() -> (Vtgan, ParameterStore) {
    Vtgan::new(&GanConfig::desk(), 5).unwrap()
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

#[test]
fn generator_shapes_and_range() {
    let (model, mut store) = desk();
    let cfg = &model.config;
    let mut r = rng(1);
    let fundus = random_tensor(&mut r, &[2, 64, 64, 3]);
    let lo = downscale_batch(&fundus).unwrap();
    let (coarse, feat) = model.generators.coarse.forward(&mut store, &Ctx::eval(), &lo).unwrap();
    assert_eq!(coarse.shape(), &[2, 32, 32, 1]);
    assert_eq!(feat.shape(), &[2, 32, 32, cfg.base_channels]);
    let syn = model.generators.synthesize(&mut store, &Ctx::eval(), &fundus).unwrap();
    assert_eq!(syn.fine.shape(), &[2, 64, 64, 1]);
    for t in [&syn.fine, &syn.coarse] {
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(variance(&t.data()[..t.numel() / 2]) > 1e-8, "collapsed output");
    }
    let again = model.generators.synthesize(&mut store, &Ctx::eval(), &fundus).unwrap();
    assert_eq!(syn.fine.data(), again.fine.data());
}

#[test]
fn coarse_features_feed_the_fine_generator() {
    let (model, mut store) = desk();
    let fundus = random_tensor(&mut rng(2), &[1, 64, 64, 3]);
    let zero = Tensor::zeros(&[1, 32, 32, model.config.base_channels]);
    let a = model.generators.fine.forward(&mut store, &Ctx::eval(), &fundus, &zero).unwrap();
    let feat = random_tensor(&mut rng(3), &[1, 32, 32, model.config.base_channels]);
    let b = model.generators.fine.forward(&mut store, &Ctx::eval(), &fundus, &feat).unwrap();
    assert!(a.is_finite());
    assert_ne!(a.data(), b.data());
}

#[test]
fn coarse_generator_is_larger() {
    let (_, store) = desk();
    assert!(store.num_params(generators::COARSE_PREFIX) > store.num_params(generators::FINE_PREFIX));
}

#[test]
fn every_generator_parameter_gets_a_gradient() {
    let (model, mut store) = desk();
    let mut r = rng(4);
    let fundus = random_tensor(&mut r, &[2, 64, 64, 3]);
    let target = random_tensor(&mut r, &[2, 64, 64, 1]);
    let target_lo = random_tensor(&mut r, &[2, 32, 32, 1]);
    let syn = model.generators.synthesize(&mut store, &Ctx::train(1, 0), &fundus).unwrap();
    let loss = losses::mse(&syn.fine, &target).unwrap().add(&losses::mse(&syn.coarse, &target_lo).unwrap()).unwrap();
    loss.backward().unwrap();
    for prefix in Vtgan::GENERATOR_PREFIXES {
        for p in store.trainable_paths(prefix) {
            let g = store.grad(&p).unwrap().unwrap_or_else(|| panic!("{p} has no gradient"));
            assert!(g.iter().all(|v| v.is_finite()), "{p}");
            assert!(g.iter().any(|v| *v != 0.0), "{p} has an all-zero gradient");
        }
    }
}

#[test]
fn discriminators_share_one_topology() {
    let (model, store) = desk();
    let skeleton = |prefix: &str| -> Vec<(String, Vec<usize>)> {
        store
            .skeleton()
            .into_iter()
            .filter_map(|(p, s, _)| p.strip_prefix(&format!("{prefix}.")).map(|rest| (rest.to_string(), s)))
            .collect()
    };
    let fine = skeleton(model.discriminators.fine.prefix());
    let coarse = skeleton(model.discriminators.coarse.prefix());
    assert!(!fine.is_empty());
    let names = |v: &[(String, Vec<usize>)]| v.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    assert_eq!(names(&fine), names(&coarse));
    let cfg = GanConfig::desk();
    for ((name, a), (_, b)) in fine.iter().zip(&coarse) {
        if name == "embed.projection" {
            // patch pixels times the four fundus+angio channels
            assert_eq!(a[0], cfg.vt.patch_fine.pow(2) * 4);
            assert_eq!(b[0], cfg.vt.patch_coarse.pow(2) * 4);
            assert_eq!(a[1], b[1]);
        } else {
            assert_eq!(a, b, "{name}");
        }
    }
    assert_eq!(model.discriminators.fine.tokens(), model.discriminators.coarse.tokens());
}

#[test]
fn discriminator_outputs() {
    let (model, store) = desk();
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[2, 64, 64, 3]);
    let y = random_tensor(&mut r, &[2, 64, 64, 1]);
    let vt = &model.discriminators.fine;
    let (out, feats) = vt.forward_with_features(&store, &Ctx::eval(), &x, &y).unwrap();
    assert_eq!(out.adv_map.shape(), &[2, vt.tokens(), vt.dim()]);
    assert!(out.adv_map.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    for row in out.class_probs.data().chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
    }
    assert_eq!(feats.len(), GanConfig::desk().vt.blocks + 1);
    let (_, again) = vt.forward_with_features(&store, &Ctx::eval(), &x, &y).unwrap();
    for (a, b) in feats.iter().zip(&again) {
        assert_eq!(a.data(), b.data());
    }
    let other = random_tensor(&mut r, &[2, 64, 64, 1]);
    let (_, moved) = vt.forward_with_features(&store, &Ctx::eval(), &x, &other).unwrap();
    assert_ne!(feats[0].data(), moved[0].data());
}

/// Swaps the two 8x8 patches at token positions 0 and 1.
fn swap_first_patches(t: &Tensor, patch: usize) -> Tensor {
    let (n, h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let mut d = t.to_vec();
    for b in 0..n {
        for y in 0..patch {
            for x in 0..patch {
                for ch in 0..c {
                    let i = ((b * h + y) * w + x) * c + ch;
                    let j = ((b * h + y) * w + x + patch) * c + ch;
                    d.swap(i, j);
                }
            }
        }
    }
    Tensor::new(d, &[n, h, w, c]).unwrap()
}

#[test]
fn classification_is_patch_order_invariant_only_without_positions() {
    let (model, mut store) = desk();
    let vt = &model.discriminators.fine;
    let patch = GanConfig::desk().vt.patch_fine;
    let mut r = rng(6);
    let x = random_tensor(&mut r, &[1, 64, 64, 3]);
    let y = random_tensor(&mut r, &[1, 64, 64, 1]);
    let (sx, sy) = (swap_first_patches(&x, patch), swap_first_patches(&y, patch));
    let _guard = no_grad();
    let probs = |store: &ParameterStore, a: &Tensor, b: &Tensor| vt.forward(store, &Ctx::eval(), a, b).unwrap().class_probs.to_vec();
    let with_pos = max_abs_diff(&probs(&store, &x, &y), &probs(&store, &sx, &sy));
    assert!(with_pos > 1e-12, "positions had no effect");
    let path = format!("{}.embed.positions", vt.prefix());
    let n = store.values(&path).unwrap().len();
    store.set_value(&path, vec![0.0; n]).unwrap();
    let without = max_abs_diff(&probs(&store, &x, &y), &probs(&store, &sx, &sy));
    assert!(without < 1e-12, "{without:e}");
}

#[test]
fn full_scale_discriminator_has_nine_feature_taps() {
    let cfg = GanConfig::full();
    assert_eq!(cfg.vt.blocks + 1, 9);
    assert_eq!(cfg.fine_size / cfg.vt.patch_fine, 8);
    assert_eq!(cfg.coarse_size / cfg.vt.patch_coarse, 8);
}
