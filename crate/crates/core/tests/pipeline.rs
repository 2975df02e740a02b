//! Dataset preparation from image directories.

mod common;

use std::sync::Arc;

use vtgan_core::data::{balance_classes, quadrant_crops, FundusAngioPair, Image, Label, Manifest, ManifestDataset, PairSet, PrepareConfig, Split};

use common::*;

#[test]
fn manifest_is_deterministic_and_patient_disjoint() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = [(Label::Abnormal, ""), (Label::Normal, ""), (Label::Normal, ""), (Label::Abnormal, ""), (Label::Normal, ""), (Label::Abnormal, "")];
    write_dataset(tmp.path(), &rows, 40, 48);
    let cfg = PrepareConfig {
        crops_per_image: 5,
        ..PrepareConfig::new(32, 3)
    };
    let a = Manifest::prepare(tmp.path(), &cfg).unwrap();
    let b = Manifest::prepare(tmp.path(), &cfg).unwrap();
    assert_eq!(a, b);
    let train: std::collections::HashSet<&str> = a.entries.iter().filter(|e| e.split == Split::Train).map(|e| e.patient_id.as_str()).collect();
    let test: std::collections::HashSet<&str> = a.entries.iter().filter(|e| e.split == Split::Test).map(|e| e.patient_id.as_str()).collect();
    assert!(!train.is_empty() && !test.is_empty());
    assert!(train.is_disjoint(&test));
    // round trip through the manifest file
    let path = tmp.path().join("manifest.json");
    a.save(&path).unwrap();
    assert_eq!(Manifest::load(&path).unwrap(), a);

    let ds = ManifestDataset::new(tmp.path(), Arc::new(a), Split::Train);
    for i in 0..ds.len() {
        let p = ds.pair(i).unwrap();
        assert_eq!(p.size(), (32, 32));
        assert!(p.fundus.data.iter().chain(&p.angio.data).all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn quadrants_of_a_crop_sized_source_are_copies() {
    let src = FundusAngioPair::new(textured(16, 16, 3, 0.2), textured(16, 16, 1, 0.4), Label::Normal, "q", (0, 0)).unwrap();
    let quads = quadrant_crops(&src, 16).unwrap();
    assert_eq!(quads.len(), 4);
    assert!(quads.iter().all(|q| q.fundus == src.fundus && q.angio == src.angio));

    let big = FundusAngioPair::new(textured(20, 24, 3, 0.1), textured(20, 24, 1, 0.3), Label::Normal, "q", (0, 0)).unwrap();
    let q = quadrant_crops(&big, 16).unwrap();
    let corners = [(0, 0), (0, 23), (19, 0), (19, 23)];
    let local = [(0, 0), (0, 15), (15, 0), (15, 15)];
    for i in 0..4 {
        assert_eq!(q[i].angio.get(local[i].0, local[i].1, 0), big.angio.get(corners[i].0, corners[i].1, 0));
    }
}

#[test]
fn balancing_tops_up_the_minority_class() {
    let mk = |label| FundusAngioPair::new(Image::filled(4, 4, 3, 0.0), Image::filled(4, 4, 1, 0.0), label, "b", (0, 0)).unwrap();
    let set: Vec<FundusAngioPair> = (0..5).map(|i| mk(if i < 2 { Label::Abnormal } else { Label::Normal })).collect();
    let out = balance_classes(set.clone(), 3, 1).unwrap();
    assert_eq!(out.len(), 6);
    assert_eq!(out.iter().filter(|p| p.label == Label::Abnormal).count(), 3);
    assert!(balance_classes(set, 2, 1).is_err(), "target below the largest class");
}

#[test]
fn missing_images_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("labels.csv"), "patient_id,label\nghost,normal\n").unwrap();
    let err = Manifest::prepare(tmp.path(), &PrepareConfig::new(32, 0)).unwrap_err();
    assert!(err.is_data_error(), "{err}");
    std::fs::write(tmp.path().join("labels.csv"), "patient_id,label\nghost,sideways\n").unwrap();
    assert!(Manifest::prepare(tmp.path(), &PrepareConfig::new(32, 0)).unwrap_err().is_data_error());
}
