use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use vtgan_core::config::{RunConfig, Scale};
use vtgan_core::data::Image;
use vtgan_core::train::{model_weight_file, Trainer};

fn vtgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtgan"))
        .args(args)
        .env("VTGAN_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vtgan")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("not JSON: {l}: {e}")))
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn textured(h: usize, w: usize, c: usize, phase: f64) -> Image {
    Image::from_fn(h, w, c, |y, x, ch| {
        (0.3 * ((x as f64) * 0.21 + phase).sin() * ((y as f64) * 0.17 + ch as f64).cos()).clamp(-1.0, 1.0)
    })
}

fn desk_weights(dir: &Path) -> PathBuf {
    let trainer = Trainer::new(RunConfig::for_scale(Scale::Desk)).unwrap();
    let path = dir.join("w.vtgw");
    model_weight_file(&trainer.store, &trainer.config.gan).unwrap().save(&path).unwrap();
    path
}

/// Patients `p0..pn` with alternating labels and explicit splits.
fn dataset(dir: &Path, n: usize, size: usize, test: usize) {
    let mut csv = String::from("patient_id,label,split\n");
    for i in 0..n {
        textured(size, size, 3, i as f64).save(&dir.join(format!("p{i}_fundus.png"))).unwrap();
        textured(size, size, 1, 0.5 * i as f64).save(&dir.join(format!("p{i}_fa.png"))).unwrap();
        let label = if i % 2 == 0 { "abnormal" } else { "normal" };
        let split = if i < test { "test" } else { "train" };
        csv.push_str(&format!("p{i},{label},{split}\n"));
    }
    std::fs::write(dir.join("labels.csv"), csv).unwrap();
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&vtgan(&["frobnicate"])), 1);
    assert_eq!(code(&vtgan(&["gradcheck", "--no-such-flag"])), 1);
    assert_eq!(code(&vtgan(&[])), 1);
    assert_eq!(code(&vtgan(&["--scale", "huge", "gradcheck"])), 1);
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("a.png");
    textured(8, 8, 1, 0.0).save(&img).unwrap();
    let out = tmp.path().join("o");
    let o = vtgan(&["distort", "--in", s(&img), "--out-dir", s(&out), "--distortion", "smear"]);
    assert_eq!(code(&o), 1);
    let o = vtgan(&["distort", "--in", s(&img), "--out-dir", s(&out), "--distortion", "blur", "--strength", "-1"]);
    assert_eq!(code(&o), 1);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"no_such_key": 1}"#).unwrap();
    assert_eq!(code(&vtgan(&["--config", s(&bad), "gradcheck", "--filter", "relu"])), 1);
}

#[test]
fn help_documents_every_flag() {
    let o = vtgan(&["--help"]);
    assert_eq!(code(&o), 0);
    let top = String::from_utf8_lossy(&o.stdout).to_string();
    for flag in ["--config", "--seed", "--scale"] {
        assert!(top.contains(flag), "{flag} missing from --help");
    }
    let per_command: &[(&str, &[&str])] = &[
        ("prepare", &["--in", "--out-dir", "--crop", "--crops-per-image"]),
        ("train", &["--in", "--manifest", "--out-dir", "--epochs", "--steps", "--resume"]),
        ("synthesize", &["--weights", "--in", "--out-dir"]),
        ("classify", &["--weights", "--in", "--labels", "--out-dir"]),
        ("distort", &["--in", "--out-dir", "--distortion", "--strength"]),
        ("evaluate", &["--in", "--reference", "--labels", "--weights", "--manifest", "--out-dir"]),
        ("gradcheck", &["--filter"]),
    ];
    for (cmd, flags) in per_command {
        let o = vtgan(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout).to_string();
        let lines: Vec<&str> = text.lines().collect();
        for flag in *flags {
            let at = lines
                .iter()
                .position(|l| l.trim_start().starts_with(&format!("{flag} ")) || l.trim() == *flag)
                .unwrap_or_else(|| panic!("{cmd}: {flag} missing"));
            // the description follows the value name, or sits on the next line
            let rest = lines[at].trim_start()[flag.len()..].trim_start();
            let rest = rest.strip_prefix('<').map_or(rest, |r| r.split_once('>').map_or("", |x| x.1)).trim();
            let next = lines.get(at + 1).copied().unwrap_or("").trim();
            let described = !rest.is_empty() || (!next.is_empty() && !next.starts_with('-'));
            assert!(described, "{cmd}: {flag} undocumented");
        }
    }
}

#[test]
fn missing_inputs_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let nowhere = tmp.path().join("nowhere");
    let out = tmp.path().join("o");
    let o = vtgan(&["distort", "--in", s(&nowhere), "--out-dir", s(&out), "--distortion", "blur"]);
    assert_eq!(code(&o), 2);
    let o = vtgan(&["synthesize", "--weights", s(&nowhere), "--in", s(&nowhere), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = vtgan(&["prepare", "--in", s(tmp.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn distort_zero_strength_is_identity_and_noise_honors_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    std::fs::create_dir(&src).unwrap();
    for i in 0..2 {
        textured(24, 20, 3, i as f64).save(&src.join(format!("im{i}.png"))).unwrap();
    }
    textured(24, 20, 1, 3.0).save(&src.join("gray.png")).unwrap();
    for kind in ["blur", "sharp", "noise", "pinch", "whirl"] {
        let out = tmp.path().join(kind);
        let o = vtgan(&["distort", "--in", s(&src), "--out-dir", s(&out), "--distortion", kind, "--strength", "0"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout_json(&o).len(), 3);
        for name in ["im0.png", "im1.png", "gray.png"] {
            assert_eq!(std::fs::read(src.join(name)).unwrap().len() > 0, true);
            let a = image::open(src.join(name)).unwrap();
            let b = image::open(out.join(name)).unwrap();
            assert_eq!(a.color(), b.color(), "{kind} {name}");
            assert_eq!(a.as_bytes(), b.as_bytes(), "{kind} {name}");
        }
    }
    let run = |seed: &str, dir: &str| {
        let out = tmp.path().join(dir);
        let o = vtgan(&["--seed", seed, "distort", "--in", s(&src), "--out-dir", s(&out), "--distortion", "noise", "--strength", "0.2"]);
        assert_eq!(code(&o), 0);
        std::fs::read(out.join("im0.png")).unwrap()
    };
    assert_eq!(run("5", "n1"), run("5", "n2"));
    assert_ne!(run("5", "n1"), run("6", "n3"));

    // a config file's seed is overridden by --seed
    let cfg = tmp.path().join("cfg.json");
    let mut rc = RunConfig::for_scale(Scale::Desk);
    rc.seed = 6;
    rc.save(&cfg).unwrap();
    let out = tmp.path().join("n4");
    let o = vtgan(&["--config", s(&cfg), "distort", "--in", s(&src), "--out-dir", s(&out), "--distortion", "noise", "--strength", "0.2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(out.join("im0.png")).unwrap(), run("6", "n5"));
    let out = tmp.path().join("n6");
    let o = vtgan(&["--config", s(&cfg), "--seed", "5", "distort", "--in", s(&src), "--out-dir", s(&out), "--distortion", "noise", "--strength", "0.2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(out.join("im0.png")).unwrap(), run("5", "n7"));
}

#[test]
fn synthesize_emits_both_scales() {
    let tmp = tempfile::tempdir().unwrap();
    let w = desk_weights(tmp.path());
    let f = tmp.path().join("f.png");
    textured(64, 64, 3, 0.0).save(&f).unwrap();
    let out = tmp.path().join("o");
    let o = vtgan(&["synthesize", "--weights", s(&w), "--in", s(&f), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fine = image::open(out.join("f_fa_64.png")).unwrap();
    let coarse = image::open(out.join("f_fa_32.png")).unwrap();
    assert_eq!((fine.width(), fine.height()), (64, 64));
    assert_eq!((coarse.width(), coarse.height()), (32, 32));
    assert_eq!(fine.color(), image::ColorType::L8);
    // deterministic
    let out2 = tmp.path().join("o2");
    assert_eq!(code(&vtgan(&["synthesize", "--weights", s(&w), "--in", s(&f), "--out-dir", s(&out2)])), 0);
    assert_eq!(std::fs::read(out.join("f_fa_64.png")).unwrap(), std::fs::read(out2.join("f_fa_64.png")).unwrap());
}

#[test]
fn classify_prints_probabilities_per_line() {
    let tmp = tempfile::tempdir().unwrap();
    let w = desk_weights(tmp.path());
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    dataset(&data, 3, 64, 0);
    // an angiogram without a fundus partner
    textured(64, 64, 1, 9.0).save(&data.join("lone_fa.png")).unwrap();
    let out = tmp.path().join("o");
    let o = vtgan(&["classify", "--weights", s(&w), "--in", s(&data), "--labels", s(&data.join("labels.csv")), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = stdout_json(&o);
    let preds: Vec<&Value> = lines.iter().filter(|l| l.get("predicted").is_some()).collect();
    assert_eq!(preds.len(), 4);
    for p in &preds {
        let (a, n) = (p["abnormal"].as_f64().unwrap(), p["normal"].as_f64().unwrap());
        assert!((a + n - 1.0).abs() < 1e-9 && a >= 0.0 && n >= 0.0);
    }
    let lone = preds.iter().find(|p| p["id"] == "lone").unwrap();
    assert_eq!(lone["paired"], false);
    assert!(lone["label"].is_null());
    assert!(lines.iter().any(|l| l.get("summary").is_some()));
    let written = std::fs::read_to_string(out.join("classification.jsonl")).unwrap();
    assert_eq!(written.lines().count(), 4);
}

#[test]
fn evaluate_identical_dirs_gives_zero_fid() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen");
    std::fs::create_dir(&gen).unwrap();
    for i in 0..6 {
        textured(32, 32, 1, i as f64 * 0.7).save(&gen.join(format!("x{i}.png"))).unwrap();
    }
    let out = tmp.path().join("report");
    let o = vtgan(&["evaluate", "--in", s(&gen), "--reference", s(&gen), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = stdout_json(&o);
    assert_eq!(rows.len(), 6);
    let none = rows.iter().find(|r| r["condition"] == "none").unwrap();
    assert!(none["fid"].as_f64().unwrap().abs() < 1e-6, "{none}");
    assert!(none["kid"].as_f64().unwrap().abs() < 1e-9);
    assert!(rows.iter().filter(|r| r["condition"] != "none").all(|r| r["fid"].as_f64().unwrap() >= 0.0));
    assert!(out.join("report.json").exists() && out.join("report.txt").exists());
    let o = vtgan(&["evaluate", "--in", s(&gen)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_subset_passes() {
    let o = vtgan(&["--scale", "desk", "gradcheck", "--filter", "relu"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = stdout_json(&o);
    assert!(!rows.is_empty());
    for r in rows {
        assert_eq!(r["pass"], true);
        assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
    }
    assert_eq!(code(&vtgan(&["gradcheck", "--filter", "no-such-case"])), 1);
}

#[test]
fn prepare_then_train_then_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    dataset(&data, 4, 72, 2);
    let o = vtgan(&["--seed", "3", "prepare", "--in", s(&data), "--crops-per-image", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let counts = stdout_json(&o);
    assert_eq!(counts[0]["split"], "train");
    assert_eq!(counts[0]["pairs"], 4);
    assert_eq!(counts[1]["pairs"], 8);
    assert!(data.join("manifest.json").exists());

    let run = tmp.path().join("run");
    let o = vtgan(&["--seed", "3", "train", "--in", s(&data), "--out-dir", s(&run), "--steps", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let last = stdout_json(&o).pop().unwrap();
    assert_eq!(last["step"], 2);
    let ckpt = run.join("checkpoints").join("latest");
    assert!(ckpt.join("weights.vtgw").exists());
    let log = std::fs::read_to_string(run.join("run_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 2);

    let o = vtgan(&["train", "--in", s(&data), "--out-dir", s(&run), "--steps", "1", "--resume", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o).pop().unwrap()["step"], 3);

    // the trained weights feed synthesize
    let out = tmp.path().join("syn");
    let o = vtgan(&["synthesize", "--weights", s(&ckpt.join("weights.vtgw")), "--in", s(&data.join("p0_fundus.png")), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("p0_fundus_fa_64.png").exists());
}
