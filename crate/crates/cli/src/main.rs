use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use vtgan_core::config::{GanConfig, RunConfig, Scale};
use vtgan_core::data::{
    distort, lanczos_resize, to_batch, DistortionKind, DistortionSpec, Image, Label, Manifest, ManifestDataset, PrepareConfig, Split,
};
use vtgan_core::eval::{self, classify, evaluate_model, evaluate_run, png_names, synthesize};
use vtgan_core::features::load_extractor;
use vtgan_core::gradsuite;
use vtgan_core::train::{load_model, Trainer};
use vtgan_core::weights::WeightFile;
use vtgan_core::Error;

const MANIFEST: &str = "manifest.json";

/// Fundus-to-angiography synthesis and classification.
#[derive(Debug, Parser)]
#[command(name = "vtgan", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration JSON; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random choice (crop sampling, initialization, noise, ...).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Size preset: `full` (512/256) or `desk` (64/32).
    #[arg(long, global = true, value_parser = ["full", "desk"])]
    scale: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a dataset manifest from `<id>_fundus.png`, `<id>_fa.png` and labels.csv.
    Prepare {
        /// Source directory.
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        /// Where manifest.json is written (defaults to the source directory).
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
        /// Crop side (defaults to the fine image size of the preset).
        #[arg(long)]
        crop: Option<usize>,
        /// Training crops per source image.
        #[arg(long, default_value_t = 50)]
        crops_per_image: usize,
    },
    /// Train the generators and discriminators.
    Train {
        /// Source directory of the dataset.
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        /// Manifest (defaults to `<in>/manifest.json`; prepared on the fly when absent).
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        /// Run directory for checkpoints and the run log.
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many batches (for smoke runs).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint directory.
        #[arg(long, value_name = "DIR")]
        resume: Option<PathBuf>,
    },
    /// Synthesize angiograms at both scales from fundus photographs.
    Synthesize {
        /// Model weight file.
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
        /// Fundus PNG or directory of PNGs.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// Receives `<stem>_fa_<size>.png` for both output sizes.
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Abnormal/Normal probabilities for angiograms or fundus/angiogram pairs.
    Classify {
        /// Model weight file.
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
        /// `*_fa.png` file or directory; a sibling `*_fundus.png` is used when present.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// labels.csv (`patient_id,label`) to score the predictions against.
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
        /// Also write classification.jsonl here.
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Apply a distortion to a PNG or every PNG of a directory.
    Distort {
        /// PNG file or directory of PNGs.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// Distorted copies keep their file names here.
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// One of blur, sharp, noise, pinch, whirl.
        #[arg(long)]
        distortion: String,
        /// Strength (sigma, amount, std, factor or degrees); defaults from the configuration.
        #[arg(long, allow_hyphen_values = true)]
        strength: Option<f64>,
    },
    /// FID/KID and classification metrics per distortion condition.
    Evaluate {
        /// Generated angiograms, or with --weights the dataset source directory.
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        /// Real angiograms with the same file names as --in.
        #[arg(long, value_name = "DIR")]
        reference: Option<PathBuf>,
        /// Classifier outputs `file,label,predicted[,condition]` for the directory mode.
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
        /// Evaluate a model on the test split of a prepared dataset instead.
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
        /// Manifest for --weights (defaults to `<in>/manifest.json`).
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        /// Writes report.json and report.txt here.
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every op, block and network.
    Gradcheck {
        /// Only run cases whose name contains this.
        #[arg(long)]
        filter: Option<String>,
    },
}

/// Exit status classes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Numerical(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => 1,
                Failure::Numerical(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidArgument(_) => 1,
                Error::Numerical(_) | Error::MissingGradient(_) | Error::NonScalarLoss(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn run_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?,
        None => RunConfig::for_scale(Scale::Desk),
    };
    if let Some(s) = &common.scale {
        let scale: Scale = s.parse()?;
        if common.config.is_none() || scale != cfg.scale {
            cfg.scale = scale;
            cfg.gan = GanConfig::for_scale(scale);
        }
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A single PNG or the sorted PNGs of a directory.
fn inputs(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_dir() {
        Ok(png_names(path)?.into_iter().map(|n| path.join(n)).collect())
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::Data(format!("{} does not exist", path.display())).into())
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn resized(img: Image, size: usize) -> anyhow::Result<Image> {
    if img.height == size && img.width == size {
        return Ok(img);
    }
    log::warn!("resizing {}x{} input to {size}x{size}", img.height, img.width);
    let data = lanczos_resize(&img.data, img.height, img.width, img.channels, size, size)?;
    Ok(Image::new(size, size, img.channels, data)?)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| anyhow!(Error::Data(format!("{}: {e}", dir.display()))))
}

fn cmd_prepare(cfg: &RunConfig, input: &Path, out_dir: Option<&Path>, crop: Option<usize>, per_image: usize) -> anyhow::Result<()> {
    let mut pc = PrepareConfig::new(crop.unwrap_or(cfg.gan.fine_size), cfg.seed);
    pc.crops_per_image = per_image;
    let manifest = Manifest::prepare(input, &pc)?;
    let out = out_dir.unwrap_or(input);
    create_dir(out)?;
    manifest.save(&out.join(MANIFEST))?;
    for split in [Split::Train, Split::Test] {
        println!(
            "{}",
            json!({
                "split": split,
                "pairs": manifest.count(split, None),
                "abnormal": manifest.count(split, Some(Label::Abnormal)),
                "normal": manifest.count(split, Some(Label::Normal)),
            })
        );
    }
    Ok(())
}

fn load_manifest(input: &Path, manifest: Option<&Path>) -> anyhow::Result<Manifest> {
    let path = manifest.map_or_else(|| input.join(MANIFEST), Path::to_path_buf);
    Ok(Manifest::load(&path)?)
}

fn cmd_train(
    cfg: RunConfig,
    input: &Path,
    manifest: Option<&Path>,
    out_dir: &Path,
    epochs: Option<usize>,
    steps: Option<u64>,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    let manifest = match manifest.map(Path::to_path_buf).or_else(|| Some(input.join(MANIFEST)).filter(|p| p.exists())) {
        Some(p) => Manifest::load(&p)?,
        None => {
            let m = Manifest::prepare(input, &PrepareConfig::new(cfg.gan.fine_size, cfg.seed))?;
            create_dir(out_dir)?;
            m.save(&out_dir.join(MANIFEST))?;
            m
        }
    };
    if manifest.config.crop != cfg.gan.fine_size {
        return Err(Failure::Usage(format!(
            "manifest crops are {}px but the model expects {}px",
            manifest.config.crop, cfg.gan.fine_size
        ))
        .into());
    }
    let data = ManifestDataset::new(input, Arc::new(manifest), Split::Train);
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(dir)?,
        None => Trainer::new(cfg)?,
    };
    if let Some(e) = epochs {
        trainer.config.train.epochs = e;
    }
    trainer.set_run_dir(out_dir)?;
    trainer.config.save(&out_dir.join("config.json"))?;
    match steps {
        None => trainer.train(&data)?,
        Some(n) => {
            for _ in 0..n {
                let l = trainer.advance(&data)?;
                log::info!("step {} d_total {:.5} g_total {:.5}", trainer.state.step, l.d.last().map_or(0.0, |d| d.total), l.g.total);
            }
            trainer.save_checkpoint(&out_dir.join("checkpoints").join("latest"))?;
        }
    }
    println!("{}", json!({"epoch": trainer.state.epoch, "step": trainer.state.step, "best_mse": trainer.state.best_mse}));
    Ok(())
}

fn cmd_synthesize(weights: &Path, input: &Path, out_dir: &Path) -> anyhow::Result<()> {
    let (model, mut store) = load_model(&WeightFile::load(weights)?)?;
    let gan = model.config.clone();
    create_dir(out_dir)?;
    for path in inputs(input)? {
        let fundus = resized(Image::load(&path, 3)?, gan.fine_size)?;
        let (fine, coarse) = synthesize(&model, &mut store, &to_batch(&[&fundus])?)?;
        let name = stem(&path);
        for (t, size) in [(fine, gan.fine_size), (coarse, gan.coarse_size)] {
            let out = out_dir.join(format!("{name}_fa_{size}.png"));
            vtgan_core::data::from_batch(&t)?.remove(0).save(&out)?;
            println!("{}", json!({"input": path, "output": out}));
        }
    }
    Ok(())
}

fn cmd_classify(weights: &Path, input: &Path, labels: Option<&Path>, out_dir: Option<&Path>) -> anyhow::Result<()> {
    let (model, store) = load_model(&WeightFile::load(weights)?)?;
    let size = model.config.fine_size;
    let truth = match labels {
        Some(p) => vtgan_core::data::dataset::read_labels(p)?
            .into_iter()
            .map(|(id, l, _)| (id, l))
            .collect::<std::collections::HashMap<_, _>>(),
        None => Default::default(),
    };
    let files: Vec<PathBuf> = inputs(input)?
        .into_iter()
        .filter(|p| !stem(p).ends_with("_fundus"))
        .collect();
    let mut lines = Vec::new();
    let (mut t_all, mut p_all) = (Vec::new(), Vec::new());
    for path in files {
        let name = stem(&path);
        let id = name.strip_suffix("_fa").unwrap_or(&name).to_string();
        let fundus_path = path.with_file_name(format!("{id}_fundus.png"));
        let angio = resized(Image::load(&path, 1)?, size)?;
        let (fundus, paired) = if fundus_path.is_file() {
            (resized(Image::load(&fundus_path, 3)?, size)?, true)
        } else {
            // angiogram only: neutral mid-gray fundus
            (Image::filled(size, size, 3, 0.0), false)
        };
        let probs = classify(&model, &store, &to_batch(&[&fundus])?, &to_batch(&[&angio])?)?;
        let p = probs.data();
        let predicted = if p[1] > p[0] { Label::Normal } else { Label::Abnormal };
        let label = truth.get(&id).copied();
        if let Some(l) = label {
            t_all.push(l);
            p_all.push(predicted);
        }
        let line = json!({
            "file": path, "id": id, "paired": paired,
            "abnormal": p[0], "normal": p[1], "predicted": predicted.to_string(),
            "label": label.map(|l| l.to_string()),
        });
        println!("{line}");
        lines.push(line.to_string());
    }
    if !t_all.is_empty() {
        let row = eval::ClassificationRow::new(&t_all, &p_all)?;
        println!("{}", json!({"summary": row}));
    }
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        let path = dir.join("classification.jsonl");
        std::fs::write(&path, lines.join("\n") + "\n").with_context(|| path.display().to_string())?;
    }
    Ok(())
}

fn cmd_distort(cfg: &RunConfig, input: &Path, out_dir: &Path, distortion: &str, strength: Option<f64>) -> anyhow::Result<()> {
    let kind: DistortionKind = distortion.parse()?;
    let strength = strength.unwrap_or_else(|| cfg.distortion.strength(kind));
    create_dir(out_dir)?;
    for (i, path) in inputs(input)?.into_iter().enumerate() {
        let spec = DistortionSpec::new(kind, strength, cfg.seed.wrapping_add(i as u64))?;
        let img = image_any(&path)?;
        let out = out_dir.join(path.file_name().expect("file"));
        distort(&img, &spec)?.save(&out)?;
        println!("{}", json!({"input": path, "output": out, "distortion": kind.name(), "strength": strength}));
    }
    Ok(())
}

/// Loads with the file's own channel count (gray stays gray).
fn image_any(path: &Path) -> anyhow::Result<Image> {
    let dynimg = image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .decode()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let channels = if dynimg.color().has_color() { 3 } else { 1 };
    Ok(Image::from_dynamic(dynimg, channels)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    cfg: &RunConfig,
    input: &Path,
    reference: Option<&Path>,
    labels: Option<&Path>,
    weights: Option<&Path>,
    manifest: Option<&Path>,
    out_dir: Option<&Path>,
) -> anyhow::Result<()> {
    let fx = load_extractor(cfg.paths.extractor.as_deref())?;
    let report = match weights {
        Some(w) => {
            let (model, mut store) = load_model(&WeightFile::load(w)?)?;
            let data = ManifestDataset::new(input, Arc::new(load_manifest(input, manifest)?), Split::Test);
            evaluate_model(&model, &mut store, &data, fx.as_ref(), &cfg.distortion, cfg.seed, cfg.train.batch_size)?
        }
        None => {
            let reference = reference.ok_or_else(|| Failure::Usage("evaluate needs --reference or --weights".into()))?;
            evaluate_run(input, reference, labels, fx.as_ref(), &cfg.distortion, cfg.seed)?
        }
    };
    eprint!("{}", report.to_table());
    for row in &report.rows {
        println!("{}", serde_json::to_string(row)?);
    }
    if let Some(dir) = out_dir {
        report.save(dir)?;
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, filter: Option<&str>) -> anyhow::Result<()> {
    let results = gradsuite::run(cfg.seed, &cfg.gan, filter)?;
    if results.is_empty() {
        bail!(Failure::Usage(format!("no gradient case matches `{}`", filter.unwrap_or(""))));
    }
    let mut failed = 0;
    for r in &results {
        let ok = r.passed();
        failed += usize::from(!ok);
        println!(
            "{}",
            json!({
                "case": r.name,
                "max_rel_error": r.report.max_rel_error,
                "max_abs_error": r.report.max_abs_error,
                "coords": r.report.coords_checked,
                "nonsmooth": r.report.nonsmooth_coords,
                "pass": ok,
            })
        );
    }
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} gradient case(s) above {:e}", gradsuite::TOLERANCE)).into());
    }
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("VTGAN_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::Usage(format!("VTGAN_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let cfg = run_config(&cli.common)?;
    match cli.command {
        Command::Prepare {
            input,
            out_dir,
            crop,
            crops_per_image,
        } => cmd_prepare(&cfg, &input, out_dir.as_deref(), crop, crops_per_image),
        Command::Train {
            input,
            manifest,
            out_dir,
            epochs,
            steps,
            resume,
        } => cmd_train(cfg, &input, manifest.as_deref(), &out_dir, epochs, steps, resume.as_deref()),
        Command::Synthesize { weights, input, out_dir } => cmd_synthesize(&weights, &input, &out_dir),
        Command::Classify {
            weights,
            input,
            labels,
            out_dir,
        } => cmd_classify(&weights, &input, labels.as_deref(), out_dir.as_deref()),
        Command::Distort {
            input,
            out_dir,
            distortion,
            strength,
        } => cmd_distort(&cfg, &input, &out_dir, &distortion, strength),
        Command::Evaluate {
            input,
            reference,
            labels,
            weights,
            manifest,
            out_dir,
        } => cmd_evaluate(&cfg, &input, reference.as_deref(), labels.as_deref(), weights.as_deref(), manifest.as_deref(), out_dir.as_deref()),
        Command::Gradcheck { filter } => cmd_gradcheck(&cfg, filter.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
