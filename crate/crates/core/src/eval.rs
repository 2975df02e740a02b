//! Evaluation harness: FID/KID and classification metrics under each
//! distortion condition, reported as JSON and as an aligned text table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{distort, from_batch, to_batch, DistortionDefaults, DistortionKind, DistortionSpec, Image, Label, PairSet};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::metrics::{fid, kid, ConfusionCounts, FeatureCloud};
use crate::models::Vtgan;
use crate::nn::Ctx;
use crate::tensor::{no_grad, ParameterStore, Tensor};

pub const NONE: &str = "none";

/// Report rows in order: undistorted, then every distortion kind.
pub fn conditions() -> Vec<String> {
    std::iter::once(NONE.to_string())
        .chain(DistortionKind::ALL.iter().map(|k| k.name().to_string()))
        .collect()
}

fn condition_kind(name: &str) -> Result<Option<DistortionKind>> {
    if name == NONE {
        Ok(None)
    } else {
        name.parse().map(Some)
    }
}

/// Applies the named condition at its default strength; image `i` gets
/// noise seed `seed + i`.
pub fn apply_condition(images: &[Image], name: &str, defaults: &DistortionDefaults, seed: u64) -> Result<Vec<Image>> {
    match condition_kind(name)? {
        None => Ok(images.to_vec()),
        Some(kind) => images
            .par_iter()
            .enumerate()
            .map(|(i, img)| distort(img, &DistortionSpec::with_default(kind, defaults, seed.wrapping_add(i as u64))?))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub counts: ConfusionCounts,
    /// Absent when the metric is undefined for these counts.
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl ClassificationRow {
    pub fn new(truth: &[Label], predicted: &[Label]) -> Result<ClassificationRow> {
        let counts = ConfusionCounts::from_predictions(truth, predicted, Label::Normal)?;
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        let c = counts;
        Ok(ClassificationRow {
            counts,
            accuracy: ratio(c.tp + c.tn, c.total()),
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            specificity: ratio(c.tn, c.tn + c.fp),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub condition: String,
    pub samples: usize,
    pub fid: f64,
    pub kid: f64,
    pub classification: Option<ClassificationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub extractor_id: String,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, condition: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table; metrics in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>12} {:>12} {:>8} {:>8} {:>8}",
            "condition", "n", "FID", "KID", "acc%", "sens%", "spec%"
        );
        for r in &self.rows {
            let pct = |v: Option<Option<f64>>| v.flatten().map_or("-".to_string(), |v| format!("{:.1}", v * 100.0));
            let c = r.classification.as_ref();
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>12.4} {:>12.6} {:>8} {:>8} {:>8}",
                r.condition,
                r.samples,
                r.fid,
                r.kid,
                pct(c.map(|c| c.accuracy)),
                pct(c.map(|c| c.sensitivity)),
                pct(c.map(|c| c.specificity))
            );
        }
        let _ = writeln!(s, "extractor: {}", self.extractor_id);
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}

const EMBED_BATCH: usize = 8;

fn distance_row(
    condition: &str,
    generated: &[Image],
    reference: &FeatureCloud,
    fx: &dyn FeatureExtractor,
    classification: Option<ClassificationRow>,
) -> Result<EvalRow> {
    let cloud = FeatureCloud::from_images(fx, generated, EMBED_BATCH)?;
    Ok(EvalRow {
        condition: condition.to_string(),
        samples: generated.len(),
        fid: fid(&cloud, reference)?,
        kid: kid(&cloud, reference)?,
        classification,
    })
}

/// Sorted `*.png` file names of a directory.
pub fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            names.push(path.file_name().expect("file").to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Loads every named image, reporting all failures together.
pub fn load_images(dir: &Path, names: &[String], channels: usize) -> Result<Vec<Image>> {
    let results: Vec<Result<Image>> = names.par_iter().map(|n| Image::load(&dir.join(n), channels)).collect();
    let errors: Vec<String> = results.iter().filter_map(|r| r.as_ref().err().map(ToString::to_string)).collect();
    if !errors.is_empty() {
        return Err(Error::Data(format!("{} unreadable image(s):\n  {}", errors.len(), errors.join("\n  "))));
    }
    Ok(results.into_iter().map(|r| r.expect("checked")).collect())
}

fn check_names(dir: &Path, names: &[String], expected: &[String]) -> Result<()> {
    if names == expected {
        return Ok(());
    }
    let missing: Vec<&String> = expected.iter().filter(|n| !names.contains(n)).collect();
    let extra: Vec<&String> = names.iter().filter(|n| !expected.contains(n)).collect();
    Err(Error::Data(format!(
        "{}: {} images but the reference has {} (missing {:?}, unexpected {:?})",
        dir.display(),
        names.len(),
        expected.len(),
        missing,
        extra
    )))
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    file: String,
    label: String,
    predicted: String,
    #[serde(default)]
    condition: Option<String>,
}

/// `file,label,predicted[,condition]` rows grouped by condition.
fn read_predictions(path: &Path) -> Result<BTreeMap<String, (Vec<Label>, Vec<Label>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out: BTreeMap<String, (Vec<Label>, Vec<Label>)> = BTreeMap::new();
    for (i, row) in reader.deserialize::<PredictionRow>().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("{} row {}: {e}", path.display(), i + 1)))?;
        let cond = row.condition.filter(|c| !c.is_empty()).unwrap_or_else(|| NONE.to_string());
        condition_kind(&cond)?;
        let entry = out.entry(cond).or_default();
        entry.0.push(row.label.parse().map_err(|e| Error::Data(format!("{}: {e}", row.file)))?);
        entry.1.push(row.predicted.parse().map_err(|e| Error::Data(format!("{}: {e}", row.file)))?);
    }
    Ok(out)
}

/// Compares a directory of generated angiograms against a reference
/// directory with the same file names. Condition rows use
/// `generated_dir/<condition>/` when present and otherwise distort the
/// undistorted generated images. `labels` optionally points to a
/// `file,label,predicted[,condition]` CSV of classifier outputs.
pub fn evaluate_run(
    generated_dir: &Path,
    reference_dir: &Path,
    labels: Option<&Path>,
    fx: &dyn FeatureExtractor,
    defaults: &DistortionDefaults,
    seed: u64,
) -> Result<EvalReport> {
    let ref_names = png_names(reference_dir)?;
    let gen_names = png_names(generated_dir)?;
    check_names(generated_dir, &gen_names, &ref_names)?;
    let reference = load_images(reference_dir, &ref_names, 1)?;
    let reference_cloud = FeatureCloud::from_images(fx, &reference, EMBED_BATCH)?;
    let base = load_images(generated_dir, &gen_names, 1)?;
    let mut predictions = match labels {
        Some(p) => read_predictions(p)?,
        None => BTreeMap::new(),
    };
    let mut rows = Vec::new();
    for cond in conditions() {
        let sub: PathBuf = generated_dir.join(&cond);
        let generated = if cond != NONE && sub.is_dir() {
            let names = png_names(&sub)?;
            check_names(&sub, &names, &ref_names)?;
            load_images(&sub, &names, 1)?
        } else {
            apply_condition(&base, &cond, defaults, seed)?
        };
        let classification = match predictions.remove(&cond) {
            Some((t, p)) => Some(ClassificationRow::new(&t, &p)?),
            None => None,
        };
        rows.push(distance_row(&cond, &generated, &reference_cloud, fx, classification)?);
    }
    Ok(EvalReport {
        extractor_id: fx.id().to_string(),
        seed,
        rows,
    })
}

/// Fine-scale angiograms for a fundus batch, in evaluation mode.
pub fn synthesize(model: &Vtgan, store: &mut ParameterStore, fundus: &Tensor) -> Result<(Tensor, Tensor)> {
    let _guard = no_grad();
    let s = model.generators.synthesize(store, &Ctx::eval(), fundus)?;
    Ok((s.fine, s.coarse))
}

/// Class probabilities `[B, 2]` (Abnormal, Normal) from the fine-scale
/// discriminator.
pub fn classify(model: &Vtgan, store: &ParameterStore, fundus: &Tensor, angio: &Tensor) -> Result<Tensor> {
    let _guard = no_grad();
    Ok(model.discriminators.fine.forward(store, &Ctx::eval(), fundus, angio)?.class_probs)
}

fn argmax_label(probs: &[f64]) -> Label {
    Label::from_index(usize::from(probs[1] > probs[0]))
}

/// Full protocol on held-out pairs: each condition distorts the fundus,
/// synthesizes the angiogram, compares it with the real one and classifies
/// the (distorted fundus, synthesized angiogram) pair.
pub fn evaluate_model(
    model: &Vtgan,
    store: &mut ParameterStore,
    pairs: &dyn PairSet,
    fx: &dyn FeatureExtractor,
    defaults: &DistortionDefaults,
    seed: u64,
    batch: usize,
) -> Result<EvalReport> {
    let all = (0..pairs.len()).map(|i| pairs.pair(i)).collect::<Result<Vec<_>>>()?;
    let reference: Vec<Image> = all.iter().map(|p| p.angio.clone()).collect();
    let reference_cloud = FeatureCloud::from_images(fx, &reference, EMBED_BATCH)?;
    let truth: Vec<Label> = all.iter().map(|p| p.label).collect();
    let fundus: Vec<Image> = all.iter().map(|p| p.fundus.clone()).collect();
    let mut rows = Vec::new();
    for cond in conditions() {
        let inputs = apply_condition(&fundus, &cond, defaults, seed)?;
        let mut generated = Vec::with_capacity(inputs.len());
        let mut predicted = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(batch.max(1)) {
            let x = to_batch(&chunk.iter().collect::<Vec<_>>())?;
            let (fa, _) = synthesize(model, store, &x)?;
            let probs = classify(model, store, &x, &fa)?;
            predicted.extend(probs.data().chunks_exact(2).map(argmax_label));
            generated.extend(from_batch(&fa)?);
        }
        let classification = Some(ClassificationRow::new(&truth, &predicted)?);
        rows.push(distance_row(&cond, &generated, &reference_cloud, fx, classification)?);
    }
    Ok(EvalReport {
        extractor_id: fx.id().to_string(),
        seed,
        rows,
    })
}
