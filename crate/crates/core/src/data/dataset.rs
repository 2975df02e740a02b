//! Paired fundus/angiogram crops, class balancing and the dataset manifest.
//!
//! A source directory holds `<patient>_fundus.png`, `<patient>_fa.png` and a
//! `labels.csv` with `patient_id,label[,split]` rows. `prepare` only reads
//! image headers and records every crop's provenance in a [`Manifest`];
//! pixels are materialized on demand by [`ManifestDataset`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::nn::path_id;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Abnormal,
    Normal,
}

impl Label {
    /// Index into the discriminator's two class outputs.
    pub fn class_index(self) -> usize {
        match self {
            Label::Abnormal => 0,
            Label::Normal => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Abnormal
        } else {
            Label::Normal
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Abnormal => "abnormal",
            Label::Normal => "normal",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "abnormal" => Ok(Label::Abnormal),
            "normal" => Ok(Label::Normal),
            _ => Err(Error::Data(format!("unknown label `{s}` (expected normal or abnormal)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split `{s}` (expected train or test)"))),
        }
    }
}

/// One of the eight symmetries of the square: an optional horizontal flip
/// followed by `quarter_turns` counter-clockwise rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dihedral {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        flip: false,
        quarter_turns: 0,
    };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(|i| Dihedral {
            flip: i >= 4,
            quarter_turns: i % 4,
        })
    }

    pub fn is_identity(self) -> bool {
        self == Dihedral::IDENTITY
    }

    pub fn apply(self, img: &Image) -> Image {
        let mut out = img.clone();
        if self.flip {
            out = Image::from_fn(img.height, img.width, img.channels, |y, x, c| img.get(y, img.width - 1 - x, c));
        }
        for _ in 0..self.quarter_turns % 4 {
            let src = out;
            // counter-clockwise: new(y, x) = old(x, W - 1 - y)
            out = Image::from_fn(src.width, src.height, src.channels, |y, x, c| src.get(x, src.width - 1 - y, c));
        }
        out
    }
}

/// A registered fundus/angiogram pair at crop resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FundusAngioPair {
    pub fundus: Image,
    pub angio: Image,
    pub label: Label,
    pub patient_id: String,
    pub crop_origin: (usize, usize),
    pub augmentation: Dihedral,
}

impl FundusAngioPair {
    pub fn new(fundus: Image, angio: Image, label: Label, patient_id: &str, crop_origin: (usize, usize)) -> Result<Self> {
        if fundus.channels != 3 || angio.channels != 1 || (fundus.height, fundus.width) != (angio.height, angio.width) {
            return Err(Error::Data(format!(
                "patient {patient_id}: fundus {:?} and angiogram {:?} are not a registered pair",
                fundus.shape(),
                angio.shape()
            )));
        }
        Ok(FundusAngioPair {
            fundus,
            angio,
            label,
            patient_id: patient_id.to_string(),
            crop_origin,
            augmentation: Dihedral::IDENTITY,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.fundus.height, self.fundus.width)
    }

    pub fn crop(&self, row: usize, col: usize, crop: usize) -> Result<FundusAngioPair> {
        let mut p = FundusAngioPair::new(
            self.fundus.crop(row, col, crop, crop)?,
            self.angio.crop(row, col, crop, crop)?,
            self.label,
            &self.patient_id,
            (self.crop_origin.0 + row, self.crop_origin.1 + col),
        )?;
        p.augmentation = self.augmentation;
        Ok(p)
    }

    pub fn transformed(&self, t: Dihedral) -> FundusAngioPair {
        FundusAngioPair {
            fundus: t.apply(&self.fundus),
            angio: t.apply(&self.angio),
            augmentation: t,
            ..self.clone()
        }
    }
}

fn check_crop(h: usize, w: usize, crop: usize) -> Result<()> {
    if crop == 0 || crop > h || crop > w {
        return Err(Error::Data(format!("crop {crop} does not fit a {h}x{w} source")));
    }
    Ok(())
}

/// `count` seeded uniform crop origins within an `h x w` source.
pub fn crop_origins(h: usize, w: usize, crop: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    check_crop(h, w, crop)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| (rng.random_range(0..=h - crop), rng.random_range(0..=w - crop)))
        .collect())
}

/// The four corner-anchored crop origins.
pub fn quadrant_origins(h: usize, w: usize, crop: usize) -> Result<[(usize, usize); 4]> {
    check_crop(h, w, crop)?;
    Ok([(0, 0), (0, w - crop), (h - crop, 0), (h - crop, w - crop)])
}

/// Overlapping training crops; fundus and angiogram share every origin.
pub fn extract_crops(pair: &FundusAngioPair, crop: usize, count: usize, seed: u64) -> Result<Vec<FundusAngioPair>> {
    let (h, w) = pair.size();
    crop_origins(h, w, crop, count, seed)?
        .into_iter()
        .map(|(r, c)| pair.crop(r, c, crop))
        .collect()
}

/// The four overlapping corner crops used for testing.
pub fn quadrant_crops(pair: &FundusAngioPair, crop: usize) -> Result<Vec<FundusAngioPair>> {
    let (h, w) = pair.size();
    quadrant_origins(h, w, crop)?
        .into_iter()
        .map(|(r, c)| pair.crop(r, c, crop))
        .collect()
}

/// Which existing items to duplicate, and with which non-identity transform,
/// so that every class reaches `target` members.
pub fn balance_plan(labels: &[Label], target: usize, seed: u64) -> Result<Vec<(usize, Dihedral)>> {
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(*l).or_default().push(i);
    }
    if let Some(max) = by_class.values().map(Vec::len).max() {
        if target < max {
            return Err(Error::InvalidArgument(format!("balance target {target} is below the largest class ({max})")));
        }
    }
    let transforms: Vec<Dihedral> = Dihedral::all().filter(|d| !d.is_identity()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::new();
    for members in by_class.values() {
        for _ in members.len()..target {
            let src = members[rng.random_range(0..members.len())];
            plan.push((src, transforms[rng.random_range(0..transforms.len())]));
        }
    }
    Ok(plan)
}

/// Augments minority classes with seeded flips/rotations until every class
/// present has `target` pairs.
pub fn balance_classes(mut pairs: Vec<FundusAngioPair>, target: usize, seed: u64) -> Result<Vec<FundusAngioPair>> {
    let labels: Vec<Label> = pairs.iter().map(|p| p.label).collect();
    let extra: Vec<FundusAngioPair> = balance_plan(&labels, target, seed)?
        .into_iter()
        .map(|(i, t)| pairs[i].transformed(t))
        .collect();
    pairs.extend(extra);
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareConfig {
    pub crop: usize,
    pub crops_per_image: usize,
    /// Fraction of patients held out when labels.csv has no split column.
    pub test_fraction: f64,
    /// Balance training classes to the largest class count.
    pub balance: bool,
    pub seed: u64,
}

impl PrepareConfig {
    pub fn new(crop: usize, seed: u64) -> PrepareConfig {
        PrepareConfig {
            crop,
            crops_per_image: 50,
            test_fraction: 14.0 / 31.0,
            balance: true,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRecord {
    pub patient_id: String,
    pub label: Label,
    pub split: Split,
    pub fundus: String,
    pub fa: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropEntry {
    /// Index into `Manifest::sources`.
    pub source: usize,
    pub patient_id: String,
    pub label: Label,
    pub split: Split,
    pub origin: (usize, usize),
    pub augmentation: Dihedral,
    /// Seed that produced this entry's origin or augmentation.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: PrepareConfig,
    pub sources: Vec<SourceRecord>,
    pub entries: Vec<CropEntry>,
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    patient_id: String,
    label: String,
    #[serde(default)]
    split: Option<String>,
}

/// Reads `patient_id,label[,split]` rows (with a header line).
pub fn read_labels(path: &Path) -> Result<Vec<(String, Label, Option<Split>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("{} row {}: {e}", path.display(), i + 1)))?;
        let split = match row.split.as_deref() {
            None | Some("") => None,
            Some(s) => Some(s.parse()?),
        };
        out.push((row.patient_id, row.label.parse()?, split));
    }
    Ok(out)
}

fn entry_seed(seed: u64, patient: &str) -> u64 {
    seed ^ path_id(patient)
}

/// Assigns patients to splits: explicit splits are kept, the rest are
/// shuffled (seeded) and the first `round(n * test_fraction)` go to test.
fn assign_splits(rows: &[(String, Label, Option<Split>)], test_fraction: f64, seed: u64) -> Vec<Split> {
    if rows.iter().all(|r| r.2.is_some()) {
        return rows.iter().map(|r| r.2.expect("checked")).collect();
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].0.cmp(&rows[b].0));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (rows.len() as f64 * test_fraction).round() as usize;
    let mut splits = vec![Split::Train; rows.len()];
    for &i in order.iter().take(n_test) {
        splits[i] = Split::Test;
    }
    for (i, r) in rows.iter().enumerate() {
        if let Some(s) = r.2 {
            splits[i] = s;
        }
    }
    splits
}

impl Manifest {
    /// Plans the dataset from a source directory without decoding pixels.
    pub fn prepare(dir: &Path, cfg: &PrepareConfig) -> Result<Manifest> {
        let rows = read_labels(&dir.join("labels.csv"))?;
        let mut seen = std::collections::HashSet::new();
        for r in &rows {
            if !seen.insert(r.0.clone()) {
                return Err(Error::Data(format!("patient `{}` listed twice in labels.csv", r.0)));
            }
        }
        let splits = assign_splits(&rows, cfg.test_fraction, cfg.seed);
        let mut sources = Vec::with_capacity(rows.len());
        for ((patient, label, _), split) in rows.iter().zip(splits) {
            let fundus = format!("{patient}_fundus.png");
            let fa = format!("{patient}_fa.png");
            let dims = |name: &str| -> Result<(usize, usize)> {
                let p = dir.join(name);
                let (w, h) = image::image_dimensions(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
                Ok((h as usize, w as usize))
            };
            let (h, w) = dims(&fundus)?;
            if dims(&fa)? != (h, w) {
                return Err(Error::Data(format!("patient `{patient}`: fundus and angiogram sizes differ")));
            }
            sources.push(SourceRecord {
                patient_id: patient.clone(),
                label: *label,
                split,
                fundus,
                fa,
                height: h,
                width: w,
            });
        }
        Manifest::plan(sources, cfg)
    }

    /// Crop entries for already-described sources.
    pub fn plan(sources: Vec<SourceRecord>, cfg: &PrepareConfig) -> Result<Manifest> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in sources.iter().enumerate() {
            let seed = entry_seed(cfg.seed, &s.patient_id);
            let entry = |origin| CropEntry {
                source: i,
                patient_id: s.patient_id.clone(),
                label: s.label,
                split: s.split,
                origin,
                augmentation: Dihedral::IDENTITY,
                seed,
            };
            match s.split {
                Split::Train => {
                    train.extend(crop_origins(s.height, s.width, cfg.crop, cfg.crops_per_image, seed)?.into_iter().map(entry))
                }
                Split::Test => test.extend(quadrant_origins(s.height, s.width, cfg.crop)?.into_iter().map(entry)),
            }
        }
        if cfg.balance {
            let labels: Vec<Label> = train.iter().map(|e| e.label).collect();
            let mut counts: HashMap<Label, usize> = HashMap::new();
            for l in &labels {
                *counts.entry(*l).or_default() += 1;
            }
            let target = counts.values().copied().max().unwrap_or(0);
            let extra: Vec<CropEntry> = balance_plan(&labels, target, cfg.seed)?
                .into_iter()
                .map(|(i, t)| CropEntry {
                    augmentation: t,
                    seed: cfg.seed,
                    ..train[i].clone()
                })
                .collect();
            train.extend(extra);
        }
        train.extend(test);
        Ok(Manifest {
            config: cfg.clone(),
            sources,
            entries: train,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    pub fn count(&self, split: Split, label: Option<Label>) -> usize {
        self.entries
            .iter()
            .filter(|e| e.split == split && label.is_none_or(|l| e.label == l))
            .count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Random access to training/evaluation pairs.
pub trait PairSet: Sync {
    fn len(&self) -> usize;
    fn pair(&self, i: usize) -> Result<FundusAngioPair>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSet for [FundusAngioPair] {
    fn len(&self) -> usize {
        <[FundusAngioPair]>::len(self)
    }

    fn pair(&self, i: usize) -> Result<FundusAngioPair> {
        self.get(i)
            .cloned()
            .ok_or_else(|| Error::Data(format!("pair index {i} out of range")))
    }
}

impl PairSet for Vec<FundusAngioPair> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn pair(&self, i: usize) -> Result<FundusAngioPair> {
        self.as_slice().pair(i)
    }
}

/// Manifest entries of one split, materialized from the source directory.
/// Decoded source images are cached.
pub struct ManifestDataset {
    dir: PathBuf,
    manifest: Arc<Manifest>,
    indices: Vec<usize>,
    cache: Mutex<HashMap<usize, Arc<FundusAngioPair>>>,
}

impl ManifestDataset {
    pub fn new(dir: &Path, manifest: Arc<Manifest>, split: Split) -> ManifestDataset {
        ManifestDataset {
            dir: dir.to_path_buf(),
            indices: manifest.indices(split),
            manifest,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn entry(&self, i: usize) -> &CropEntry {
        &self.manifest.entries[self.indices[i]]
    }

    fn source(&self, idx: usize) -> Result<Arc<FundusAngioPair>> {
        if let Some(p) = self.cache.lock().expect("cache lock").get(&idx) {
            return Ok(p.clone());
        }
        let s = &self.manifest.sources[idx];
        let pair = Arc::new(FundusAngioPair::new(
            Image::load(&self.dir.join(&s.fundus), 3)?,
            Image::load(&self.dir.join(&s.fa), 1)?,
            s.label,
            &s.patient_id,
            (0, 0),
        )?);
        self.cache.lock().expect("cache lock").insert(idx, pair.clone());
        Ok(pair)
    }
}

impl PairSet for ManifestDataset {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn pair(&self, i: usize) -> Result<FundusAngioPair> {
        let e = self
            .indices
            .get(i)
            .map(|&k| &self.manifest.entries[k])
            .ok_or_else(|| Error::Data(format!("pair index {i} out of range")))?;
        let src = self.source(e.source)?;
        let crop = src.crop(e.origin.0, e.origin.1, self.manifest.config.crop)?;
        Ok(if e.augmentation.is_identity() {
            crop
        } else {
            crop.transformed(e.augmentation)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(h: usize, w: usize, label: Label) -> FundusAngioPair {
        FundusAngioPair::new(
            Image::from_fn(h, w, 3, |y, x, c| ((y * w + x) * 3 + c) as f64),
            Image::from_fn(h, w, 1, |y, x, _| (y * w + x) as f64),
            label,
            "p",
            (0, 0),
        )
        .unwrap()
    }

    #[test]
    fn crops_share_origins() {
        let src = source(12, 15, Label::Normal);
        let crops = extract_crops(&src, 8, 20, 1).unwrap();
        assert_eq!(crops.len(), 20);
        for c in &crops {
            let (r, k) = c.crop_origin;
            assert!(r <= 4 && k <= 7);
            assert_eq!(c.angio.get(0, 0, 0), (r * 15 + k) as f64);
            assert_eq!(c.fundus.get(0, 0, 0), ((r * 15 + k) * 3) as f64);
        }
        assert!(extract_crops(&src, 13, 1, 0).is_err());
        let same = extract_crops(&source(8, 8, Label::Normal), 8, 3, 0).unwrap();
        assert!(same.iter().all(|c| c.crop_origin == (0, 0)));
    }

    #[test]
    fn quadrant_corners() {
        let src = source(10, 12, Label::Abnormal);
        let q = quadrant_crops(&src, 8).unwrap();
        assert_eq!(q[0].angio.get(0, 0, 0), src.angio.get(0, 0, 0));
        assert_eq!(q[1].angio.get(0, 7, 0), src.angio.get(0, 11, 0));
        assert_eq!(q[2].angio.get(7, 0, 0), src.angio.get(9, 0, 0));
        assert_eq!(q[3].angio.get(7, 7, 0), src.angio.get(9, 11, 0));
    }

    #[test]
    fn dihedral_group_is_closed_and_square_preserving() {
        let img = Image::from_fn(3, 3, 1, |y, x, _| (y * 3 + x) as f64);
        let r = Dihedral {
            flip: false,
            quarter_turns: 1,
        };
        assert_eq!(r.apply(&r.apply(&r.apply(&r.apply(&img)))), img);
        assert_eq!(r.apply(&img).data, vec![2.0, 5.0, 8.0, 1.0, 4.0, 7.0, 0.0, 3.0, 6.0]);
        let outs: std::collections::HashSet<Vec<u64>> =
            Dihedral::all().map(|d| d.apply(&img).data.iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(outs.len(), 8);
    }

    #[test]
    fn balancing_counts() {
        let labels: Vec<Label> = (0..850).map(|i| if i < 500 { Label::Abnormal } else { Label::Normal }).collect();
        let plan = balance_plan(&labels, 500, 3).unwrap();
        assert_eq!(plan.len(), 150);
        assert!(plan.iter().all(|(i, t)| labels[*i] == Label::Normal && !t.is_identity()));
        assert!(balance_plan(&labels[..500], 500, 3).unwrap().is_empty());
        assert!(balance_plan(&labels, 499, 3).is_err());
    }
}
