//! Alternating adversarial training: a few discriminator steps followed by
//! one generator step per batch, with Adam, checkpoints and a JSONL run log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{GanConfig, RunConfig, TrainConfig};
use crate::data::{to_batch, FundusAngioPair, PairSet};
use crate::error::{Error, Result};
use crate::features::{load_extractor, FeatureExtractor};
use crate::losses::{cce, feature_l1, hinge_d, hinge_g, mse, one_hot, perceptual, total_generator_objective, GeneratorTerms, LossWeights};
use crate::models::{downscale_batch, VisionTransformer, Vtgan};
use crate::nn::Ctx;
use crate::tensor::{no_grad, EntryKind, ParameterStore, Tensor};
use crate::weights::WeightFile;

pub const WEIGHTS_FILE: &str = "weights.vtgw";
pub const OPTIMIZER_FILE: &str = "optimizer.vtgw";
pub const CONFIG_FILE: &str = "config.json";
pub const STATE_FILE: &str = "state.json";
pub const RUN_LOG: &str = "run_log.jsonl";

/// Adam moment buffers for the parameters under some prefixes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Adam {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            state: AdamState::default(),
        }
    }

    /// One bias-corrected update of every trainable parameter under
    /// `prefixes`. Frozen parameters and buffers are left alone.
    pub fn step(&mut self, store: &mut ParameterStore, prefixes: &[&str]) -> Result<()> {
        let mut updates = Vec::new();
        for prefix in prefixes {
            for path in store.trainable_paths(prefix) {
                let g = store.grad(&path)?.ok_or_else(|| Error::MissingGradient(path.clone()))?;
                updates.push((path, g));
            }
        }
        self.state.t += 1;
        let t = self.state.t as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (path, g) in updates {
            let m = self.state.m.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.state.v.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut w = store.values(&path)?.to_vec();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            store.set_value(&path, w)?;
        }
        Ok(())
    }

    fn push_into(&self, name: &str, store: &mut ParameterStore, meta: &mut serde_json::Value) -> Result<()> {
        for (path, m) in &self.state.m {
            store.insert_buffer(&format!("{name}.m.{path}"), m.clone(), &[m.len()])?;
        }
        for (path, v) in &self.state.v {
            store.insert_buffer(&format!("{name}.v.{path}"), v.clone(), &[v.len()])?;
        }
        meta[format!("{name}_t")] = json!(self.state.t);
        Ok(())
    }

    fn pull_from(&mut self, name: &str, file: &WeightFile) -> Result<()> {
        let t = file.meta[format!("{name}_t")]
            .as_u64()
            .ok_or_else(|| Error::WeightFormat(format!("optimizer step count `{name}_t` missing")))?;
        let mut state = AdamState {
            t,
            ..AdamState::default()
        };
        for rec in &file.tensors {
            if let Some(rest) = rec.path.strip_prefix(&format!("{name}.")) {
                let (which, path) = rest.split_at(2);
                match which {
                    "m." => state.m.insert(path.to_string(), rec.data.clone()),
                    "v." => state.v.insert(path.to_string(), rec.data.clone()),
                    _ => return Err(Error::WeightFormat(format!("unexpected optimizer entry `{}`", rec.path))),
                };
            }
        }
        self.state = state;
        Ok(())
    }
}

/// A stacked batch at both scales.
#[derive(Debug, Clone)]
pub struct Batch {
    pub fundus: Tensor,
    pub angio: Tensor,
    pub fundus_lo: Tensor,
    pub angio_lo: Tensor,
    pub classes: Vec<usize>,
}

impl Batch {
    pub fn new(pairs: &[FundusAngioPair]) -> Result<Batch> {
        let fundus = to_batch(&pairs.iter().map(|p| &p.fundus).collect::<Vec<_>>())?;
        let angio = to_batch(&pairs.iter().map(|p| &p.angio).collect::<Vec<_>>())?;
        Ok(Batch {
            fundus_lo: downscale_batch(&fundus)?,
            angio_lo: downscale_batch(&angio)?,
            fundus,
            angio,
            classes: pairs.iter().map(|p| p.label.class_index()).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorLosses {
    pub hinge_fine: f64,
    pub hinge_coarse: f64,
    pub cce_fine: f64,
    pub cce_coarse: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLosses {
    pub adv_fine: f64,
    pub adv_coarse: f64,
    pub mse_fine: f64,
    pub mse_coarse: f64,
    pub perc_fine: f64,
    pub perc_coarse: f64,
    pub ef_fine: f64,
    pub ef_coarse: f64,
    pub adv: f64,
    pub mse: f64,
    pub perc: f64,
    pub ef: f64,
    pub total: f64,
}

impl GeneratorLosses {
    /// The weighted sum of the reported parts.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.lambda_adv * self.adv + w.lambda_mse * self.mse + w.lambda_perc * self.perc + w.lambda_ef * self.ef
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub d: Vec<DiscriminatorLosses>,
    pub g: GeneratorLosses,
}

fn finite(name: &str, step: u64, t: &Tensor) -> Result<f64> {
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::Numerical(format!("loss term `{name}` is {v} at step {step}")));
    }
    Ok(v)
}

fn vt_scale<'a>(model: &'a Vtgan, fine: bool) -> &'a VisionTransformer {
    if fine {
        &model.discriminators.fine
    } else {
        &model.discriminators.coarse
    }
}

/// One discriminator update. The generators synthesize in evaluation mode
/// without gradients; only discriminator parameters change.
pub fn discriminator_step(
    model: &Vtgan,
    store: &mut ParameterStore,
    batch: &Batch,
    adam: &mut Adam,
    weights: &LossWeights,
    seed: u64,
    key: u64,
) -> Result<DiscriminatorLosses> {
    let syn = {
        let _guard = no_grad();
        model.generators.synthesize_with_coarse_input(store, &Ctx::eval(), &batch.fundus, &batch.fundus_lo)?
    };
    let targets = one_hot(&batch.classes, 2)?;
    let mut parts = Vec::with_capacity(2);
    for (i, (fine, x, y, fake)) in [
        (true, &batch.fundus, &batch.angio, syn.fine.detach()),
        (false, &batch.fundus_lo, &batch.angio_lo, syn.coarse.detach()),
    ]
    .into_iter()
    .enumerate()
    {
        let vt = vt_scale(model, fine);
        let real = vt.forward(store, &Ctx::train(seed, key * 4 + 2 * i as u64), x, y)?;
        let fake = vt.forward(store, &Ctx::train(seed, key * 4 + 2 * i as u64 + 1), x, &fake)?;
        parts.push((hinge_d(&real.adv_map, &fake.adv_map)?, cce(&targets, &real.class_probs)?));
    }
    let total = parts[0]
        .0
        .add(&parts[1].0)?
        .add(&parts[0].1.add(&parts[1].1)?.scale(weights.lambda_cce))?;
    let losses = DiscriminatorLosses {
        hinge_fine: finite("d_hinge_fine", key, &parts[0].0)?,
        hinge_coarse: finite("d_hinge_coarse", key, &parts[1].0)?,
        cce_fine: finite("d_cce_fine", key, &parts[0].1)?,
        cce_coarse: finite("d_cce_coarse", key, &parts[1].1)?,
        total: finite("d_total", key, &total)?,
    };
    store.zero_grad();
    total.backward()?;
    adam.step(store, &Vtgan::DISCRIMINATOR_PREFIXES)?;
    store.zero_grad();
    Ok(losses)
}

/// One generator update with both discriminators frozen and in evaluation
/// mode.
pub fn generator_step(
    model: &Vtgan,
    store: &mut ParameterStore,
    batch: &Batch,
    adam: &mut Adam,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
    seed: u64,
    key: u64,
) -> Result<GeneratorLosses> {
    for p in Vtgan::DISCRIMINATOR_PREFIXES {
        store.freeze(p);
    }
    let result = generator_step_frozen(model, store, batch, adam, weights, extractor, seed, key);
    for p in Vtgan::DISCRIMINATOR_PREFIXES {
        store.unfreeze(p);
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn generator_step_frozen(
    model: &Vtgan,
    store: &mut ParameterStore,
    batch: &Batch,
    adam: &mut Adam,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
    seed: u64,
    key: u64,
) -> Result<GeneratorLosses> {
    let syn = model
        .generators
        .synthesize_with_coarse_input(store, &Ctx::train(seed, key), &batch.fundus, &batch.fundus_lo)?;
    let eval = Ctx::eval();
    let mut per_scale = Vec::with_capacity(2);
    for (fine, x, y, fake) in [
        (true, &batch.fundus, &batch.angio, &syn.fine),
        (false, &batch.fundus_lo, &batch.angio_lo, &syn.coarse),
    ] {
        let vt = vt_scale(model, fine);
        let real_feats = {
            let _guard = no_grad();
            vt.embedding_features(store, &eval, x, y)?
        };
        let (out, fake_feats) = vt.forward_with_features(store, &eval, x, fake)?;
        per_scale.push([
            hinge_g(&out.adv_map),
            mse(fake, y)?,
            perceptual(fake, y, extractor)?,
            feature_l1(&real_feats, &fake_feats)?,
        ]);
    }
    let sum = |k: usize| per_scale[0][k].add(&per_scale[1][k]);
    let terms = GeneratorTerms {
        adv: Some(sum(0)?),
        mse: Some(sum(1)?),
        perc: Some(sum(2)?),
        ef: Some(sum(3)?),
    };
    let total = total_generator_objective(&terms, weights)?;
    let get = |t: &Option<Tensor>| t.as_ref().expect("all terms set").clone();
    let losses = GeneratorLosses {
        adv_fine: finite("g_adv_fine", key, &per_scale[0][0])?,
        adv_coarse: finite("g_adv_coarse", key, &per_scale[1][0])?,
        mse_fine: finite("g_mse_fine", key, &per_scale[0][1])?,
        mse_coarse: finite("g_mse_coarse", key, &per_scale[1][1])?,
        perc_fine: finite("g_perc_fine", key, &per_scale[0][2])?,
        perc_coarse: finite("g_perc_coarse", key, &per_scale[1][2])?,
        ef_fine: finite("g_ef_fine", key, &per_scale[0][3])?,
        ef_coarse: finite("g_ef_coarse", key, &per_scale[1][3])?,
        adv: finite("g_adv", key, &get(&terms.adv))?,
        mse: finite("g_mse", key, &get(&terms.mse))?,
        perc: finite("g_perc", key, &get(&terms.perc))?,
        ef: finite("g_ef", key, &get(&terms.ef))?,
        total: finite("g_total", key, &total)?,
    };
    store.zero_grad();
    total.backward()?;
    adam.step(store, &Vtgan::GENERATOR_PREFIXES)?;
    store.zero_grad();
    Ok(losses)
}

/// Position within the run; everything needed besides parameters and
/// optimizer moments to continue bitwise.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub epoch: usize,
    pub batch_in_epoch: usize,
    /// Completed batches (generator steps) since the start of the run.
    pub step: u64,
    pub best_mse: Option<f64>,
    pub epoch_mse_sum: f64,
    pub epoch_batches: usize,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Vtgan,
    pub store: ParameterStore,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub state: TrainState,
    extractor: Arc<dyn FeatureExtractor>,
    run_dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
    started: Instant,
}

/// Weight file of the model parameters with the network layout in `meta`.
pub fn model_weight_file(store: &ParameterStore, gan: &GanConfig) -> Result<WeightFile> {
    WeightFile::from_store(store, &[], json!({ "gan": gan }))
}

/// Rebuilds the networks described by a model weight file and loads its
/// values.
pub fn load_model(file: &WeightFile) -> Result<(Vtgan, ParameterStore)> {
    let gan: GanConfig = serde_json::from_value(file.meta["gan"].clone())
        .map_err(|e| Error::WeightFormat(format!("network layout missing from weight file: {e}")))?;
    let (model, mut store) = Vtgan::new(&gan, 0)?;
    file.load_into(&mut store, &[])?;
    Ok((model, store))
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Trainer> {
        let extractor = load_extractor(config.paths.extractor.as_deref())?;
        Trainer::with_extractor(config, extractor)
    }

    pub fn with_extractor(config: RunConfig, extractor: Arc<dyn FeatureExtractor>) -> Result<Trainer> {
        config.validate()?;
        let (model, store) = Vtgan::new(&config.gan, config.seed)?;
        Ok(Trainer {
            adam_g: Adam::new(&config.train),
            adam_d: Adam::new(&config.train),
            config,
            model,
            store,
            state: TrainState::default(),
            extractor,
            run_dir: None,
            log: None,
            started: Instant::now(),
        })
    }

    /// Directs checkpoints and the run log to `dir` (created if needed).
    pub fn set_run_dir(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join(RUN_LOG);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        self.log = Some(BufWriter::new(file));
        self.run_dir = Some(dir.to_path_buf());
        Ok(())
    }

    pub fn extractor(&self) -> &dyn FeatureExtractor {
        self.extractor.as_ref()
    }

    fn write_log(&mut self, value: serde_json::Value) -> Result<()> {
        if let (Some(log), Some(dir)) = (self.log.as_mut(), self.run_dir.as_ref()) {
            let path = dir.join(RUN_LOG);
            writeln!(log, "{value}").and_then(|_| log.flush()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Sample order of an epoch, derived from the seed and the epoch number.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        order
    }

    /// Discriminator steps then one generator step on an explicit batch.
    pub fn train_batch(&mut self, pairs: &[FundusAngioPair]) -> Result<StepLosses> {
        let batch = Batch::new(pairs)?;
        let seed = self.config.seed;
        let weights = self.config.loss;
        let base = self.state.step * (self.config.train.d_steps_per_g_step as u64 + 1);
        let mut d = Vec::with_capacity(self.config.train.d_steps_per_g_step);
        for k in 0..self.config.train.d_steps_per_g_step {
            d.push(discriminator_step(&self.model, &mut self.store, &batch, &mut self.adam_d, &weights, seed, base + k as u64)?);
        }
        let g_key = base + self.config.train.d_steps_per_g_step as u64;
        let g = generator_step(&self.model, &mut self.store, &batch, &mut self.adam_g, &weights, self.extractor.as_ref(), seed, g_key)?;
        Ok(StepLosses { d, g })
    }

    fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.train.batch_size)
    }

    /// Trains on the next batch of `data`, handling epoch boundaries, the
    /// run log and checkpoints.
    pub fn advance(&mut self, data: &dyn PairSet) -> Result<StepLosses> {
        let n = data.len();
        if n == 0 {
            return Err(Error::Data("empty training set".into()));
        }
        let b = self.config.train.batch_size;
        let order = self.epoch_order(n, self.state.epoch);
        let start = self.state.batch_in_epoch * b;
        let idx = &order[start..(start + b).min(n)];
        let pairs = idx.par_iter().map(|&i| data.pair(i)).collect::<Result<Vec<_>>>()?;
        let losses = self.train_batch(&pairs)?;
        self.state.step += 1;
        self.state.batch_in_epoch += 1;
        self.state.epoch_mse_sum += losses.g.mse_fine;
        self.state.epoch_batches += 1;
        self.write_log(json!({
            "event": "step",
            "step": self.state.step,
            "epoch": self.state.epoch,
            "d": losses.d,
            "g": losses.g,
            "wall_time": self.started.elapsed().as_secs_f64(),
        }))?;
        if self.state.batch_in_epoch == self.batches_per_epoch(n) {
            self.finish_epoch()?;
        }
        Ok(losses)
    }

    fn finish_epoch(&mut self) -> Result<()> {
        let mean_mse = self.state.epoch_mse_sum / self.state.epoch_batches.max(1) as f64;
        let improved = self.state.best_mse.is_none_or(|b| mean_mse < b);
        if improved {
            self.state.best_mse = Some(mean_mse);
        }
        self.state.epoch += 1;
        self.state.batch_in_epoch = 0;
        self.state.epoch_mse_sum = 0.0;
        self.state.epoch_batches = 0;
        self.write_log(json!({
            "event": "epoch",
            "epoch": self.state.epoch,
            "mean_mse_fine": mean_mse,
            "wall_time": self.started.elapsed().as_secs_f64(),
        }))?;
        if let Some(dir) = self.run_dir.clone() {
            let every = self.config.train.checkpoint_every;
            self.save_checkpoint(&dir.join("checkpoints").join("latest"))?;
            if every > 0 && self.state.epoch % every == 0 {
                self.save_checkpoint(&dir.join("checkpoints").join(format!("epoch-{:04}", self.state.epoch)))?;
            }
            if improved {
                self.save_checkpoint(&dir.join("checkpoints").join("best"))?;
            }
        }
        Ok(())
    }

    /// Runs until the configured number of epochs is complete.
    pub fn train(&mut self, data: &dyn PairSet) -> Result<()> {
        self.write_log(json!({
            "event": "start",
            "epochs": self.config.train.epochs,
            "batch_size": self.config.train.batch_size,
            "resume_epoch": self.state.epoch,
            "resume_step": self.state.step,
            "pairs": data.len(),
            "config": self.config,
        }))?;
        while self.state.epoch < self.config.train.epochs {
            let losses = self.advance(data)?;
            log::debug!("step {} g_total {:.6}", self.state.step, losses.g.total);
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model_weight_file(&self.store, &self.config.gan)?.save(&dir.join(WEIGHTS_FILE))?;
        let mut opt = ParameterStore::new();
        let mut meta = json!({});
        self.adam_g.push_into("adam_g", &mut opt, &mut meta)?;
        self.adam_d.push_into("adam_d", &mut opt, &mut meta)?;
        WeightFile::from_store(&opt, &[], meta)?.save(&dir.join(OPTIMIZER_FILE))?;
        self.config.save(&dir.join(CONFIG_FILE))?;
        let state_path = dir.join(STATE_FILE);
        std::fs::write(&state_path, serde_json::to_string_pretty(&self.state)?).map_err(|e| Error::io(&state_path, e))
    }

    /// Restores a trainer from a checkpoint directory. The run log and
    /// checkpoints are not redirected; call [`Trainer::set_run_dir`].
    pub fn resume(dir: &Path) -> Result<Trainer> {
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let extractor = load_extractor(config.paths.extractor.as_deref())?;
        Trainer::resume_with_extractor(dir, extractor)
    }

    pub fn resume_with_extractor(dir: &Path, extractor: Arc<dyn FeatureExtractor>) -> Result<Trainer> {
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let mut t = Trainer::with_extractor(config, extractor)?;
        WeightFile::load(&dir.join(WEIGHTS_FILE))?.load_into(&mut t.store, &[])?;
        let opt = WeightFile::load(&dir.join(OPTIMIZER_FILE))?;
        if opt.tensors.iter().any(|r| r.kind != EntryKind::Buffer) {
            return Err(Error::WeightFormat("optimizer file holds parameters".into()));
        }
        t.adam_g.pull_from("adam_g", &opt)?;
        t.adam_d.pull_from("adam_d", &opt)?;
        let state_path = dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        t.state = serde_json::from_str(&text)?;
        Ok(t)
    }
}
