//! Deterministic training: schedule, augmentation, Adam, the epoch loop and
//! experiment helpers.

mod checkpoint;
mod gradcheck;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use gradcheck::{grad_check, GradCheckReport, GroupError, GRAD_CHECK_STEP};

use crate::data::{ActionInstance, DetectionSet, FeatureSequence, Interval, VideoAnnotation};
use crate::error::{Error, Result};
use crate::heads::AssignMode;
use crate::inference::{detect, InferenceConfig, Preset};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{loss_and_grad, Ablation, LossBreakdown, LossConfig, Model, ModelConfig, ModelPreset};
use crate::nn::{Grads, ParamStore};
use crate::synth::Dataset;

/// RNG stream used for shuffling and cropping.
const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    /// Regression loss weight.
    pub lambda: f64,
    /// Focal-loss exponent.
    pub alpha: f64,
    pub seed: u64,
    /// Temporal crop length in frames; `None` trains on full sequences.
    pub crop_window: Option<usize>,
    pub model: ModelPreset,
    #[serde(default)]
    pub ablations: Vec<Ablation>,
    pub hidden_dim: usize,
    pub num_levels: usize,
    #[serde(default)]
    pub assign: AssignMode,
    /// Save a checkpoint every this many epochs (0 disables periodic saves).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Laptop-scale schedule for the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            base_lr: 3e-3,
            milestones: vec![40, 50],
            decay: 0.1,
            lambda: 1.0,
            alpha: 4.0,
            seed: 0,
            crop_window: Some(256),
            model: ModelPreset::Brn,
            ablations: Vec::new(),
            hidden_dim: 16,
            num_levels: 5,
            assign: AssignMode::Dynamic,
            checkpoint_every: 0,
        }
    }

    /// Full-scale ActivityNet-style schedule.
    pub fn reference() -> Self {
        Self { epochs: 120, milestones: vec![80, 100], hidden_dim: 256, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::validation("train config", r));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing".into());
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad("milestones must be < epochs".into());
        }
        if !(self.base_lr > 0.0 && self.lambda >= 0.0 && self.alpha >= 0.0) {
            return bad("need base_lr > 0, lambda >= 0, alpha >= 0".into());
        }
        if self.crop_window == Some(0) {
            return bad("crop_window must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        let mut cfg = ModelConfig::preset(self.model, input_dim, num_classes, self.hidden_dim);
        cfg.num_levels = self.num_levels;
        for &a in &self.ablations {
            cfg = cfg.with_ablation(a);
        }
        cfg
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { alpha: self.alpha, lambda: self.lambda, assign: self.assign }
    }
}

/// Base rate times `decay` for every milestone reached.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let passed = config.milestones.iter().filter(|&&m| epoch >= m).count();
    config.base_lr * config.decay.powi(passed as i32)
}

/// Random contiguous window of `window` frames. Instances are clipped to the
/// window and kept if at least half of their length survives.
pub fn random_crop<R: Rng>(
    features: &FeatureSequence,
    annotation: &VideoAnnotation,
    window: usize,
    rng: &mut R,
) -> Result<(FeatureSequence, VideoAnnotation)> {
    let l = features.length;
    if window == 0 || window > l {
        return Err(Error::validation("random_crop", format!("window {window} for a sequence of {l}")));
    }
    let start = rng.random_range(0..=l - window);
    crop_at(features, annotation, start, window)
}

/// Deterministic crop starting at frame `start`.
pub fn crop_at(
    features: &FeatureSequence,
    annotation: &VideoAnnotation,
    start: usize,
    window: usize,
) -> Result<(FeatureSequence, VideoAnnotation)> {
    let l = features.length as f64;
    let (ws, we) = (start as f64 / l, (start + window) as f64 / l);
    let values = features.values[start * features.dim..(start + window) * features.dim].to_vec();
    let seq = FeatureSequence::new(features.video_id.clone(), window, features.dim, values)?;
    let instances = annotation
        .instances
        .iter()
        .filter_map(|inst| {
            let (s, e) = (inst.interval.start().max(ws), inst.interval.end().min(we));
            if e <= s || (e - s) < 0.5 * inst.interval.length() {
                return None;
            }
            let scale = we - ws;
            let interval = Interval::clipped((s - ws) / scale, (e - ws) / scale)?;
            Some(ActionInstance { interval, label: inst.label })
        })
        .collect();
    let ann = VideoAnnotation {
        video_id: annotation.video_id.clone(),
        duration_seconds: annotation.duration_seconds * (we - ws),
        instances,
    };
    Ok((seq, ann))
}

/// Adam without weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((entry, g), m), v) in params.entries_mut().iter_mut().zip(grads.arrays()).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in entry.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_reg: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,l_cls,l_reg,total,lr\n");
    for e in log {
        out.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.l_cls, e.l_reg, e.total, e.lr));
    }
    out
}

pub fn parse_loss_log(text: &str) -> Result<Vec<EpochLog>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::validation("loss log", format!("malformed row `{line}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad())?,
                l_cls: num(f[1])?,
                l_reg: num(f[2])?,
                total: num(f[3])?,
                lr: num(f[4])?,
            })
        })
        .collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub log: Vec<EpochLog>,
    pub rng: RngState,
}

fn video_grads(
    model: &Model,
    params: &ParamStore<f32>,
    seq: &FeatureSequence,
    ann: &VideoAnnotation,
    loss: &LossConfig,
) -> Result<(LossBreakdown, Grads<f32>)> {
    let x = model.input::<f32>(seq)?;
    let mut grads = Grads::zeros_like(params);
    let (l, _) = loss_and_grad(model, params, &x, ann, loss, Some(&mut grads))?;
    Ok((l, grads))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train on `dataset.split.train`. With `out`, the loss log, final and
/// periodic checkpoints are written there.
pub fn train(dataset: &Dataset, config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let first = dataset
        .features
        .first()
        .ok_or_else(|| Error::validation("dataset", "no videos"))?;
    let model_cfg = config.model_config(first.dim, dataset.annotations.num_classes());
    let (model, mut params) = Model::new::<f32>(model_cfg, config.seed)?;
    let train_set = dataset.select(&dataset.split.train)?;
    if train_set.is_empty() {
        return Err(Error::validation("dataset", "empty training split"));
    }
    let loss_cfg = config.loss();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut adam = Adam::new(&params);
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let samples: Vec<(FeatureSequence, VideoAnnotation)> = batch
                .iter()
                .map(|&i| {
                    let (ann, seq) = train_set[i];
                    match config.crop_window {
                        Some(w) if w < seq.length => random_crop(seq, ann, w, &mut rng),
                        _ => Ok((seq.clone(), ann.clone())),
                    }
                })
                .collect::<Result<_>>()?;
            let results: Vec<(LossBreakdown, Grads<f32>)> = samples
                .par_iter()
                .map(|(seq, ann)| video_grads(&model, &params, seq, ann, &loss_cfg))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::NonFinite { tensor, .. } => Error::NonFinite { tensor, epoch, step },
                    other => other,
                })?;
            let mut grads = Grads::zeros_like(&params);
            for (l, g) in &results {
                if !l.total.is_finite() {
                    return Err(Error::NonFinite { tensor: "loss".into(), epoch, step });
                }
                sums[0] += l.l_cls;
                sums[1] += l.l_reg;
                sums[2] += l.total;
                grads.add_assign(g);
            }
            grads.scale(1.0 / results.len() as f32);
            if let Some(i) = grads.first_non_finite() {
                let name = params.entries()[i].name.clone();
                return Err(Error::NonFinite { tensor: format!("gradient of {name}"), epoch, step });
            }
            adam.update(&mut params, &grads, lr);
        }
        let n = train_set.len() as f64;
        let entry = EpochLog { epoch, l_cls: sums[0] / n, l_reg: sums[1] / n, total: sums[2] / n, lr };
        log::info!("epoch {epoch}: cls {:.5} reg {:.5} total {:.5} lr {lr:e}", entry.l_cls, entry.l_reg, entry.total);
        log.push(entry);
        if let Some(dir) = out {
            write_file(&dir.join("loss_log.csv"), &loss_log_csv(&log))?;
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 && epoch + 1 < config.epochs {
                let ck = Checkpoint::new(&model, &params, Some(config.clone()), epoch + 1, RngState::capture(&rng, config.seed));
                save_checkpoint(&ck, &dir.join(format!("checkpoint_epoch{:04}", epoch + 1)))?;
            }
        }
    }
    let rng_state = RngState::capture(&rng, config.seed);
    if let Some(dir) = out {
        let ck = Checkpoint::new(&model, &params, Some(config.clone()), config.epochs, rng_state.clone());
        save_checkpoint(&ck, &dir.join("checkpoint"))?;
    }
    Ok(TrainOutcome { model, params, log, rng: rng_state })
}

/// Run inference on every video in `ids`.
pub fn detect_videos(
    model: &Model,
    params: &ParamStore<f32>,
    dataset: &Dataset,
    ids: &[String],
    config: &InferenceConfig,
) -> Result<DetectionSet> {
    config.validate()?;
    let per_video: Vec<(String, Vec<crate::data::Detection>)> = dataset
        .select(ids)?
        .par_iter()
        .map(|(ann, seq)| {
            let x = model.input::<f32>(seq)?;
            let out = model.predict(params, &x)?;
            Ok((ann.video_id.clone(), detect(&out, &ann.video_id, config)))
        })
        .collect::<Result<_>>()?;
    Ok(per_video.into_iter().collect())
}

/// Result of training and evaluating one configuration.
pub struct ExperimentResult {
    pub outcome: TrainOutcome,
    pub detections: DetectionSet,
    pub report: EvalReport,
}

/// Train, detect on the validation split and evaluate.
pub fn run_experiment(dataset: &Dataset, config: &TrainConfig, preset: Preset) -> Result<ExperimentResult> {
    let outcome = train(dataset, config, None)?;
    let detections = detect_videos(
        &outcome.model,
        &outcome.params,
        dataset,
        &dataset.split.val,
        &InferenceConfig::for_preset(preset),
    )?;
    let val = dataset.annotations.subset(&dataset.split.val)?;
    let report = evaluate(&detections, &val, preset)?;
    Ok(ExperimentResult { outcome, detections, report })
}

/// Write a text file, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
