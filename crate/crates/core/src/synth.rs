//! Synthetic benchmark: noisy feature sequences with embedded class
//! prototypes, where a configured share of videos holds closely spaced pairs
//! of short same-class actions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    annotations_to_json, feature_path, read_annotations, read_features, write_features, ActionInstance, AnnotationSet,
    FeatureSequence, Interval, VideoAnnotation,
};
use crate::error::{Error, Result};

/// RNG stream for class prototypes.
const PROTOTYPE_STREAM: u64 = u64::MAX;
/// RNG stream choosing which videos carry a close pair.
const VBP_STREAM: u64 = u64::MAX - 1;
/// RNG stream for the train/val split.
const SPLIT_STREAM: u64 = u64::MAX - 2;
/// Share of each instance's length used by each envelope ramp.
const RAMP: f64 = 0.1;
/// Noise redraws allowed before giving up on the prototype-separation check.
const NOISE_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_videos: usize,
    pub feature_dim: usize,
    pub sequence_length: usize,
    /// Normalized instance length range (log-uniform).
    pub min_length: f64,
    pub max_length: f64,
    /// Upper length of each member of a close pair.
    pub short_max_length: f64,
    /// Boundary gap range inside a close pair. All other gaps exceed `max_gap`.
    pub min_gap: f64,
    pub max_gap: f64,
    /// Instances per video, before adding the close pair.
    pub min_instances: usize,
    pub max_instances: usize,
    pub vbp_pair_fraction: f64,
    pub noise_std: f64,
    pub amplitude: f64,
    pub val_fraction: f64,
    pub frames_per_second: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            num_videos: 250,
            feature_dim: 16,
            sequence_length: 256,
            min_length: 0.02,
            max_length: 0.5,
            short_max_length: 0.08,
            min_gap: 0.008,
            max_gap: 0.03,
            min_instances: 1,
            max_instances: 3,
            vbp_pair_fraction: 0.5,
            noise_std: 0.3,
            amplitude: 1.0,
            val_fraction: 0.2,
            frames_per_second: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::validation("synth config", reason));
        if self.num_classes == 0 || self.feature_dim == 0 || self.sequence_length == 0 {
            return bad("num_classes, feature_dim and sequence_length must be positive".into());
        }
        if !(0.0 < self.min_length && self.min_length < self.max_length && self.max_length <= 1.0) {
            return bad(format!("need 0 < min_length < max_length <= 1, got {} / {}", self.min_length, self.max_length));
        }
        if !(self.min_length <= self.short_max_length && self.short_max_length <= self.max_length) {
            return bad("short_max_length must lie in [min_length, max_length]".into());
        }
        if !(0.0 <= self.min_gap && self.min_gap <= self.max_gap) {
            return bad(format!("need 0 <= min_gap <= max_gap, got {} / {}", self.min_gap, self.max_gap));
        }
        if self.min_instances > self.max_instances {
            return bad("min_instances > max_instances".into());
        }
        if !(0.0..=1.0).contains(&self.vbp_pair_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("fractions must lie in [0, 1]".into());
        }
        if !(self.noise_std >= 0.0 && self.amplitude > 0.0 && self.frames_per_second > 0.0) {
            return bad("noise_std must be >= 0, amplitude and frames_per_second > 0".into());
        }
        Ok(())
    }

    /// Number of videos holding a close pair.
    pub fn num_vbp_videos(&self) -> usize {
        (self.vbp_pair_fraction * self.num_videos as f64).round() as usize
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

pub fn video_id(index: usize) -> String {
    format!("synth_{index:04}")
}

/// `K` distinct unit vectors in `R^D`, orthonormal when `K <= D`.
pub fn make_class_prototypes(num_classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PROTOTYPE_STREAM);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while out.len() < num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if out.len() < dim {
            for p in &out {
                let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let distinct = out.iter().all(|p| p.iter().zip(&v).any(|(a, b)| (a - b).abs() > 1e-9));
        if distinct {
            out.push(v);
        }
    }
    out
}

/// Raised-cosine envelope at relative position `u` inside an instance.
pub fn envelope(u: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) {
        0.0
    } else if u < RAMP {
        0.5 * (1.0 - (std::f64::consts::PI * u / RAMP).cos())
    } else if u > 1.0 - RAMP {
        0.5 * (1.0 - (std::f64::consts::PI * (1.0 - u) / RAMP).cos())
    } else {
        1.0
    }
}

/// Blocks of instances placed as a unit: a single action or a close pair.
struct Block {
    parts: Vec<(f64, usize)>,
    gap: f64,
}

impl Block {
    fn length(&self) -> f64 {
        self.parts.iter().map(|p| p.0).sum::<f64>() + self.gap * (self.parts.len() - 1) as f64
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

/// Draw instance layout for one video.
fn layout<R: Rng>(config: &SynthConfig, vbp: bool, rng: &mut R, index: usize) -> Result<Vec<ActionInstance>> {
    let k = config.num_classes;
    let mut blocks = Vec::new();
    if vbp {
        let label = rng.random_range(1..=k);
        let a = log_uniform(rng, config.min_length, config.short_max_length);
        let b = log_uniform(rng, config.min_length, config.short_max_length);
        let gap = rng.random_range(config.min_gap..=config.max_gap);
        blocks.push(Block { parts: vec![(a, label), (b, label)], gap });
    }
    let extra = rng.random_range(config.min_instances..=config.max_instances);
    let extra = if vbp { extra.saturating_sub(1) } else { extra };
    for _ in 0..extra {
        let len = log_uniform(rng, config.min_length, config.max_length);
        blocks.push(Block { parts: vec![(len, rng.random_range(1..=k))], gap: 0.0 });
    }
    // Separation between blocks strictly above max_gap.
    let sep = config.max_gap + 1.0 / config.sequence_length as f64;
    loop {
        let used: f64 = blocks.iter().map(Block::length).sum::<f64>() + sep * blocks.len().saturating_sub(1) as f64;
        if used < 1.0 {
            break;
        }
        let drop = blocks.len() - 1;
        if drop == 0 || (vbp && blocks.len() == 1) {
            return Err(Error::Generation { video: index, reason: format!("instances need {used:.3} of the video") });
        }
        blocks.remove(drop);
    }
    if blocks.is_empty() {
        return Ok(Vec::new());
    }
    blocks.shuffle(rng);
    let used: f64 = blocks.iter().map(Block::length).sum::<f64>() + sep * (blocks.len() - 1) as f64;
    let free = 1.0 - used;
    let mut cuts: Vec<f64> = (0..blocks.len()).map(|_| rng.random_range(0.0..=free)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut prev_cut = 0.0;
    let mut cursor = 0.0;
    for (i, (block, cut)) in blocks.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut;
        prev_cut = *cut;
        if i > 0 {
            cursor += sep;
        }
        for (j, &(len, label)) in block.parts.iter().enumerate() {
            if j > 0 {
                cursor += block.gap;
            }
            let end = (cursor + len).min(1.0);
            let interval = Interval::new(cursor, end).map_err(|e| Error::Generation { video: index, reason: e.to_string() })?;
            out.push(ActionInstance { interval, label });
            cursor = end;
        }
    }
    Ok(out)
}

fn render<R: Rng>(
    config: &SynthConfig,
    prototypes: &[Vec<f64>],
    instances: &[ActionInstance],
    rng: &mut R,
) -> Vec<f32> {
    let (l, d) = (config.sequence_length, config.feature_dim);
    let noise = Normal::new(0.0, config.noise_std).expect("validated noise std");
    let mut values: Vec<f64> = (0..l * d).map(|_| noise.sample(rng)).collect();
    for inst in instances {
        let (s, e) = (inst.interval.start(), inst.interval.end());
        let proto = &prototypes[inst.label - 1];
        for t in 0..l {
            let c = (t as f64 + 0.5) / l as f64;
            let w = envelope((c - s) / (e - s));
            if w > 0.0 {
                for (x, p) in values[t * d..(t + 1) * d].iter_mut().zip(proto) {
                    *x += config.amplitude * w * p;
                }
            }
        }
    }
    values.into_iter().map(|v| v as f32).collect()
}

/// Mean feature over the frames of an instance.
fn mean_inside(seq: &FeatureSequence, interval: &Interval) -> Option<Vec<f64>> {
    let l = seq.length;
    let frames: Vec<usize> = (0..l).filter(|&t| interval.contains((t as f64 + 0.5) / l as f64)).collect();
    if frames.is_empty() {
        return None;
    }
    let mut m = vec![0.0; seq.dim];
    for &t in &frames {
        m.iter_mut().zip(seq.row(t)).for_each(|(a, &b)| *a += b as f64);
    }
    m.iter_mut().for_each(|a| *a /= frames.len() as f64);
    Some(m)
}

/// Every instance's mean feature is closer (by dot product) to its own
/// prototype than to any other.
pub fn prototypes_separated(seq: &FeatureSequence, ann: &VideoAnnotation, prototypes: &[Vec<f64>]) -> bool {
    ann.instances.iter().all(|inst| {
        let Some(m) = mean_inside(seq, &inst.interval) else { return true };
        let dot = |p: &Vec<f64>| p.iter().zip(&m).map(|(a, b)| a * b).sum::<f64>();
        let own = dot(&prototypes[inst.label - 1]);
        prototypes.iter().enumerate().all(|(c, p)| c == inst.label - 1 || dot(p) < own)
    })
}

/// Generate video `index`. Its RNG stream depends only on `(seed, index)`.
pub fn generate_video(
    config: &SynthConfig,
    prototypes: &[Vec<f64>],
    index: usize,
    vbp: bool,
) -> Result<(FeatureSequence, VideoAnnotation)> {
    let mut rng = config.rng(index as u64);
    let instances = layout(config, vbp, &mut rng, index)?;
    let id = video_id(index);
    let ann = VideoAnnotation {
        video_id: id.clone(),
        duration_seconds: config.sequence_length as f64 / config.frames_per_second,
        instances,
    };
    for _ in 0..NOISE_ATTEMPTS {
        let values = render(config, prototypes, &ann.instances, &mut rng);
        let seq = FeatureSequence::new(id.clone(), config.sequence_length, config.feature_dim, values)?;
        if prototypes_separated(&seq, &ann, prototypes) {
            return Ok((seq, ann));
        }
    }
    Err(Error::Generation { video: index, reason: "noise too strong to separate class prototypes".into() })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub annotations: AnnotationSet,
    pub features: Vec<FeatureSequence>,
    pub split: Split,
}

impl Dataset {
    pub fn feature(&self, video_id: &str) -> Option<&FeatureSequence> {
        self.features.iter().find(|f| f.video_id == video_id)
    }

    /// Annotation and features of every video in `ids`, in order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<(&VideoAnnotation, &FeatureSequence)>> {
        ids.iter()
            .map(|id| {
                let ann = self
                    .annotations
                    .get(id)
                    .ok_or_else(|| Error::validation("dataset", format!("no annotation for {id}")))?;
                let feat = self
                    .feature(id)
                    .ok_or_else(|| Error::validation("dataset", format!("no features for {id}")))?;
                Ok((ann, feat))
            })
            .collect()
    }
}

/// Indices of the videos that carry a close pair.
pub fn vbp_indices(config: &SynthConfig) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..config.num_videos).collect();
    idx.shuffle(&mut config.rng(VBP_STREAM));
    let mut chosen = idx[..config.num_vbp_videos()].to_vec();
    chosen.sort_unstable();
    chosen
}

pub fn make_split(config: &SynthConfig) -> Split {
    let mut ids: Vec<String> = (0..config.num_videos).map(video_id).collect();
    ids.shuffle(&mut config.rng(SPLIT_STREAM));
    let n_val = (config.val_fraction * config.num_videos as f64).round() as usize;
    let mut val = ids[..n_val].to_vec();
    let mut train = ids[n_val..].to_vec();
    val.sort();
    train.sort();
    Split { train, val }
}

/// Generate the whole dataset in memory.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let prototypes = make_class_prototypes(config.num_classes, config.feature_dim, config.seed);
    let mut vbp = vec![false; config.num_videos];
    for i in vbp_indices(config) {
        vbp[i] = true;
    }
    let videos: Vec<(FeatureSequence, VideoAnnotation)> = (0..config.num_videos)
        .into_par_iter()
        .map(|i| generate_video(config, &prototypes, i, vbp[i]))
        .collect::<Result<_>>()?;
    let (features, anns): (Vec<_>, Vec<_>) = videos.into_iter().unzip();
    let annotations = AnnotationSet { classes: (1..=config.num_classes).map(|c| format!("class_{c}")).collect(), videos: anns };
    annotations.validate()?;
    Ok(Dataset { annotations, features, split: make_split(config) })
}

/// Locations of a dataset on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub root: PathBuf,
    pub features: PathBuf,
    pub annotations: PathBuf,
    pub split: PathBuf,
    pub config: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            features: root.join("features"),
            annotations: root.join("annotations.json"),
            split: root.join("split.json"),
            config: root.join("synth_config.json"),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generate and write feature files, annotations, split manifest and config.
pub fn generate_dataset(config: &SynthConfig, out: &Path) -> Result<DatasetPaths> {
    let data = generate(config)?;
    let paths = DatasetPaths::new(out);
    fs::create_dir_all(&paths.features).map_err(|e| Error::io(&paths.features, e))?;
    for seq in &data.features {
        write_features(seq, &feature_path(&paths.features, &seq.video_id))?;
    }
    write_text(&paths.annotations, &annotations_to_json(&data.annotations))?;
    write_text(&paths.split, &serde_json::to_string_pretty(&data.split)?)?;
    write_text(&paths.config, &serde_json::to_string_pretty(config)?)?;
    Ok(paths)
}

/// Read a dataset written by [`generate_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let paths = DatasetPaths::new(root);
    let annotations = read_annotations(&paths.annotations)?;
    let split_text = fs::read_to_string(&paths.split).map_err(|e| Error::io(&paths.split, e))?;
    let split: Split = serde_json::from_str(&split_text)?;
    let features = annotations
        .videos
        .iter()
        .map(|v| read_features(&feature_path(&paths.features, &v.video_id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { annotations, features, split })
}
