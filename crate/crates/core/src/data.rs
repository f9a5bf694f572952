//! Domain types shared by every stage of the pipeline, together with the
//! three on-disk formats: binary feature files, annotation JSON and
//! detection JSON.
//!
//! All times are normalized to `[0, 1]`; `duration_seconds` is kept only
//! for reporting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class index reserved for background. Foreground classes are `1..=K`.
pub const BACKGROUND: usize = 0;

/// A normalized time interval with `0 <= start < end <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    start: f64,
    end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) {
            return Err(Error::validation("interval", "non-finite bound"));
        }
        if start < 0.0 || end > 1.0 {
            return Err(Error::validation(
                "interval",
                format!("[{start}, {end}] is outside [0, 1]"),
            ));
        }
        if start >= end {
            return Err(Error::validation(
                "interval",
                format!("start {start} is not before end {end}"),
            ));
        }
        Ok(Self { start, end })
    }

    /// Clip raw bounds into `[0, 1]`; `None` when the result is empty.
    pub fn clipped(start: f64, end: f64) -> Option<Self> {
        let start = start.clamp(0.0, 1.0);
        let end = end.clamp(0.0, 1.0);
        (start.is_finite() && end.is_finite() && start < end).then_some(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }

    /// Smallest interval covering both.
    pub fn hull(&self, other: &Interval) -> Interval {
        Interval {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
        }
    }

    /// Length of the background gap between two intervals, zero when they overlap.
    pub fn gap(&self, other: &Interval) -> f64 {
        (other.start - self.end).max(self.start - other.end).max(0.0)
    }
}

/// Temporal intersection-over-union of two valid intervals.
pub fn temporal_iou(a: &Interval, b: &Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionInstance {
    pub interval: Interval,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub duration_seconds: f64,
    pub instances: Vec<ActionInstance>,
}

/// All annotations of a dataset plus its class vocabulary. Class `i` (1-based)
/// is named `classes[i - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub classes: Vec<String>,
    pub videos: Vec<VideoAnnotation>,
}

impl AnnotationSet {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoAnnotation> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    /// Subset restricted to the given ids, in the order given.
    pub fn subset(&self, ids: &[String]) -> Result<AnnotationSet> {
        let by_id: BTreeMap<&str, &VideoAnnotation> =
            self.videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
        let videos = ids
            .iter()
            .map(|id| {
                by_id.get(id.as_str()).map(|v| (*v).clone()).ok_or_else(|| {
                    Error::validation("annotation subset", format!("unknown video {id:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AnnotationSet {
            classes: self.classes.clone(),
            videos,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        for video in &self.videos {
            if video.video_id.is_empty() {
                return Err(Error::validation("annotation", "empty video_id"));
            }
            if !(video.duration_seconds.is_finite() && video.duration_seconds > 0.0) {
                return Err(Error::validation(
                    "annotation",
                    format!(
                        "video {:?} has non-positive duration {}",
                        video.video_id, video.duration_seconds
                    ),
                ));
            }
            for (index, inst) in video.instances.iter().enumerate() {
                if inst.label == BACKGROUND || inst.label > k {
                    return Err(Error::Annotation {
                        video_id: video.video_id.clone(),
                        index,
                        reason: format!("label {} outside 1..={k}", inst.label),
                    });
                }
            }
        }
        Ok(())
    }
}

/// One video's temporal features, `length x dim`, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub length: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, length: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if length < 2 || dim == 0 {
            return Err(Error::validation(
                "feature sequence",
                format!("need length >= 2 and dim >= 1, got {length}x{dim}"),
            ));
        }
        if values.len() != length * dim {
            return Err(Error::validation(
                "feature sequence",
                format!("{} values for a {length}x{dim} sequence", values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                "feature sequence",
                format!("non-finite value at index {i}"),
            ));
        }
        Ok(Self {
            video_id: video_id.into(),
            length,
            dim,
            values,
        })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub interval: Interval,
    pub label: usize,
    pub score: f64,
}

/// Detections keyed by video id. Each list is sorted by descending score.
pub type DetectionSet = BTreeMap<String, Vec<Detection>>;

// ---------------------------------------------------------------------------
// Feature files

const FEATURE_MAGIC: &[u8; 4] = b"BRNF";
const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER: usize = 16;

pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER + 4 * seq.values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.length as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim as u32).to_le_bytes());
    for v in &seq.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], video_id: &str, path: &Path) -> Result<FeatureSequence> {
    let fmt = |field: &'static str, reason: String| Error::Format {
        path: path.to_path_buf(),
        field,
        reason,
    };
    if bytes.len() < FEATURE_HEADER {
        return Err(fmt(
            "header",
            format!("{} bytes, need at least {FEATURE_HEADER}", bytes.len()),
        ));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(fmt("magic", format!("expected \"BRNF\", found {:?}", &bytes[0..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(fmt("version", format!("expected {FEATURE_VERSION}, found {version}")));
    }
    let length = word(8) as usize;
    let dim = word(12) as usize;
    if length < 2 || dim == 0 {
        return Err(fmt("dimension", format!("L={length}, D={dim}")));
    }
    let expected = length * dim * 4;
    let payload = &bytes[FEATURE_HEADER..];
    if payload.len() < expected {
        return Err(fmt(
            "payload",
            format!(
                "truncated: L={length}, D={dim} needs {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(fmt(
            "payload",
            format!("{} trailing bytes", payload.len() - expected),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(fmt("payload", format!("non-finite value at index {i}")));
    }
    Ok(FeatureSequence {
        video_id: video_id.to_string(),
        length,
        dim,
        values,
    })
}

pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    fs::write(path, encode_features(seq)).map_err(|e| Error::io(path, e))
}

/// Reads a feature file; the video id is the file stem.
pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let video_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    decode_features(&bytes, &video_id, path)
}

pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.brnf"))
}

// ---------------------------------------------------------------------------
// Annotation and detection JSON

#[derive(Serialize, Deserialize)]
struct InstanceDoc {
    start: f64,
    end: f64,
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct VideoDoc {
    video_id: String,
    duration_seconds: f64,
    instances: Vec<InstanceDoc>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationDoc {
    classes: Vec<String>,
    videos: Vec<VideoDoc>,
}

#[derive(Serialize, Deserialize)]
struct DetectionDoc {
    start: f64,
    end: f64,
    label: usize,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct DetectionFileDoc {
    results: BTreeMap<String, Vec<DetectionDoc>>,
}

pub fn annotations_to_json(set: &AnnotationSet) -> String {
    let doc = AnnotationDoc {
        classes: set.classes.clone(),
        videos: set
            .videos
            .iter()
            .map(|v| VideoDoc {
                video_id: v.video_id.clone(),
                duration_seconds: v.duration_seconds,
                instances: v
                    .instances
                    .iter()
                    .map(|i| InstanceDoc {
                        start: i.interval.start(),
                        end: i.interval.end(),
                        label: i.label,
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("annotation document serializes")
}

pub fn annotations_from_json(text: &str) -> Result<AnnotationSet> {
    let doc: AnnotationDoc = serde_json::from_str(text)?;
    let mut videos = Vec::with_capacity(doc.videos.len());
    for v in doc.videos {
        let instances = v
            .instances
            .iter()
            .enumerate()
            .map(|(index, i)| {
                let interval = Interval::new(i.start, i.end).map_err(|e| Error::Annotation {
                    video_id: v.video_id.clone(),
                    index,
                    reason: e.to_string(),
                })?;
                Ok(ActionInstance {
                    interval,
                    label: i.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        videos.push(VideoAnnotation {
            video_id: v.video_id,
            duration_seconds: v.duration_seconds,
            instances,
        });
    }
    let set = AnnotationSet {
        classes: doc.classes,
        videos,
    };
    set.validate()?;
    Ok(set)
}

pub fn write_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    fs::write(path, annotations_to_json(set)).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    annotations_from_json(&text)
}

pub fn detections_to_json(set: &DetectionSet) -> String {
    let results = set
        .iter()
        .map(|(id, dets)| {
            let mut sorted: Vec<&Detection> = dets.iter().collect();
            sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
            let docs = sorted
                .into_iter()
                .map(|d| DetectionDoc {
                    start: d.interval.start(),
                    end: d.interval.end(),
                    label: d.label,
                    score: d.score,
                })
                .collect();
            (id.clone(), docs)
        })
        .collect();
    serde_json::to_string_pretty(&DetectionFileDoc { results }).expect("detections serialize")
}

pub fn detections_from_json(text: &str) -> Result<DetectionSet> {
    let doc: DetectionFileDoc = serde_json::from_str(text)?;
    let mut out = DetectionSet::new();
    for (video_id, docs) in doc.results {
        let mut dets = Vec::with_capacity(docs.len());
        for (index, d) in docs.into_iter().enumerate() {
            let interval = Interval::new(d.start, d.end).map_err(|e| Error::Annotation {
                video_id: video_id.clone(),
                index,
                reason: e.to_string(),
            })?;
            if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
                return Err(Error::Annotation {
                    video_id: video_id.clone(),
                    index,
                    reason: format!("score {} outside [0, 1]", d.score),
                });
            }
            if d.label == BACKGROUND {
                return Err(Error::Annotation {
                    video_id: video_id.clone(),
                    index,
                    reason: "detection labelled as background".into(),
                });
            }
            dets.push(Detection {
                video_id: video_id.clone(),
                interval,
                label: d.label,
                score: d.score,
            });
        }
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.insert(video_id, dets);
    }
    Ok(out)
}

pub fn write_detections(set: &DetectionSet, path: &Path) -> Result<()> {
    fs::write(path, detections_to_json(set)).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<DetectionSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    detections_from_json(&text)
}

/// Ground truth re-expressed as score-1 detections.
pub fn annotations_as_detections(set: &AnnotationSet) -> DetectionSet {
    set.videos
        .iter()
        .map(|v| {
            let dets = v
                .instances
                .iter()
                .map(|i| Detection {
                    video_id: v.video_id.clone(),
                    interval: i.interval,
                    label: i.label,
                    score: 1.0,
                })
                .collect();
            (v.video_id.clone(), dets)
        })
        .collect()
}
