//! From head outputs to ranked detections: scoring, filtering, NMS, top-k.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{temporal_iou, Detection};
use crate::error::{Error, Result};
use crate::heads::{anchor, decode_interval, sigmoid, HeadOutputs};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// ActivityNet-style protocol.
    Anet,
    /// THUMOS-style protocol.
    Thumos,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anet" => Ok(Self::Anet),
            "thumos" => Ok(Self::Thumos),
            other => Err(Error::validation("preset", format!("unknown preset `{other}`"))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Anet => "anet",
            Self::Thumos => "thumos",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub nms_iou_threshold: f64,
    pub pre_nms_topk: usize,
    pub final_topk: usize,
    pub min_score: f64,
    /// Suppress only within the same label instead of across labels.
    #[serde(default)]
    pub per_class_nms: bool,
}

impl InferenceConfig {
    pub fn anet() -> Self {
        Self { nms_iou_threshold: 0.65, pre_nms_topk: 2000, final_topk: 100, min_score: 1e-4, per_class_nms: false }
    }

    pub fn thumos() -> Self {
        Self { nms_iou_threshold: 0.5, final_topk: 200, ..Self::anet() }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Anet => Self::anet(),
            Preset::Thumos => Self::thumos(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("nms_iou_threshold", self.nms_iou_threshold), ("min_score", self.min_score)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation("inference config", format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.pre_nms_topk == 0 || self.final_topk == 0 {
            return Err(Error::validation("inference config", "top-k must be >= 1"));
        }
        Ok(())
    }
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self::anet()
    }
}

/// Descending score, then earlier start, earlier end, smaller label.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.interval.start().total_cmp(&b.interval.start()))
        .then(a.interval.end().total_cmp(&b.interval.end()))
        .then(a.label.cmp(&b.label))
}

/// One candidate per position: best foreground class and its probability.
pub fn decode_detections<F: Real>(outputs: &HeadOutputs<F>, video_id: &str, config: &InferenceConfig) -> Vec<Detection> {
    let time = outputs.time();
    let logits = outputs.class_logits.data();
    let reg = outputs.reg_raw.data();
    let mut dets = Vec::new();
    for (row, z) in logits.rows().into_iter().enumerate() {
        let max = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
        let sum: f64 = z.iter().map(|v| (v.f64() - max).exp()).sum();
        let (label, best) = z
            .iter()
            .enumerate()
            .skip(1)
            .fold((0, f64::NEG_INFINITY), |acc, (c, v)| if v.f64() > acc.1 { (c, v.f64()) } else { acc });
        let score = (best - max).exp() / sum;
        if !(score >= config.min_score) {
            continue;
        }
        let a = anchor(row % time, time);
        let Some(interval) = decode_interval(a, sigmoid(reg[[row, 0]].f64()), sigmoid(reg[[row, 1]].f64())) else {
            continue;
        };
        dets.push(Detection { video_id: video_id.to_string(), interval, label, score });
    }
    dets.sort_by(rank_order);
    dets.truncate(config.pre_nms_topk);
    dets
}

/// Greedy NMS: keep the best remaining detection, drop everything overlapping
/// it by more than `iou_threshold`, repeat.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| temporal_iou(&k.interval, &d.interval) <= iou_threshold) {
            kept.push(d.clone());
        }
    }
    kept
}

/// NMS applied separately within every label.
pub fn nms_per_class(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut labels: Vec<usize> = dets.iter().map(|d| d.label).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut out: Vec<Detection> = labels
        .into_iter()
        .flat_map(|l| {
            let group: Vec<Detection> = dets.iter().filter(|d| d.label == l).cloned().collect();
            nms(&group, iou_threshold)
        })
        .collect();
    out.sort_by(rank_order);
    out
}

/// Full post-processing for one video.
pub fn detect<F: Real>(outputs: &HeadOutputs<F>, video_id: &str, config: &InferenceConfig) -> Vec<Detection> {
    let candidates = decode_detections(outputs, video_id, config);
    let mut kept = if config.per_class_nms {
        nms_per_class(&candidates, config.nms_iou_threshold)
    } else {
        nms(&candidates, config.nms_iou_threshold)
    };
    kept.truncate(config.final_topk);
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interval;
    use crate::nn::ScaleTimeTensor;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn det(s: f64, e: f64, score: f64) -> Detection {
        Detection { video_id: "v".into(), interval: Interval::new(s, e).unwrap(), label: 1, score }
    }

    fn outputs(logits: Vec<f64>, reg: Vec<f64>, scales: usize, time: usize, k: usize) -> HeadOutputs<f64> {
        HeadOutputs {
            class_logits: ScaleTimeTensor::new(scales, time, Array2::from_shape_vec((scales * time, k + 1), logits).unwrap()).unwrap(),
            reg_raw: ScaleTimeTensor::new(scales, time, Array2::from_shape_vec((scales * time, 2), reg).unwrap()).unwrap(),
        }
    }

    #[test]
    fn presets() {
        let a = InferenceConfig::anet();
        assert_eq!((a.nms_iou_threshold, a.final_topk), (0.65, 100));
        let t = InferenceConfig::thumos();
        assert_eq!((t.nms_iou_threshold, t.final_topk), (0.5, 200));
        assert_eq!((t.pre_nms_topk, t.min_score), (2000, 1e-4));
        assert!(InferenceConfig { final_topk: 0, ..a }.validate().is_err());
    }

    #[test]
    fn background_only_gives_nothing() {
        let out = outputs(vec![30.0, 0.0, 0.0, 30.0, 0.0, 0.0], vec![0.0; 4], 1, 2, 2);
        assert!(decode_detections(&out, "v", &InferenceConfig::anet()).is_empty());
    }

    #[test]
    fn single_confident_position() {
        // Position 0: p(class 2) = 0.9 exactly via logits ln(0.05), ln(0.05), ln(0.9).
        let l = |p: f64| p.ln();
        let out = outputs(vec![l(0.05), l(0.05), l(0.9), 40.0, 0.0, 0.0], vec![0.0; 4], 1, 2, 2);
        let dets = decode_detections(&out, "v", &InferenceConfig::anet());
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].label, 2);
        assert!((dets[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn candidates_capped() {
        let n = 40;
        let out = outputs(vec![0.0; n * 3], vec![0.0; n * 2], 2, 20, 2);
        let cfg = InferenceConfig { pre_nms_topk: 7, ..InferenceConfig::anet() };
        assert_eq!(decode_detections(&out, "v", &cfg).len(), 7);
    }

    #[test]
    fn nms_examples() {
        let kept = nms(&[det(0.0, 1.0, 0.9), det(0.05, 0.95, 0.8)], 0.65);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let kept = nms(&[det(0.0, 1.0, 0.9), det(0.0, 0.2, 0.7)], 0.65);
        assert_eq!(kept.len(), 2);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn per_class_keeps_overlapping_labels() {
        let mut b = det(0.05, 0.95, 0.8);
        b.label = 2;
        assert_eq!(nms_per_class(&[det(0.0, 1.0, 0.9), b.clone()], 0.65).len(), 2);
        assert_eq!(nms(&[det(0.0, 1.0, 0.9), b], 0.65).len(), 1);
    }

    proptest! {
        #[test]
        fn survivors_overlap_at_most_threshold(
            raw in prop::collection::vec((0.0f64..0.9, 0.01f64..0.5, 0.0f64..1.0), 0..20),
            thr in 0.0f64..1.0,
        ) {
            let dets: Vec<Detection> = raw.iter().map(|&(s, l, sc)| det(s, (s + l).min(1.0), sc)).collect();
            let kept = nms(&dets, thr);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(temporal_iou(&a.interval, &b.interval) <= thr);
                }
                if i > 0 {
                    prop_assert!(kept[i - 1].score >= a.score);
                }
            }
        }

        #[test]
        fn decode_invariant_to_scan_order(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (s, t, k) = (2, 6, 2);
            let logits: Vec<f64> = (0..s * t * (k + 1)).map(|_| rng.random_range(-3.0..3.0)).collect();
            let reg: Vec<f64> = (0..s * t * 2).map(|_| rng.random_range(-3.0..1.0)).collect();
            let a = decode_detections(&outputs(logits.clone(), reg.clone(), s, t, k), "v", &InferenceConfig::anet());
            // Swap the two scale levels: same set of candidates, different scan order.
            let swap = |v: &[f64], w: usize| {
                let half = t * w;
                [&v[half..], &v[..half]].concat()
            };
            let b = decode_detections(&outputs(swap(&logits, k + 1), swap(&reg, 2), s, t, k), "v", &InferenceConfig::anet());
            prop_assert_eq!(a, b);
        }
    }
}
