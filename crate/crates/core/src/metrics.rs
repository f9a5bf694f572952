//! Detection metrics: AP and mAP over tIoU thresholds, coverage groups with
//! false-negative rates, neighbour-distance buckets and the merge diagnostic.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{temporal_iou, AnnotationSet, Detection, DetectionSet, Interval, VideoAnnotation};
use crate::error::{Error, Result};
use crate::inference::{rank_order, Preset};

/// `0.5:0.05:0.95`.
pub fn anet_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// `0.3:0.1:0.7`.
pub fn thumos_thresholds() -> Vec<f64> {
    (3..=7).map(|i| i as f64 / 10.0).collect()
}

pub fn thresholds_for(preset: Preset) -> Vec<f64> {
    match preset {
        Preset::Anet => anet_thresholds(),
        Preset::Thumos => thumos_thresholds(),
    }
}

/// A ground-truth interval of one class, tagged with its video.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth<'a> {
    pub video_id: &'a str,
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// Set when there was no ground truth; `ap` is then 0.
    pub no_ground_truth: bool,
}

/// Greedy matching in rank order. Entry `i` is the ground-truth index claimed
/// by detection `i`, if any.
pub fn match_detections(dets: &[&Detection], gts: &[GroundTruth<'_>], tiou: f64) -> Vec<Option<usize>> {
    let mut by_video: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id).or_default().push(i);
    }
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let candidates = by_video.get(d.video_id.as_str())?;
            let mut best: Option<(usize, f64)> = None;
            for &g in candidates {
                if used[g] {
                    continue;
                }
                let iou = temporal_iou(&d.interval, &gts[g].interval);
                if iou >= tiou && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            let (g, _) = best?;
            used[g] = true;
            Some(g)
        })
        .collect()
}

/// All-points interpolated area under the precision/recall curve for a
/// sequence of true/false-positive flags in rank order.
pub fn interpolated_ap(tp: &[bool], num_positive: usize) -> f64 {
    if num_positive == 0 {
        return 0.0;
    }
    let mut prec = vec![0.0];
    let mut rec = vec![0.0];
    let (mut tps, mut fps) = (0usize, 0usize);
    for &t in tp {
        if t {
            tps += 1;
        } else {
            fps += 1;
        }
        prec.push(tps as f64 / (tps + fps) as f64);
        rec.push(tps as f64 / num_positive as f64);
    }
    prec.push(0.0);
    rec.push(1.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len()).map(|i| (rec[i] - rec[i - 1]) * prec[i]).sum()
}

/// AP of one class at one tIoU threshold. Detections may be in any order;
/// they are ranked by score.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth<'_>], tiou: f64) -> ApResult {
    if gts.is_empty() {
        return ApResult { ap: 0.0, no_ground_truth: true };
    }
    let mut ranked: Vec<&Detection> = dets.iter().collect();
    ranked.sort_by(|a, b| rank_order(a, b));
    let matched = match_detections(&ranked, gts, tiou);
    let tp: Vec<bool> = matched.iter().map(Option::is_some).collect();
    ApResult { ap: interpolated_ap(&tp, gts.len()), no_ground_truth: false }
}

// ---------------------------------------------------------------------------
// Grouping helpers

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CoverageGroup {
    XS,
    S,
    M,
    L,
    XL,
}

impl CoverageGroup {
    pub const ALL: [CoverageGroup; 5] = [Self::XS, Self::S, Self::M, Self::L, Self::XL];

    pub fn name(self) -> &'static str {
        match self {
            Self::XS => "XS",
            Self::S => "S",
            Self::M => "M",
            Self::L => "L",
            Self::XL => "XL",
        }
    }
}

/// Bucket an instance by its normalized length; upper bounds are inclusive.
pub fn coverage_group(length: f64) -> CoverageGroup {
    if length <= 0.2 {
        CoverageGroup::XS
    } else if length <= 0.4 {
        CoverageGroup::S
    } else if length <= 0.6 {
        CoverageGroup::M
    } else if length <= 0.8 {
        CoverageGroup::L
    } else {
        CoverageGroup::XL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DistanceBucket {
    /// ratio <= 0.25
    Near,
    /// 0.25 < ratio <= 0.5
    Mid,
    /// ratio > 0.5
    Far,
}

impl DistanceBucket {
    pub const ALL: [DistanceBucket; 3] = [Self::Near, Self::Mid, Self::Far];

    pub fn of(ratio: f64) -> Self {
        if ratio <= 0.25 {
            Self::Near
        } else if ratio <= 0.5 {
            Self::Mid
        } else {
            Self::Far
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Near => "<=0.25",
            Self::Mid => "(0.25,0.5]",
            Self::Far => ">0.5",
        }
    }
}

/// Boundary gap from instance `index` to its nearest other instance, or
/// `None` for a single-instance video.
pub fn distance_ratio(annotation: &VideoAnnotation, index: usize) -> Option<f64> {
    let me = annotation.instances[index].interval;
    annotation
        .instances
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != index)
        .map(|(_, other)| me.gap(&other.interval))
        .reduce(f64::min)
}

// ---------------------------------------------------------------------------
// Dataset-level evaluation

fn check_labels(dets: &DetectionSet, num_classes: usize) -> Result<()> {
    for list in dets.values() {
        if let Some(d) = list.iter().find(|d| d.label == 0 || d.label > num_classes) {
            return Err(Error::validation(
                "detections",
                format!("video {}: label {} outside 1..={num_classes}", d.video_id, d.label),
            ));
        }
    }
    Ok(())
}

struct ClassData<'a> {
    dets: Vec<&'a Detection>,
    gts: Vec<GroundTruth<'a>>,
    /// `(video index, instance index)` of every ground truth.
    origin: Vec<(usize, usize)>,
}

fn per_class<'a>(dets: &'a DetectionSet, ann: &'a AnnotationSet) -> Vec<ClassData<'a>> {
    let k = ann.num_classes();
    let mut classes: Vec<ClassData<'a>> =
        (0..k).map(|_| ClassData { dets: Vec::new(), gts: Vec::new(), origin: Vec::new() }).collect();
    for (vi, v) in ann.videos.iter().enumerate() {
        for (ii, inst) in v.instances.iter().enumerate() {
            let c = &mut classes[inst.label - 1];
            c.gts.push(GroundTruth { video_id: &v.video_id, interval: inst.interval });
            c.origin.push((vi, ii));
        }
    }
    for list in dets.values() {
        for d in list {
            classes[d.label - 1].dets.push(d);
        }
    }
    for c in &mut classes {
        c.dets.sort_by(|a, b| rank_order(a, b));
    }
    classes
}

/// AP restricted to the ground truths selected by `keep`: detections claiming
/// an excluded ground truth are ignored. `None` if no ground truth is kept.
fn subset_ap(class: &ClassData<'_>, tiou: f64, keep: &dyn Fn(usize, usize) -> bool) -> Option<f64> {
    let kept: Vec<bool> = class.origin.iter().map(|&(v, i)| keep(v, i)).collect();
    let npos = kept.iter().filter(|&&k| k).count();
    if npos == 0 {
        return None;
    }
    let matched = match_detections(&class.dets, &class.gts, tiou);
    let tp: Vec<bool> = matched
        .iter()
        .filter(|m| m.is_none_or(|g| kept[g]))
        .map(Option::is_some)
        .collect();
    Some(interpolated_ap(&tp, npos))
}

/// Mean over classes (with at least one selected ground truth) of the AP,
/// averaged over `thresholds`, as a percentage.
fn subset_map(classes: &[ClassData<'_>], thresholds: &[f64], keep: &dyn Fn(usize, usize) -> bool) -> Option<f64> {
    let per_class: Vec<f64> = classes
        .iter()
        .filter_map(|c| {
            let aps: Option<Vec<f64>> = thresholds.iter().map(|&t| subset_ap(c, t, keep)).collect();
            aps.map(|a| a.iter().sum::<f64>() / a.len() as f64)
        })
        .collect();
    (!per_class.is_empty()).then(|| 100.0 * per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSuite {
    /// `(threshold, mAP %)`.
    pub per_threshold: Vec<(f64, f64)>,
    pub average: f64,
    /// Classes without any ground truth; excluded from the means.
    pub classes_without_gt: Vec<usize>,
}

/// Mean AP (percent) over classes at every threshold, and its average.
pub fn map_suite(dets: &DetectionSet, ann: &AnnotationSet, thresholds: &[f64]) -> Result<MapSuite> {
    check_labels(dets, ann.num_classes())?;
    let classes = per_class(dets, ann);
    let without: Vec<usize> = classes
        .iter()
        .enumerate()
        .filter(|(_, c)| c.gts.is_empty())
        .map(|(i, _)| i + 1)
        .collect();
    let with_gt: Vec<&ClassData<'_>> = classes.iter().filter(|c| !c.gts.is_empty()).collect();
    let per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let sum: f64 = with_gt
                .iter()
                .map(|c| {
                    let matched = match_detections(&c.dets, &c.gts, t);
                    let tp: Vec<bool> = matched.iter().map(Option::is_some).collect();
                    interpolated_ap(&tp, c.gts.len())
                })
                .sum();
            let map = if with_gt.is_empty() { 0.0 } else { 100.0 * sum / with_gt.len() as f64 };
            (t, map)
        })
        .collect();
    let average = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64
    };
    Ok(MapSuite { per_threshold, average, classes_without_gt: without })
}

/// Fraction of ground truths in `group` never claimed by any detection,
/// averaged over `0.5:0.05:0.95`. `None` when the group is empty.
pub fn false_negative_rate(dets: &DetectionSet, ann: &AnnotationSet, group: CoverageGroup) -> Result<Option<f64>> {
    check_labels(dets, ann.num_classes())?;
    let classes = per_class(dets, ann);
    Ok(fnr_with(&classes, ann, group))
}

fn fnr_with(classes: &[ClassData<'_>], ann: &AnnotationSet, group: CoverageGroup) -> Option<f64> {
    let in_group = |v: usize, i: usize| coverage_group(ann.videos[v].instances[i].interval.length()) == group;
    let total: usize = classes
        .iter()
        .map(|c| c.origin.iter().filter(|&&(v, i)| in_group(v, i)).count())
        .sum();
    if total == 0 {
        return None;
    }
    let grid = anet_thresholds();
    let mut rate_sum = 0.0;
    for &t in &grid {
        let mut missed = 0usize;
        for c in classes {
            let matched = match_detections(&c.dets, &c.gts, t);
            let mut hit = vec![false; c.gts.len()];
            for g in matched.into_iter().flatten() {
                hit[g] = true;
            }
            missed += c
                .origin
                .iter()
                .zip(&hit)
                .filter(|(&(v, i), h)| in_group(v, i) && !**h)
                .count();
        }
        rate_sum += missed as f64 / total as f64;
    }
    Some(rate_sum / grid.len() as f64)
}

/// Same-class instance pairs adjacent in time with boundary gap <= 0.25.
pub fn neighboring_pairs(video: &VideoAnnotation) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..video.instances.len()).collect();
    order.sort_by(|&a, &b| video.instances[a].interval.start().total_cmp(&video.instances[b].interval.start()));
    order
        .windows(2)
        .filter_map(|w| {
            let (a, b) = (&video.instances[w[0]], &video.instances[w[1]]);
            (a.label == b.label && a.interval.gap(&b.interval) <= 0.25).then_some((w[0], w[1]))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStats {
    pub pairs: usize,
    pub merged: usize,
    pub rate: Option<f64>,
}

/// A neighbouring pair is merged when a same-class detection covers the pair's
/// hull (IoU >= 0.5) without matching either member (IoU < 0.5 with each), and
/// that detection outranks the best individual detection of at least one member.
pub fn merge_stats(dets: &DetectionSet, ann: &AnnotationSet) -> MergeStats {
    let empty = Vec::new();
    let (mut pairs, mut merged) = (0usize, 0usize);
    for video in &ann.videos {
        let list = dets.get(&video.video_id).unwrap_or(&empty);
        for (ia, ib) in neighboring_pairs(video) {
            pairs += 1;
            let (a, b) = (&video.instances[ia], &video.instances[ib]);
            let hull = a.interval.hull(&b.interval);
            let same: Vec<&Detection> = list.iter().filter(|d| d.label == a.label).collect();
            let best_on = |iv: &Interval| {
                same.iter()
                    .filter(|d| temporal_iou(&d.interval, iv) >= 0.5)
                    .map(|d| d.score)
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let bar = best_on(&a.interval).min(best_on(&b.interval));
            let is_merged = same.iter().any(|d| {
                temporal_iou(&d.interval, &hull) >= 0.5
                    && temporal_iou(&d.interval, &a.interval) < 0.5
                    && temporal_iou(&d.interval, &b.interval) < 0.5
                    && d.score > bar
            });
            if is_merged {
                merged += 1;
            }
        }
    }
    MergeStats { pairs, merged, rate: (pairs > 0).then(|| merged as f64 / pairs as f64) }
}

pub fn merge_rate(dets: &DetectionSet, ann: &AnnotationSet) -> Option<f64> {
    merge_stats(dets, ann).rate
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub map: Option<f64>,
    pub fnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub count: usize,
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub preset: Preset,
    pub map: MapSuite,
    pub coverage: BTreeMap<String, GroupStats>,
    pub distance: BTreeMap<String, BucketStats>,
    pub merge: MergeStats,
}

impl EvalReport {
    pub fn average_map(&self) -> f64 {
        self.map.average
    }

    pub fn fnr(&self, group: CoverageGroup) -> Option<f64> {
        self.coverage.get(group.name()).and_then(|g| g.fnr)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text tables.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let heads: Vec<String> = self.map.per_threshold.iter().map(|(t, _)| format!("{t:.2}")).collect();
        let _ = writeln!(out, "{:<8}{}{:>8}", "tIoU", heads.iter().map(|h| format!("{h:>8}")).collect::<String>(), "Avg.");
        let vals: String = self.map.per_threshold.iter().map(|(_, m)| format!("{m:>8.2}")).collect();
        let _ = writeln!(out, "{:<8}{vals}{:>8.2}", "mAP", self.map.average);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<8}{:>8}{:>8}{:>8}", "group", "count", "mAP", "FNR");
        for g in CoverageGroup::ALL {
            if let Some(s) = self.coverage.get(g.name()) {
                let _ = writeln!(out, "{:<8}{:>8}{:>8}{:>8}", g.name(), s.count, cell(s.map), cell(s.fnr.map(|f| 100.0 * f)));
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<12}{:>8}{:>8}", "distance", "count", "mAP");
        for b in DistanceBucket::ALL {
            if let Some(s) = self.distance.get(b.name()) {
                let _ = writeln!(out, "{:<12}{:>8}{:>8}", b.name(), s.count, cell(s.map));
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "merge_rate {} ({} of {} neighbouring pairs)",
            cell(self.merge.rate.map(|r| 100.0 * r)),
            self.merge.merged,
            self.merge.pairs
        );
        out
    }
}

/// Every metric for one detection set.
pub fn evaluate(dets: &DetectionSet, ann: &AnnotationSet, preset: Preset) -> Result<EvalReport> {
    let thresholds = thresholds_for(preset);
    let map = map_suite(dets, ann, &thresholds)?;
    let classes = per_class(dets, ann);

    let mut coverage = BTreeMap::new();
    for g in CoverageGroup::ALL {
        let keep = |v: usize, i: usize| coverage_group(ann.videos[v].instances[i].interval.length()) == g;
        let count = ann
            .videos
            .iter()
            .enumerate()
            .map(|(v, vid)| (0..vid.instances.len()).filter(|&i| keep(v, i)).count())
            .sum();
        coverage.insert(
            g.name().to_string(),
            GroupStats { count, map: subset_map(&classes, &thresholds, &keep), fnr: fnr_with(&classes, ann, g) },
        );
    }

    let ratios: Vec<Vec<Option<f64>>> = ann
        .videos
        .iter()
        .map(|v| (0..v.instances.len()).map(|i| distance_ratio(v, i)).collect())
        .collect();
    let mut distance = BTreeMap::new();
    for b in DistanceBucket::ALL {
        let keep = |v: usize, i: usize| ratios[v][i].is_some_and(|r| DistanceBucket::of(r) == b);
        let count = ratios.iter().flatten().filter(|r| r.is_some_and(|r| DistanceBucket::of(r) == b)).count();
        distance.insert(b.name().to_string(), BucketStats { count, map: subset_map(&classes, &thresholds, &keep) });
    }

    Ok(EvalReport { preset, map, coverage, distance, merge: merge_stats(dets, ann) })
}
