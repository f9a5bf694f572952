mod common;

use brnlab::data::Interval;
use brnlab::inference::nms;
use brnlab::metrics::{average_precision, GroundTruth};
use common::*;
use rand::Rng;

#[test]
fn nms_matches_subset_fixed_point() {
    let mut rng = rng(7);
    for case in 0..1000 {
        let n = rng.random_range(0..=6);
        let dets: Vec<_> = (0..n).map(|_| random_detection(&mut rng, "v", 2)).collect();
        let thr = [0.3, 0.5, 0.65][case % 3];
        assert_eq!(nms(&dets, thr), nms_oracle(&dets, thr), "case {case}");
    }
}

#[test]
fn average_precision_matches_reference() {
    let mut rng = rng(8);
    for case in 0..1000 {
        let n = rng.random_range(0..=6);
        let m = rng.random_range(0..=3);
        let dets: Vec<_> = (0..n).map(|_| random_detection(&mut rng, "v", 1)).collect();
        let gts: Vec<Interval> = (0..m).map(|_| random_detection(&mut rng, "v", 1).interval).collect();
        let gt_refs: Vec<GroundTruth> = gts.iter().map(|&interval| GroundTruth { video_id: "v", interval }).collect();
        let thr = [0.3, 0.5, 0.7][case % 3];
        let got = average_precision(&dets, &gt_refs, thr);
        let want = ap_oracle(&dets, &gts, thr);
        assert!((got.ap - want).abs() < 1e-12, "case {case}: {} vs {want}", got.ap);
        assert_eq!(got.no_ground_truth, gts.is_empty());
    }
}
