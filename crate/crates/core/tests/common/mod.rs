//! Helpers shared by the integration tests: gradient checks of individual
//! modules on tiny shapes and brute-force references for NMS and AP.
#![allow(dead_code)]

use brnlab::backbone::{Backbone, BackboneConfig, MultiScaleFeatures};
use brnlab::data::{temporal_iou, ActionInstance, Detection, Interval, VideoAnnotation};
use brnlab::heads::{HeadConfig, Heads};
use brnlab::model::{loss_with_targets, targets_for, LossConfig, Model, ModelConfig, ModelPreset};
use brnlab::nn::{ConvAxis, Grads, ParamStore, ScaleTimeTensor};
use brnlab::scaletime::{ScaleTimeBlocks, SelectionModule, StbConfig, StfBuilder, SubBlock, SubBlockConfig};
use brnlab::train::{grad_check, GradCheckReport, GRAD_CHECK_STEP};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Stt = ScaleTimeTensor<f64>;

pub const TOLERANCE: f64 = 1e-3;
const PER_GROUP: usize = 24;
pub const DIM: usize = 4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_stt(rng: &mut ChaCha8Rng, scales: usize, time: usize, dim: usize) -> Stt {
    let data = Array2::from_shape_fn((scales * time, dim), |_| rng.random_range(-1.0..1.0));
    Stt::new(scales, time, data).unwrap()
}

fn dot(a: &Stt, b: &Stt) -> f64 {
    (a.data() * b.data()).sum()
}

/// Store `x` as an extra parameter array so its gradient is checked too.
fn with_input(params: &ParamStore<f64>, name: &str, x: &Stt) -> (ParamStore<f64>, brnlab::nn::ParamId) {
    let mut store = params.clone();
    let id = store.add(name, vec![x.data().nrows(), x.channels()], x.data().iter().copied().collect());
    (store, id)
}

fn read_input(store: &ParamStore<f64>, id: brnlab::nn::ParamId, layout: &Stt) -> Stt {
    let data = Array2::from_shape_vec(layout.data().raw_dim(), store.slice(id).to_vec()).unwrap();
    layout.with_data(data)
}

fn add_into(grads: &mut Grads<f64>, id: brnlab::nn::ParamId, d: &Stt) {
    for (g, v) in grads.slice_mut(id).iter_mut().zip(d.data().iter()) {
        *g += v;
    }
}

/// Check a module `y = f(params, x)` under the loss `sum(y * r)` for a fixed
/// random `r`, including the gradient w.r.t. `x`.
pub fn check_module<Fw, Bw>(params: &ParamStore<f64>, x: &Stt, seed: u64, fwd: Fw, bwd: Bw) -> GradCheckReport
where
    Fw: Fn(&ParamStore<f64>, &Stt) -> Stt,
    Bw: Fn(&ParamStore<f64>, &Stt, &Stt, &mut Grads<f64>) -> Stt,
{
    let y0 = fwd(params, x);
    let r = random_stt(&mut rng(seed), y0.scales(), y0.time(), y0.channels());
    let (store, id) = with_input(params, "input", x);
    grad_check(
        &store,
        |p, g| {
            let xin = read_input(p, id, x);
            let y = fwd(p, &xin);
            if let Some(g) = g {
                let dx = bwd(p, &xin, &r, g);
                add_into(g, id, &dx);
            }
            dot(&y, &r)
        },
        GRAD_CHECK_STEP,
        PER_GROUP,
    )
}

/// The selection module with its input and every branch output as checked variables.
pub fn check_selection(axis: ConvAxis, learned: bool, seed: u64) -> GradCheckReport {
    let mut rng = rng(seed);
    let mut params = ParamStore::<f64>::new();
    let branches = 4;
    let module = SelectionModule::new(&mut params, "select", axis, 3, DIM, branches, learned, &mut rng);
    let x = random_stt(&mut rng, 3, 6, DIM);
    let outs: Vec<Stt> = (0..branches).map(|_| random_stt(&mut rng, 3, 6, DIM)).collect();
    let r = random_stt(&mut rng, 3, 6, DIM);
    let (mut store, xid) = with_input(&params, "input", &x);
    let oids: Vec<_> = outs
        .iter()
        .enumerate()
        .map(|(i, o)| store.add(format!("branch{i}"), vec![o.data().nrows(), DIM], o.data().iter().copied().collect()))
        .collect();
    grad_check(
        &store,
        |p, g| {
            let xin = read_input(p, xid, &x);
            let os: Vec<Stt> = oids.iter().zip(&outs).map(|(&id, o)| read_input(p, id, o)).collect();
            let (y, cache) = module.forward(p, &xin, &os).unwrap();
            if let Some(g) = g {
                let (d_outs, dx) = module.backward(p, &xin, &os, &cache, &r, g);
                if let Some(dx) = dx {
                    add_into(g, xid, &dx);
                }
                for (&id, d) in oids.iter().zip(&d_outs) {
                    add_into(g, id, d);
                }
            }
            dot(&y, &r)
        },
        GRAD_CHECK_STEP,
        PER_GROUP,
    )
}

pub fn check_sub_block(axis: ConvAxis, config: &SubBlockConfig, learned: bool, seed: u64) -> GradCheckReport {
    let mut rng = rng(seed);
    let mut params = ParamStore::<f64>::new();
    let sb = SubBlock::new(&mut params, "sub", axis, config, DIM, learned, &mut rng).unwrap();
    let x = random_stt(&mut rng, 4, 8, DIM);
    check_module(
        &params,
        &x,
        seed + 1,
        |p, x| sb.forward(p, x).unwrap().0,
        |p, x, dy, g| {
            let (_, cache) = sb.forward(p, x).unwrap();
            sb.backward(p, &cache, dy, g)
        },
    )
}

pub fn check_stb(config: StbConfig, seed: u64) -> GradCheckReport {
    let mut rng = rng(seed);
    let mut params = ParamStore::<f64>::new();
    let stb = ScaleTimeBlocks::new(config, &mut params, DIM, &mut rng).unwrap();
    let x = random_stt(&mut rng, 3, 8, DIM);
    check_module(
        &params,
        &x,
        seed + 1,
        |p, x| stb.forward(p, x).unwrap().0,
        |p, x, dy, g| {
            let (_, cache) = stb.forward(p, x).unwrap();
            stb.backward(p, &cache, dy, g)
        },
    )
}

/// Backbone with the loss summed over every output level.
pub fn check_backbone(seed: u64) -> GradCheckReport {
    let mut rng = rng(seed);
    let mut params = ParamStore::<f64>::new();
    let config = BackboneConfig { num_levels: 3, hidden_dim: DIM, kernel_size: 3, input_dim: 3 };
    let backbone = Backbone::new(config, &mut params, &mut rng).unwrap();
    let x = random_stt(&mut rng, 1, 16, 3);
    let levels = backbone.forward(&params, &x).unwrap().0;
    let rs: Vec<Stt> = levels.levels.iter().map(|l| random_stt(&mut rng, 1, l.time(), DIM)).collect();
    let (store, id) = with_input(&params, "input", &x);
    grad_check(
        &store,
        |p, g| {
            let xin = read_input(p, id, &x);
            let (out, cache) = backbone.forward(p, &xin).unwrap();
            if let Some(g) = g {
                let dx = backbone.backward(p, &cache, &out, rs.clone(), g);
                add_into(g, id, &dx);
            }
            out.levels.iter().zip(&rs).map(|(l, r)| dot(l, r)).sum()
        },
        GRAD_CHECK_STEP,
        PER_GROUP,
    )
}

/// Scale-time feature construction, with every level as a checked variable.
pub fn check_stf(seed: u64) -> GradCheckReport {
    let mut rng = rng(seed);
    let mut params = ParamStore::<f64>::new();
    let stf = StfBuilder::new(&mut params, 3, DIM, DIM, &mut rng);
    let levels: Vec<Stt> = [8, 4, 2].iter().map(|&t| random_stt(&mut rng, 1, t, DIM)).collect();
    let r = random_stt(&mut rng, 3, 8, DIM);
    let mut store = params.clone();
    let ids: Vec<_> = levels
        .iter()
        .enumerate()
        .map(|(i, l)| store.add(format!("level{i}"), vec![l.time(), DIM], l.data().iter().copied().collect()))
        .collect();
    grad_check(
        &store,
        |p, g| {
            let b = MultiScaleFeatures { levels: ids.iter().zip(&levels).map(|(&id, l)| read_input(p, id, l)).collect() };
            let (y, cache) = stf.forward(p, &b).unwrap();
            if let Some(g) = g {
                let d = stf.backward(p, &b, &cache, &r, g);
                for (&id, d) in ids.iter().zip(&d) {
                    add_into(g, id, d);
                }
            }
            dot(&y, &r)
        },
        GRAD_CHECK_STEP,
        PER_GROUP,
    )
}

pub fn check_heads(scale_conv: bool, seed: u64) -> GradCheckReport {
    let mut rng = rng(seed);
    let mut params = ParamStore::<f64>::new();
    let config = HeadConfig { scale_conv, ..HeadConfig::default() };
    let heads = Heads::new(&mut params, &config, DIM, 2, &mut rng).unwrap();
    let x = random_stt(&mut rng, 3, 8, DIM);
    let r_cls = random_stt(&mut rng, 3, 8, 3);
    let r_reg = random_stt(&mut rng, 3, 8, 2);
    let (store, id) = with_input(&params, "input", &x);
    grad_check(
        &store,
        |p, g| {
            let xin = read_input(p, id, &x);
            let (out, cache) = heads.forward(p, &xin);
            if let Some(g) = g {
                let dx = heads.backward(p, &xin, &cache, &r_cls, &r_reg, g);
                add_into(g, id, &dx);
            }
            dot(&out.class_logits, &r_cls) + dot(&out.reg_raw, &r_reg)
        },
        GRAD_CHECK_STEP,
        PER_GROUP,
    )
}

/// Tiny full model under the training loss with fixed targets.
pub fn tiny_model_config(preset: ModelPreset) -> ModelConfig {
    let mut cfg = ModelConfig::preset(preset, 3, 2, DIM);
    cfg.num_levels = 2;
    cfg.stb.num_blocks = 2;
    cfg
}

pub fn check_full_model(config: ModelConfig, seed: u64) -> GradCheckReport {
    let (model, params) = Model::new::<f64>(config, seed).unwrap();
    let x = random_stt(&mut rng(seed + 1), 1, 32, 3);
    let ann = VideoAnnotation {
        video_id: "v".into(),
        duration_seconds: 1.0,
        instances: vec![
            ActionInstance { interval: Interval::new(0.05, 0.2).unwrap(), label: 1 },
            ActionInstance { interval: Interval::new(0.22, 0.4).unwrap(), label: 1 },
            ActionInstance { interval: Interval::new(0.5, 0.95).unwrap(), label: 2 },
        ],
    };
    let lc = LossConfig::default();
    let out = model.predict(&params, &x).unwrap();
    let targets = targets_for(&model, &out, &ann, lc.assign);
    grad_check(
        &params,
        |p, g| loss_with_targets(&model, p, &x, &targets, &lc, g).unwrap().total,
        GRAD_CHECK_STEP,
        PER_GROUP,
    )
}

/// Every combination of the four scale-time switches.
pub fn switch_combinations() -> Vec<(String, StbConfig)> {
    (0..16u32)
        .map(|bits| {
            let mut cfg = StbConfig { num_blocks: 2, ..StbConfig::default() };
            let mut names = Vec::new();
            for (i, name) in ["no-scale", "no-time", "no-selection", "no-dilation"].iter().enumerate() {
                if bits & (1 << i) != 0 {
                    names.push(*name);
                }
            }
            cfg.disable_scale = bits & 1 != 0;
            cfg.disable_time = bits & 2 != 0;
            cfg.disable_selection = bits & 4 != 0;
            cfg.unified_dilation = bits & 8 != 0;
            let label = if names.is_empty() { "full".to_string() } else { names.join("+") };
            (label, cfg)
        })
        .collect()
}

/// One-line description of the worst group, for assertion messages.
pub fn describe(report: &GradCheckReport) -> String {
    let worst = report
        .groups
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|g| format!("{} {:.2e} {:?}", g.name, g.max_rel_error, g.worst))
        .unwrap_or_default();
    format!("max {:.2e} checked {} skipped {} worst {worst}", report.max_rel_error(), report.checked(), report.skipped())
}

// ---------------------------------------------------------------------------
// Brute-force references

pub fn random_detection(rng: &mut ChaCha8Rng, video: &str, labels: usize) -> Detection {
    let a: f64 = rng.random_range(0.0..0.9);
    let len: f64 = rng.random_range(0.02..0.6);
    // A coarse score grid produces ties, exercising the rank tie-break.
    let score = rng.random_range(1..=8) as f64 / 8.0;
    Detection {
        video_id: video.to_string(),
        interval: Interval::new(a, (a + len).min(1.0)).unwrap(),
        label: rng.random_range(1..=labels),
        score,
    }
}

fn rank_before(a: &Detection, b: &Detection) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    (a.interval.start(), a.interval.end(), a.label) < (b.interval.start(), b.interval.end(), b.label)
}

/// Greedy NMS output is the unique subset `K` in which no member is
/// suppressed by a better-ranked member, and every non-member is.
/// Enumerate all subsets and return the one satisfying that fixed point.
pub fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    let mut found: Vec<u32> = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let suppressed = |i: usize| {
            (0..n).any(|j| j != i && inside(j) && rank_before(&dets[j], &dets[i]) && temporal_iou(&dets[j].interval, &dets[i].interval) > thr)
        };
        if (0..n).all(|i| inside(i) != suppressed(i)) {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "fixed point must be unique");
    let mut kept: Vec<Detection> = (0..n).filter(|i| found[0] & (1 << i) != 0).map(|i| dets[i].clone()).collect();
    kept.sort_by(|a, b| if rank_before(a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    kept
}

/// AP from first principles: greedy rank-order matching, then the area under
/// the precision-recall curve where precision at recall `r` is the best
/// precision at any recall >= `r`.
pub fn ap_oracle(dets: &[Detection], gts: &[Interval], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            if rank_before(order[j], order[i]) {
                order.swap(i, j);
            }
        }
    }
    let mut used = vec![false; gts.len()];
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (k, d) in order.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (g, gt) in gts.iter().enumerate() {
            let iou = temporal_iou(&d.interval, gt);
            if !used[g] && iou >= thr && best.is_none_or(|b| iou > temporal_iou(&d.interval, &gts[b])) {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            used[g] = true;
            tp += 1.0;
        }
        points.push((tp / gts.len() as f64, tp / (k + 1) as f64));
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(recall, _)) in points.iter().enumerate() {
        if recall > prev_recall {
            let best = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            area += (recall - prev_recall) * best;
            prev_recall = recall;
        }
    }
    area
}
