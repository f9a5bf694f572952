//! Classification and regression heads over the scale-time tensor, target
//! assignment, and the focal / IoU training objective.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{temporal_iou, Interval, VideoAnnotation, BACKGROUND};
use crate::error::Result;
use crate::nn::{relu, relu_backward, AxisConv, ConvAxis, Grads, Linear, ParamStore, ScaleTimeTensor};
use crate::real::Real;

type Stt<F> = ScaleTimeTensor<F>;

/// Smallest probability fed to `log` in the focal loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadLayer {
    scale: Option<AxisConv>,
    time: AxisConv,
}

/// `layers x (scale conv -> time conv -> ReLU)` followed by a pointwise projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTower {
    layers: Vec<HeadLayer>,
    out: Linear,
}

struct TowerCache<F> {
    inputs: Vec<Stt<F>>,
    mids: Vec<Stt<F>>,
    activated: Vec<Stt<F>>,
}

impl HeadTower {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        out_dim: usize,
        layers: usize,
        kernel: usize,
        scale_conv: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| {
                let scale = scale_conv
                    .then(|| AxisConv::new(store, &format!("{name}.layer{i}.scale"), ConvAxis::Scale, kernel, 1, dim, dim, rng))
                    .transpose()?;
                let time = AxisConv::new(store, &format!("{name}.layer{i}.time"), ConvAxis::Time, kernel, 1, dim, dim, rng)?;
                Ok(HeadLayer { scale, time })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Linear::new(store, &format!("{name}.out"), dim, out_dim, rng);
        Ok(Self { layers, out })
    }

    fn forward<F: Real>(&self, params: &ParamStore<F>, x: &Stt<F>) -> (Stt<F>, TowerCache<F>) {
        let mut h = x.clone();
        let mut cache = TowerCache { inputs: Vec::new(), mids: Vec::new(), activated: Vec::new() };
        for layer in &self.layers {
            let mid = match &layer.scale {
                Some(c) => c.forward(params, &h),
                None => h.clone(),
            };
            let a = relu(&layer.time.forward(params, &mid));
            cache.inputs.push(std::mem::replace(&mut h, a.clone()));
            cache.mids.push(mid);
            cache.activated.push(a);
        }
        (self.out.forward(params, &h), cache)
    }

    fn backward<F: Real>(&self, params: &ParamStore<F>, x: &Stt<F>, cache: &TowerCache<F>, dy: &Stt<F>, grads: &mut Grads<F>) -> Stt<F> {
        let last = cache.activated.last().unwrap_or(x);
        let mut d = self.out.backward(params, last, dy, grads);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let d_pre = relu_backward(&cache.activated[i], &d);
            let d_mid = layer.time.backward(params, &cache.mids[i], &d_pre, grads);
            d = match &layer.scale {
                Some(c) => c.backward(params, &cache.inputs[i], &d_mid, grads),
                None => d_mid,
            };
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub layers: usize,
    pub kernel: usize,
    /// Include scale-axis convolutions in every head layer.
    pub scale_conv: bool,
    /// Initial background probability of the classifier.
    pub background_prior: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { layers: 3, kernel: 3, scale_conv: true, background_prior: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<F> {
    /// `S x T x (K + 1)`, background first.
    pub class_logits: Stt<F>,
    /// `S x T x 2` pre-sigmoid distances to start and end.
    pub reg_raw: Stt<F>,
}

impl<F: Real> HeadOutputs<F> {
    pub fn scales(&self) -> usize {
        self.class_logits.scales()
    }

    pub fn time(&self) -> usize {
        self.class_logits.time()
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.channels() - 1
    }

    /// Decoded interval at every position, row order `s * T + t`.
    pub fn decoded(&self) -> Vec<Option<Interval>> {
        let time = self.time();
        self.reg_raw
            .data()
            .rows()
            .into_iter()
            .enumerate()
            .map(|(row, r)| {
                let t = row % time;
                decode_interval(anchor(t, time), sigmoid(r[0].f64()), sigmoid(r[1].f64()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heads {
    pub num_classes: usize,
    cls: HeadTower,
    reg: HeadTower,
}

pub struct HeadsCache<F> {
    cls: TowerCache<F>,
    reg: TowerCache<F>,
}

impl Heads {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        config: &HeadConfig,
        dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cls = HeadTower::new(store, "head.cls", dim, num_classes + 1, config.layers, config.kernel, config.scale_conv, rng)?;
        let reg = HeadTower::new(store, "head.reg", dim, 2, config.layers, config.kernel, config.scale_conv, rng)?;
        // Small final classifier weights and a background-favouring bias.
        let w = store.slice_mut(cls.out.weight);
        for v in w.iter_mut() {
            *v *= F::c(0.01);
        }
        let prior = config.background_prior.clamp(1e-6, 1.0 - 1e-6);
        let bg_bias = (prior * num_classes as f64 / (1.0 - prior)).ln();
        store.slice_mut(cls.out.bias)[BACKGROUND] = F::c(bg_bias);
        Ok(Self { num_classes, cls, reg })
    }

    pub fn forward<F: Real>(&self, params: &ParamStore<F>, stf: &Stt<F>) -> (HeadOutputs<F>, HeadsCache<F>) {
        let (class_logits, cls) = self.cls.forward(params, stf);
        let (reg_raw, reg) = self.reg.forward(params, stf);
        (HeadOutputs { class_logits, reg_raw }, HeadsCache { cls, reg })
    }

    pub fn backward<F: Real>(
        &self,
        params: &ParamStore<F>,
        stf: &Stt<F>,
        cache: &HeadsCache<F>,
        d_class_logits: &Stt<F>,
        d_reg_raw: &Stt<F>,
        grads: &mut Grads<F>,
    ) -> Stt<F> {
        let mut d = self.cls.backward(params, stf, &cache.cls, d_class_logits, grads).into_data();
        d += self.reg.backward(params, stf, &cache.reg, d_reg_raw, grads).data();
        stf.with_data(d)
    }
}

/// Run both heads on a scale-time tensor.
pub fn head_forward<F: Real>(params: &ParamStore<F>, heads: &Heads, stf: &Stt<F>) -> HeadOutputs<F> {
    heads.forward(params, stf).0
}

// ---------------------------------------------------------------------------
// Decoding

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Normalized time of grid cell `t` out of `time`.
pub fn anchor(t: usize, time: usize) -> f64 {
    (t as f64 + 0.5) / time as f64
}

/// `[anchor - d_start, anchor + d_end]` clipped to `[0, 1]`; `None` if empty.
pub fn decode_interval(anchor: f64, d_start: f64, d_end: f64) -> Option<Interval> {
    Interval::clipped(anchor - d_start, anchor + d_end)
}

// ---------------------------------------------------------------------------
// Target assignment

/// Instance-length ranges per scale level: level `i` owns `(bounds[i], bounds[i+1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRanges {
    bounds: Vec<f64>,
}

impl LevelRanges {
    /// `(0, 2^{1-S}], (2^{1-S}, 2^{2-S}], ..., (1/2, 1]`.
    pub fn geometric(levels: usize) -> Self {
        let mut bounds = vec![0.0];
        bounds.extend((1..=levels).map(|i| 2f64.powi(i as i32 - levels as i32)));
        Self { bounds }
    }

    pub fn levels(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn range(&self, level: usize) -> (f64, f64) {
        (self.bounds[level], self.bounds[level + 1])
    }

    pub fn level_of(&self, length: f64) -> Option<usize> {
        (0..self.levels()).find(|&i| length > self.bounds[i] && length <= self.bounds[i + 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignMode {
    /// Among candidate instances pick the one best overlapping the current prediction.
    #[default]
    Dynamic,
    /// Always pick the shortest candidate instance.
    Static,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMap {
    pub scales: usize,
    pub time: usize,
    pub class_target: Vec<usize>,
    pub matched: Vec<Option<Interval>>,
}

impl TargetMap {
    pub fn positive_mask(&self) -> Vec<bool> {
        self.class_target.iter().map(|&c| c != BACKGROUND).collect()
    }

    pub fn num_positive(&self) -> usize {
        self.class_target.iter().filter(|&&c| c != BACKGROUND).count()
    }
}

/// Mark `(s, t)` positive when its anchor lies inside an instance whose
/// length belongs to level `s`. Ties between instances are broken by IoU with
/// the current prediction (dynamic mode) and then by shorter length.
pub fn assign_targets(
    annotation: &VideoAnnotation,
    predictions: Option<&[Option<Interval>]>,
    ranges: &LevelRanges,
    scales: usize,
    time: usize,
    mode: AssignMode,
) -> TargetMap {
    let n = scales * time;
    let mut class_target = vec![BACKGROUND; n];
    let mut matched = vec![None; n];
    let levels: Vec<Option<usize>> = annotation
        .instances
        .iter()
        .map(|i| ranges.level_of(i.interval.length()))
        .collect();
    for s in 0..scales {
        for t in 0..time {
            let a = anchor(t, time);
            let row = s * time + t;
            let pred = match (mode, predictions) {
                (AssignMode::Dynamic, Some(p)) => p[row],
                _ => None,
            };
            let score = |iv: &Interval| match (mode, pred) {
                (AssignMode::Dynamic, Some(p)) => temporal_iou(iv, &p),
                _ => 0.0,
            };
            let best = annotation
                .instances
                .iter()
                .zip(&levels)
                .filter(|(inst, lvl)| **lvl == Some(s) && inst.interval.contains(a))
                .map(|(inst, _)| inst)
                .reduce(|best, cand| {
                    let (sb, sc) = (score(&best.interval), score(&cand.interval));
                    if sc > sb || (sc == sb && cand.interval.length() < best.interval.length()) {
                        cand
                    } else {
                        best
                    }
                });
            if let Some(inst) = best {
                class_target[row] = inst.label;
                matched[row] = Some(inst.interval);
            }
        }
    }
    TargetMap { scales, time, class_target, matched }
}

// ---------------------------------------------------------------------------
// Losses

/// `-(1 - p)^alpha * ln p` for a single probability.
pub fn focal_term(p: f64, alpha: f64) -> f64 {
    let p = p.max(PROB_FLOOR);
    -(1.0 - p).powf(alpha) * p.ln()
}

/// Mean focal loss over all positions together with its gradient w.r.t. the logits.
pub fn focal_loss<F: Real>(logits: &Array2<F>, targets: &[usize], alpha: f64) -> (f64, Array2<F>) {
    let rows = logits.nrows();
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    let inv_n = 1.0 / rows.max(1) as f64;
    for (r, (z, mut g)) in logits.rows().into_iter().zip(grad.rows_mut()).enumerate() {
        let c = targets[r];
        let max = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
        let exps: Vec<f64> = z.iter().map(|v| (v.f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let ln_p = (z[c].f64() - max - sum.ln()).max(PROB_FLOOR.ln());
        let p = ln_p.exp();
        let one_minus = (1.0 - p).max(0.0);
        total += -one_minus.powf(alpha) * ln_p;
        // d loss / d p, multiplied by p.
        let lead = if alpha == 0.0 || one_minus == 0.0 {
            0.0
        } else {
            alpha * one_minus.powf(alpha - 1.0) * p * ln_p
        };
        let gp = lead - one_minus.powf(alpha);
        for (j, gj) in g.iter_mut().enumerate() {
            let q = exps[j] / sum;
            let delta = if j == c { 1.0 } else { 0.0 };
            *gj = F::c(gp * (delta - q) * inv_n);
        }
    }
    (total * inv_n, grad)
}

/// `1 - IoU` between a predicted and a ground-truth interval; an empty
/// prediction contributes 1.
pub fn iou_loss_term(pred: Option<&Interval>, gt: &Interval) -> f64 {
    match pred {
        Some(p) => 1.0 - temporal_iou(p, gt),
        None => 1.0,
    }
}

/// Mean `1 - IoU` over positive positions (0 without positives), plus the
/// gradient w.r.t. the raw regression outputs.
pub fn iou_loss<F: Real>(reg_raw: &Stt<F>, targets: &TargetMap) -> (f64, Array2<F>) {
    let time = reg_raw.time();
    let mut grad = Array2::zeros(reg_raw.data().raw_dim());
    let positives = targets.num_positive();
    if positives == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / positives as f64;
    let mut total = 0.0;
    for (row, gt) in targets.matched.iter().enumerate() {
        let Some(gt) = gt else { continue };
        let a = anchor(row % time, time);
        let (u_s, u_e) = (reg_raw.data()[[row, 0]].f64(), reg_raw.data()[[row, 1]].f64());
        let (d_s, d_e) = (sigmoid(u_s), sigmoid(u_e));
        let raw_start = a - d_s;
        let raw_end = a + d_e;
        let start = raw_start.clamp(0.0, 1.0);
        let end = raw_end.clamp(0.0, 1.0);
        let (gs, ge) = (gt.start(), gt.end());
        let inter = (end.min(ge) - start.max(gs)).max(0.0);
        let union = (end - start) + (ge - gs) - inter;
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        total += 1.0 - iou;
        if union <= 0.0 {
            continue;
        }
        // Partial derivatives of intersection and union w.r.t. the clipped bounds.
        let overlap = inter > 0.0;
        let di_ds = if overlap && start > gs { -1.0 } else { 0.0 };
        let di_de = if overlap && end < ge { 1.0 } else { 0.0 };
        let du_ds = -1.0 - di_ds;
        let du_de = 1.0 - di_de;
        let diou_ds = (di_ds * union - inter * du_ds) / (union * union);
        let diou_de = (di_de * union - inter * du_de) / (union * union);
        let ds_ddist = if raw_start > 0.0 && raw_start < 1.0 { -1.0 } else { 0.0 };
        let de_ddist = if raw_end > 0.0 && raw_end < 1.0 { 1.0 } else { 0.0 };
        grad[[row, 0]] = F::c(-diou_ds * ds_ddist * d_s * (1.0 - d_s) * inv);
        grad[[row, 1]] = F::c(-diou_de * de_ddist * d_e * (1.0 - d_e) * inv);
    }
    (total * inv, grad)
}

/// `l_cls + lambda * l_reg`.
pub fn total_loss(l_cls: f64, l_reg: f64, lambda: f64) -> f64 {
    l_cls + lambda * l_reg
}
