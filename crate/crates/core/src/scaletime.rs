//! Scale-time features and scale-time blocks.
//!
//! Backbone levels are embedded pointwise, linearly resampled to the length
//! of the finest level and stacked on a new scale axis, giving an
//! `S x T x D` tensor. Each scale-time block then runs a scale sub-block and
//! a time sub-block. A sub-block evaluates several dilated convolutions
//! along its axis and fuses them with per-position softmax weights predicted
//! from an axis-pooled summary of its input.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::nn::{
    avg_pool_axis, relu, relu_backward, softmax_rows, softmax_rows_backward, AxisConv, ConvAxis, Grads, Linear,
    ParamStore, ScaleTimeTensor,
};
use crate::real::Real;

type Stt<F> = ScaleTimeTensor<F>;

// ---------------------------------------------------------------------------
// Linear resampling

/// Endpoint-aligned linear resampling plan from `src` to `dst` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizePlan {
    src: usize,
    taps: Vec<(usize, usize, f64)>,
}

impl ResizePlan {
    pub fn new(src: usize, dst: usize) -> Result<Self> {
        if src < 2 || dst < 2 {
            return Err(Error::shape(
                "resize_linear",
                format!("need at least 2 samples on both sides, got {src} -> {dst}"),
            ));
        }
        let taps = (0..dst)
            .map(|t| {
                let u = (t * (src - 1)) as f64 / (dst - 1) as f64;
                let i0 = (u.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, u - i0 as f64)
            })
            .collect();
        Ok(Self { src, taps })
    }

    pub fn dst(&self) -> usize {
        self.taps.len()
    }

    /// Resample rows of `x` (`src x C`). Computed as `x0 + w (x1 - x0)` so that
    /// constant runs are reproduced exactly.
    pub fn apply<F: Real>(&self, x: &Array2<F>) -> Array2<F> {
        debug_assert_eq!(x.nrows(), self.src);
        let mut y = Array2::zeros((self.dst(), x.ncols()));
        for (t, &(i0, i1, w)) in self.taps.iter().enumerate() {
            let w = F::c(w);
            let (a, b) = (x.row(i0), x.row(i1));
            for (out, (&x0, &x1)) in y.row_mut(t).iter_mut().zip(a.iter().zip(b.iter())) {
                *out = x0 + w * (x1 - x0);
            }
        }
        y
    }

    pub fn adjoint<F: Real>(&self, dy: &Array2<F>) -> Array2<F> {
        let mut dx = Array2::zeros((self.src, dy.ncols()));
        for (t, &(i0, i1, w)) in self.taps.iter().enumerate() {
            let w = F::c(w);
            let g = dy.row(t);
            dx.row_mut(i0).scaled_add(F::one() - w, &g);
            dx.row_mut(i1).scaled_add(w, &g);
        }
        dx
    }
}

/// Resample an `L x C` sequence to `T x C`, each channel independently.
pub fn resize_linear<F: Real>(x: &Array2<F>, target: usize) -> Result<Array2<F>> {
    Ok(ResizePlan::new(x.nrows(), target)?.apply(x))
}

// ---------------------------------------------------------------------------
// Configuration

/// One convolution branch of a sub-block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub kernel: usize,
    pub dilation: usize,
}

impl Branch {
    pub const fn new(kernel: usize, dilation: usize) -> Self {
        Self { kernel, dilation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubBlockConfig {
    pub branches: Vec<Branch>,
    pub pool_kernel: usize,
}

impl SubBlockConfig {
    /// Kernels 1/3/3/5 with rates 1/1/2/1.
    pub fn mixed() -> Self {
        Self {
            branches: vec![Branch::new(1, 1), Branch::new(3, 1), Branch::new(3, 2), Branch::new(5, 1)],
            pool_kernel: 5,
        }
    }

    /// Kernel 3 everywhere with rates 1, 2, 3, 4.
    pub fn k3_rates_1234() -> Self {
        Self {
            branches: (1..=4).map(|d| Branch::new(3, d)).collect(),
            pool_kernel: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.len() < 2 {
            return Err(Error::validation("sub-block", "need at least 2 branches"));
        }
        for b in &self.branches {
            if b.kernel % 2 == 0 || b.dilation == 0 {
                return Err(Error::validation(
                    "sub-block",
                    format!("branch {b:?}: kernel must be odd and dilation >= 1"),
                ));
            }
        }
        if self.pool_kernel % 2 == 0 {
            return Err(Error::validation("sub-block", "pooling kernel must be odd"));
        }
        Ok(())
    }
}

impl Default for SubBlockConfig {
    fn default() -> Self {
        Self::mixed()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StbConfig {
    pub num_blocks: usize,
    pub scale: SubBlockConfig,
    pub time: SubBlockConfig,
    #[serde(default)]
    pub disable_scale: bool,
    #[serde(default)]
    pub disable_time: bool,
    /// Average branch outputs with fixed `1/m` weights.
    #[serde(default)]
    pub disable_selection: bool,
    /// Force every dilation rate to 1.
    #[serde(default)]
    pub unified_dilation: bool,
    /// When false the blocks are skipped entirely (plain multi-scale detector).
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

impl Default for StbConfig {
    fn default() -> Self {
        Self {
            num_blocks: 3,
            scale: SubBlockConfig::mixed(),
            time: SubBlockConfig::mixed(),
            disable_scale: false,
            disable_time: false,
            disable_selection: false,
            unified_dilation: false,
            enabled: true,
        }
    }
}

impl StbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.num_blocks == 0 {
            return Err(Error::validation("scale-time blocks", "num_blocks must be >= 1"));
        }
        self.scale.validate()?;
        self.time.validate()
    }

    fn effective(&self, sub: &SubBlockConfig) -> SubBlockConfig {
        let mut sub = sub.clone();
        if self.unified_dilation {
            for b in &mut sub.branches {
                b.dilation = 1;
            }
        }
        sub
    }
}

// ---------------------------------------------------------------------------
// Scale-time features

/// Per-level pointwise embedding followed by resampling and stacking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StfBuilder {
    embeds: Vec<Linear>,
}

pub struct StfCache {
    plans: Vec<ResizePlan>,
}

impl StfBuilder {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, levels: usize, in_dim: usize, dim: usize, rng: &mut R) -> Self {
        let embeds = (0..levels)
            .map(|i| Linear::new(store, &format!("stf.embed{}", i + 1), in_dim, dim, rng))
            .collect();
        Self { embeds }
    }

    pub fn embeds(&self) -> &[Linear] {
        &self.embeds
    }

    pub fn forward<F: Real>(&self, params: &ParamStore<F>, b: &MultiScaleFeatures<F>) -> Result<(Stt<F>, StfCache)> {
        if b.levels.len() != self.embeds.len() {
            return Err(Error::shape(
                "build_stf",
                format!("{} levels for {} embeddings", b.levels.len(), self.embeds.len()),
            ));
        }
        build_stf_with(params, &self.embeds, b)
    }

    pub fn backward<F: Real>(
        &self,
        params: &ParamStore<F>,
        b: &MultiScaleFeatures<F>,
        cache: &StfCache,
        d_stf: &Stt<F>,
        grads: &mut Grads<F>,
    ) -> Vec<Stt<F>> {
        let t = d_stf.time();
        self.embeds
            .iter()
            .enumerate()
            .map(|(i, embed)| {
                let d_rows = d_stf.data().slice(s![i * t..(i + 1) * t, ..]).to_owned();
                let d_emb = cache.plans[i].adjoint(&d_rows);
                let level = &b.levels[i];
                level.with_data(embed.backward_rows(params, level.data(), &d_emb, grads))
            })
            .collect()
    }
}

/// `STF = Stack_i(Resize(Conv1x1_i(B_i), T))` with `T` the finest level length.
pub fn build_stf<F: Real>(params: &ParamStore<F>, embeds: &[Linear], b: &MultiScaleFeatures<F>) -> Result<Stt<F>> {
    build_stf_with(params, embeds, b).map(|(x, _)| x)
}

fn build_stf_with<F: Real>(
    params: &ParamStore<F>,
    embeds: &[Linear],
    b: &MultiScaleFeatures<F>,
) -> Result<(Stt<F>, StfCache)> {
    let first = b
        .levels
        .first()
        .ok_or_else(|| Error::shape("build_stf", "no levels"))?;
    let t = first.time();
    let dim = embeds[0].out_dim;
    let scales = b.levels.len();
    let mut out = Array2::zeros((scales * t, dim));
    let mut plans = Vec::with_capacity(scales);
    for (i, (level, embed)) in b.levels.iter().zip(embeds).enumerate() {
        let e = embed.forward_rows(params, level.data());
        let plan = ResizePlan::new(level.time(), t)?;
        out.slice_mut(s![i * t..(i + 1) * t, ..]).assign(&plan.apply(&e));
        plans.push(plan);
    }
    Ok((Stt::new(scales, t, out)?, StfCache { plans }))
}

// ---------------------------------------------------------------------------
// Selection module

/// Attention-style fusion of `m` branch outputs.
///
/// `A = softmax(Conv1x1_{D->m}(ReLU(Conv1x1_{D->D}(AvgPool_axis(X)))))`,
/// `out = sum_i A_i * O_i` with `A_i` broadcast over channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionModule {
    pub axis: ConvAxis,
    pub pool_kernel: usize,
    pub branches: usize,
    /// `None` means fixed uniform weights.
    layers: Option<(Linear, Linear)>,
}

pub struct SelectionCache<F> {
    agg: Array2<F>,
    hidden: Array2<F>,
    /// Per-position branch weights, `(S*T) x m`.
    pub weights: Array2<F>,
}

impl SelectionModule {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        axis: ConvAxis,
        pool_kernel: usize,
        dim: usize,
        branches: usize,
        learned: bool,
        rng: &mut R,
    ) -> Self {
        let layers = learned.then(|| {
            (
                Linear::new(store, &format!("{name}.hidden"), dim, dim, rng),
                Linear::new(store, &format!("{name}.logits"), dim, branches, rng),
            )
        });
        Self { axis, pool_kernel, branches, layers }
    }

    pub fn logits_layer(&self) -> Option<&Linear> {
        self.layers.as_ref().map(|(_, l)| l)
    }

    pub fn is_learned(&self) -> bool {
        self.layers.is_some()
    }

    pub fn forward<F: Real>(
        &self,
        params: &ParamStore<F>,
        x: &Stt<F>,
        outs: &[Stt<F>],
    ) -> Result<(Stt<F>, SelectionCache<F>)> {
        if outs.len() != self.branches {
            return Err(Error::shape(
                "selection module",
                format!("{} branch outputs for {} selection weights", outs.len(), self.branches),
            ));
        }
        if let Some(o) = outs.iter().find(|o| !o.same_layout(x)) {
            return Err(Error::shape(
                "selection module",
                format!("branch output {:?} does not match input {:?}", o.shape(), x.shape()),
            ));
        }
        let rows = x.data().nrows();
        let (agg, hidden, weights) = match &self.layers {
            Some((h, l)) => {
                let agg = avg_pool_axis(x, self.axis, self.pool_kernel).into_data();
                let hidden = h.forward_rows(params, &agg).mapv(|v| v.max(F::zero()));
                let logits = l.forward_rows(params, &hidden);
                (agg, hidden, softmax_rows(&logits))
            }
            None => {
                let w = F::one() / F::c(self.branches as f64);
                (Array2::zeros((0, 0)), Array2::zeros((0, 0)), Array2::from_elem((rows, self.branches), w))
            }
        };
        let mut y = Array2::zeros(x.data().raw_dim());
        for (i, o) in outs.iter().enumerate() {
            let a = weights.column(i).insert_axis(Axis(1));
            y += &(&a * o.data());
        }
        Ok((x.with_data(y), SelectionCache { agg, hidden, weights }))
    }

    /// Returns gradients w.r.t. each branch output and w.r.t. the input `x`
    /// through the weight-prediction path.
    pub fn backward<F: Real>(
        &self,
        params: &ParamStore<F>,
        x: &Stt<F>,
        outs: &[Stt<F>],
        cache: &SelectionCache<F>,
        dy: &Stt<F>,
        grads: &mut Grads<F>,
    ) -> (Vec<Stt<F>>, Option<Stt<F>>) {
        let d_outs = (0..self.branches)
            .map(|i| {
                let a = cache.weights.column(i).insert_axis(Axis(1));
                x.with_data(&a * dy.data())
            })
            .collect();
        let Some((h, l)) = &self.layers else {
            return (d_outs, None);
        };
        let rows = x.data().nrows();
        let mut d_weights = Array2::zeros((rows, self.branches));
        for (i, o) in outs.iter().enumerate() {
            let dots = (o.data() * dy.data()).sum_axis(Axis(1));
            d_weights.column_mut(i).assign(&dots);
        }
        let d_logits = softmax_rows_backward(&cache.weights, &d_weights);
        let mut d_hidden = l.backward_rows(params, &cache.hidden, &d_logits, grads);
        d_hidden.zip_mut_with(&cache.hidden, |d, &v| {
            if v <= F::zero() {
                *d = F::zero();
            }
        });
        let d_agg = h.backward_rows(params, &cache.agg, &d_hidden, grads);
        let dx = avg_pool_axis(&x.with_data(d_agg), self.axis, self.pool_kernel);
        (d_outs, Some(dx))
    }
}

/// Fuse `outs` with the given selection module.
pub fn selection_module<F: Real>(
    params: &ParamStore<F>,
    module: &SelectionModule,
    x: &Stt<F>,
    outs: &[Stt<F>],
) -> Result<(Stt<F>, Array2<F>)> {
    module.forward(params, x, outs).map(|(y, c)| (y, c.weights))
}

// ---------------------------------------------------------------------------
// Sub-blocks and blocks

/// Parallel dilated convolutions along one axis, fused by a selection module,
/// followed by a residual connection and ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubBlock {
    pub axis: ConvAxis,
    pub branches: Vec<AxisConv>,
    pub selection: SelectionModule,
}

pub struct SubBlockCache<F> {
    input: Stt<F>,
    outs: Vec<Stt<F>>,
    selection: SelectionCache<F>,
    output: Stt<F>,
}

impl<F> SubBlockCache<F> {
    pub fn selection_weights(&self) -> &Array2<F> {
        &self.selection.weights
    }
}

impl SubBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        axis: ConvAxis,
        config: &SubBlockConfig,
        dim: usize,
        learned_selection: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if config.branches.is_empty() {
            return Err(Error::validation("sub-block", "no branches"));
        }
        let branches = config
            .branches
            .iter()
            .enumerate()
            .map(|(i, b)| AxisConv::new(store, &format!("{name}.branch{i}"), axis, b.kernel, b.dilation, dim, dim, rng))
            .collect::<Result<Vec<_>>>()?;
        let selection = SelectionModule::new(
            store,
            &format!("{name}.select"),
            axis,
            config.pool_kernel,
            dim,
            branches.len(),
            learned_selection,
            rng,
        );
        Ok(Self { axis, branches, selection })
    }

    /// Furthest index along the axis that can affect an output position.
    pub fn radius(&self) -> usize {
        self.branches.iter().map(|b| b.radius()).max().unwrap_or(0)
    }

    pub fn forward<F: Real>(&self, params: &ParamStore<F>, x: &Stt<F>) -> Result<(Stt<F>, SubBlockCache<F>)> {
        let outs: Vec<Stt<F>> = self.branches.iter().map(|b| b.forward(params, x)).collect();
        let (fused, selection) = self.selection.forward(params, x, &outs)?;
        let mut pre = fused.into_data();
        pre += x.data();
        let output = relu(&x.with_data(pre));
        Ok((
            output.clone(),
            SubBlockCache { input: x.clone(), outs, selection, output },
        ))
    }

    pub fn backward<F: Real>(&self, params: &ParamStore<F>, cache: &SubBlockCache<F>, dy: &Stt<F>, grads: &mut Grads<F>) -> Stt<F> {
        let d_pre = relu_backward(&cache.output, dy);
        let (d_outs, d_sel) = self
            .selection
            .backward(params, &cache.input, &cache.outs, &cache.selection, &d_pre, grads);
        let mut dx = d_pre.into_data();
        if let Some(d) = d_sel {
            dx += d.data();
        }
        for (branch, d_o) in self.branches.iter().zip(&d_outs) {
            dx += branch.backward(params, &cache.input, d_o, grads).data();
        }
        cache.input.with_data(dx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTimeBlock {
    pub scale: Option<SubBlock>,
    pub time: Option<SubBlock>,
}

/// `N` stacked scale-time blocks; a disabled sub-block is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTimeBlocks {
    pub config: StbConfig,
    pub blocks: Vec<ScaleTimeBlock>,
}

pub struct StbCache<F> {
    pub subs: Vec<(Option<SubBlockCache<F>>, Option<SubBlockCache<F>>)>,
}

impl ScaleTimeBlocks {
    pub fn new<F: Real, R: Rng>(config: StbConfig, store: &mut ParamStore<F>, dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let learned = !config.disable_selection;
        let blocks = if config.enabled {
            let scale_cfg = config.effective(&config.scale);
            let time_cfg = config.effective(&config.time);
            (0..config.num_blocks)
                .map(|n| {
                    let scale = (!config.disable_scale)
                        .then(|| SubBlock::new(store, &format!("stb{n}.scale"), ConvAxis::Scale, &scale_cfg, dim, learned, rng))
                        .transpose()?;
                    let time = (!config.disable_time)
                        .then(|| SubBlock::new(store, &format!("stb{n}.time"), ConvAxis::Time, &time_cfg, dim, learned, rng))
                        .transpose()?;
                    Ok(ScaleTimeBlock { scale, time })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self { config, blocks })
    }

    pub fn forward<F: Real>(&self, params: &ParamStore<F>, stf: &Stt<F>) -> Result<(Stt<F>, StbCache<F>)> {
        let mut x = stf.clone();
        let mut subs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let sc = match &block.scale {
                Some(sb) => {
                    let (y, c) = sb.forward(params, &x)?;
                    x = y;
                    Some(c)
                }
                None => None,
            };
            let tc = match &block.time {
                Some(sb) => {
                    let (y, c) = sb.forward(params, &x)?;
                    x = y;
                    Some(c)
                }
                None => None,
            };
            subs.push((sc, tc));
        }
        Ok((x, StbCache { subs }))
    }

    pub fn backward<F: Real>(&self, params: &ParamStore<F>, cache: &StbCache<F>, dy: &Stt<F>, grads: &mut Grads<F>) -> Stt<F> {
        let mut d = dy.clone();
        for (block, (sc, tc)) in self.blocks.iter().zip(&cache.subs).rev() {
            if let (Some(sb), Some(c)) = (&block.time, tc) {
                d = sb.backward(params, c, &d, grads);
            }
            if let (Some(sb), Some(c)) = (&block.scale, sc) {
                d = sb.backward(params, c, &d, grads);
            }
        }
        d
    }
}

/// Convenience wrapper returning only the block output.
pub fn stb_forward<F: Real>(params: &ParamStore<F>, blocks: &ScaleTimeBlocks, stf: &Stt<F>) -> Result<Stt<F>> {
    blocks.forward(params, stf).map(|(y, _)| y)
}
