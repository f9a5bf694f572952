//! Full detector: backbone, scale-time features, scale-time blocks and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache, BackboneConfig, MultiScaleFeatures};
use crate::data::{FeatureSequence, VideoAnnotation};
use crate::error::{Error, Result};
use crate::heads::{
    assign_targets, focal_loss, iou_loss, total_loss, AssignMode, HeadConfig, HeadOutputs, Heads, HeadsCache,
    LevelRanges, TargetMap,
};
use crate::nn::{Grads, ParamStore, ScaleTimeTensor};
use crate::real::Real;
use crate::scaletime::{ScaleTimeBlocks, StbCache, StbConfig, StfBuilder, StfCache, SubBlockConfig};

type Stt<F> = ScaleTimeTensor<F>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    /// Plain multi-scale detector: no scale-time blocks, time-only heads.
    Baseline,
    /// Full model with scale-time blocks.
    Brn,
}

impl std::str::FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "brn" => Ok(Self::Brn),
            other => Err(Error::validation("model preset", format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoScale,
    NoTime,
    NoSelection,
    NoDilation,
    K3Rates1234,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Self::NoScale, Self::NoTime, Self::NoSelection, Self::NoDilation, Self::K3Rates1234];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoScale => "no-scale",
            Self::NoTime => "no-time",
            Self::NoSelection => "no-selection",
            Self::NoDilation => "no-dilation",
            Self::K3Rates1234 => "k3-rates-1234",
        }
    }

    pub fn apply(self, stb: &mut StbConfig) {
        match self {
            Self::NoScale => stb.disable_scale = true,
            Self::NoTime => stb.disable_time = true,
            Self::NoSelection => stb.disable_selection = true,
            Self::NoDilation => stb.unified_dilation = true,
            Self::K3Rates1234 => {
                stb.scale = SubBlockConfig::k3_rates_1234();
                stb.time = SubBlockConfig::k3_rates_1234();
            }
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::validation("ablation", format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_levels: usize,
    pub hidden_dim: usize,
    pub backbone_kernel: usize,
    pub stb: StbConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Full-size configuration: five levels, 256 channels.
    pub fn reference(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            num_classes,
            num_levels: 5,
            hidden_dim: 256,
            backbone_kernel: 3,
            stb: StbConfig::default(),
            head: HeadConfig::default(),
        }
    }

    pub fn preset(preset: ModelPreset, input_dim: usize, num_classes: usize, hidden_dim: usize) -> Self {
        let mut cfg = Self { hidden_dim, ..Self::reference(input_dim, num_classes) };
        if preset == ModelPreset::Baseline {
            cfg.stb.enabled = false;
            cfg.head.scale_conv = false;
        }
        cfg
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        ablation.apply(&mut self.stb);
        self
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            num_levels: self.num_levels,
            hidden_dim: self.hidden_dim,
            kernel_size: self.backbone_kernel,
            input_dim: self.input_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        if self.num_classes == 0 {
            return Err(Error::validation("model", "need at least one action class"));
        }
        if self.head.kernel % 2 == 0 {
            return Err(Error::validation("model", "head kernel must be odd"));
        }
        self.stb.validate()
    }

    pub fn ranges(&self) -> LevelRanges {
        LevelRanges::geometric(self.num_levels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub stf: StfBuilder,
    pub stb: ScaleTimeBlocks,
    pub heads: Heads,
}

pub struct ModelCache<F> {
    backbone: BackboneCache<F>,
    levels: MultiScaleFeatures<F>,
    stf: StfCache,
    stb_in: Stt<F>,
    stb: StbCache<F>,
    head_in: Stt<F>,
    heads: HeadsCache<F>,
}

impl<F> ModelCache<F> {
    /// Per-block scale and time sub-block caches, in block order.
    pub fn stb(&self) -> &StbCache<F> {
        &self.stb
    }

    /// Scale-time features entering the blocks.
    pub fn stf(&self) -> &Stt<F> {
        &self.stb_in
    }
}

impl Model {
    /// Build the layer graph and initialize parameters from `seed`.
    pub fn new<F: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(config.backbone(), &mut store, &mut rng)?;
        let stf = StfBuilder::new(&mut store, config.num_levels, config.hidden_dim, config.hidden_dim, &mut rng);
        let stb = ScaleTimeBlocks::new(config.stb.clone(), &mut store, config.hidden_dim, &mut rng)?;
        let heads = Heads::new(&mut store, &config.head, config.hidden_dim, config.num_classes, &mut rng)?;
        Ok((Self { config, backbone, stf, stb, heads }, store))
    }

    /// Input tensor for a feature sequence.
    pub fn input<F: Real>(&self, seq: &FeatureSequence) -> Result<Stt<F>> {
        if seq.dim != self.config.input_dim {
            return Err(Error::shape(
                "model input",
                format!("video {} has dim {}, model expects {}", seq.video_id, seq.dim, self.config.input_dim),
            ));
        }
        Stt::from_sequence(seq.length, seq.dim, &seq.values)
    }

    pub fn forward<F: Real>(&self, params: &ParamStore<F>, x: &Stt<F>) -> Result<(HeadOutputs<F>, ModelCache<F>)> {
        let (levels, backbone) = self.backbone.forward(params, x)?;
        let (stb_in, stf) = self.stf.forward(params, &levels)?;
        let (head_in, stb) = self.stb.forward(params, &stb_in)?;
        let (outputs, heads) = self.heads.forward(params, &head_in);
        Ok((outputs, ModelCache { backbone, levels, stf, stb_in, stb, head_in, heads }))
    }

    pub fn predict<F: Real>(&self, params: &ParamStore<F>, x: &Stt<F>) -> Result<HeadOutputs<F>> {
        self.forward(params, x).map(|(o, _)| o)
    }

    /// Accumulate parameter gradients given gradients w.r.t. the head outputs.
    pub fn backward<F: Real>(
        &self,
        params: &ParamStore<F>,
        cache: &ModelCache<F>,
        d_class_logits: &Stt<F>,
        d_reg_raw: &Stt<F>,
        grads: &mut Grads<F>,
    ) {
        let d_head_in = self.heads.backward(params, &cache.head_in, &cache.heads, d_class_logits, d_reg_raw, grads);
        let d_stf = self.stb.backward(params, &cache.stb, &d_head_in, grads);
        let d_levels = self.stf.backward(params, &cache.levels, &cache.stf, &d_stf, grads);
        self.backbone.backward(params, &cache.backbone, &cache.levels, d_levels, grads);
    }

    pub fn num_params<F: Real>(params: &ParamStore<F>) -> usize {
        params.num_scalars()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focal-loss focusing exponent.
    pub alpha: f64,
    /// Weight of the regression term.
    pub lambda: f64,
    pub assign: AssignMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 4.0, lambda: 1.0, assign: AssignMode::Dynamic }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub total: f64,
}

/// Targets for one video under the current predictions.
pub fn targets_for<F: Real>(
    model: &Model,
    outputs: &HeadOutputs<F>,
    annotation: &VideoAnnotation,
    mode: AssignMode,
) -> TargetMap {
    let decoded = outputs.decoded();
    assign_targets(
        annotation,
        Some(&decoded),
        &model.config.ranges(),
        outputs.scales(),
        outputs.time(),
        mode,
    )
}

/// Loss and parameter gradients for a single video with fixed targets.
pub fn loss_with_targets<F: Real>(
    model: &Model,
    params: &ParamStore<F>,
    x: &Stt<F>,
    targets: &TargetMap,
    cfg: &LossConfig,
    grads: Option<&mut Grads<F>>,
) -> Result<LossBreakdown> {
    let (outputs, cache) = model.forward(params, x)?;
    Ok(loss_from_outputs(model, params, &outputs, &cache, targets, cfg, grads))
}

fn loss_from_outputs<F: Real>(
    model: &Model,
    params: &ParamStore<F>,
    outputs: &HeadOutputs<F>,
    cache: &ModelCache<F>,
    targets: &TargetMap,
    cfg: &LossConfig,
    grads: Option<&mut Grads<F>>,
) -> LossBreakdown {
    let (l_cls, d_cls) = focal_loss(outputs.class_logits.data(), &targets.class_target, cfg.alpha);
    let (l_reg, mut d_reg) = iou_loss(&outputs.reg_raw, targets);
    let breakdown = LossBreakdown { l_cls, l_reg, total: total_loss(l_cls, l_reg, cfg.lambda) };
    if let Some(grads) = grads {
        d_reg.mapv_inplace(|v| v * F::c(cfg.lambda));
        let d_cls = outputs.class_logits.with_data(d_cls);
        let d_reg = outputs.reg_raw.with_data(d_reg);
        model.backward(params, cache, &d_cls, &d_reg, grads);
    }
    breakdown
}

/// Forward pass, target assignment, loss and (optionally) backward for one video.
pub fn loss_and_grad<F: Real>(
    model: &Model,
    params: &ParamStore<F>,
    x: &Stt<F>,
    annotation: &VideoAnnotation,
    cfg: &LossConfig,
    grads: Option<&mut Grads<F>>,
) -> Result<(LossBreakdown, HeadOutputs<F>)> {
    let (outputs, cache) = model.forward(params, x)?;
    if !outputs.class_logits.is_finite() {
        return Err(Error::NonFinite { tensor: "class_logits".into(), epoch: 0, step: 0 });
    }
    if !outputs.reg_raw.is_finite() {
        return Err(Error::NonFinite { tensor: "reg_raw".into(), epoch: 0, step: 0 });
    }
    let targets = targets_for(model, &outputs, annotation, cfg.assign);
    let loss = loss_from_outputs(model, params, &outputs, &cache, &targets, cfg, grads);
    Ok((loss, outputs))
}
