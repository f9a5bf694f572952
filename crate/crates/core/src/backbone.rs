//! Convolutional multi-scale backbone: a pointwise projection followed by
//! `S` layers of (temporal conv, ReLU, stride-2 max pool).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    max_pool_time, max_pool_time_backward, relu, relu_backward, AxisConv, ConvAxis, Grads, Linear, ParamStore,
    ScaleTimeTensor,
};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_levels: usize,
    pub hidden_dim: usize,
    pub kernel_size: usize,
    pub input_dim: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels < 2 {
            return Err(Error::validation("backbone", format!("need >= 2 levels, got {}", self.num_levels)));
        }
        if self.hidden_dim == 0 || self.input_dim == 0 {
            return Err(Error::validation("backbone", "zero channel dimension"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::validation("backbone", "kernel size must be odd"));
        }
        Ok(())
    }

    /// Input lengths must be divisible by this.
    pub fn length_multiple(&self) -> usize {
        1 << self.num_levels
    }
}

/// Outputs `B_1..B_S` of the backbone; level `i` has length `T_in / 2^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeatures<F> {
    pub levels: Vec<ScaleTimeTensor<F>>,
}

impl<F: Real> MultiScaleFeatures<F> {
    pub fn lengths(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.time()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    proj: Linear,
    convs: Vec<AxisConv>,
}

#[derive(Debug)]
pub struct BackboneCache<F> {
    input: ScaleTimeTensor<F>,
    projected: ScaleTimeTensor<F>,
    activated: Vec<ScaleTimeTensor<F>>,
    pool_right: Vec<Vec<bool>>,
}

impl Backbone {
    pub fn new<F: Real, R: Rng>(config: BackboneConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let proj = Linear::new(store, "backbone.proj", config.input_dim, config.hidden_dim, rng);
        let convs = (0..config.num_levels)
            .map(|i| {
                AxisConv::new(
                    store,
                    &format!("backbone.level{}.conv", i + 1),
                    ConvAxis::Time,
                    config.kernel_size,
                    1,
                    config.hidden_dim,
                    config.hidden_dim,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, proj, convs })
    }

    pub fn forward<F: Real>(
        &self,
        params: &ParamStore<F>,
        input: &ScaleTimeTensor<F>,
    ) -> Result<(MultiScaleFeatures<F>, BackboneCache<F>)> {
        let multiple = self.config.length_multiple();
        if input.time() % multiple != 0 {
            return Err(Error::shape(
                "backbone",
                format!(
                    "input length {} must be divisible by 2^{} = {multiple}",
                    input.time(),
                    self.config.num_levels
                ),
            ));
        }
        if input.channels() != self.config.input_dim {
            return Err(Error::shape(
                "backbone",
                format!("expected {} input channels, got {}", self.config.input_dim, input.channels()),
            ));
        }
        let projected = self.proj.forward(params, input);
        let mut levels = Vec::with_capacity(self.convs.len());
        let mut activated = Vec::with_capacity(self.convs.len());
        let mut pool_right = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let prev = levels.last().unwrap_or(&projected);
            let a = relu(&conv.forward(params, prev));
            let (pooled, right) = max_pool_time(&a)?;
            activated.push(a);
            pool_right.push(right);
            levels.push(pooled);
        }
        Ok((
            MultiScaleFeatures { levels: levels.clone() },
            BackboneCache { input: input.clone(), projected, activated, pool_right },
        ))
    }

    /// `d_levels[i]` is the loss gradient w.r.t. `B_{i+1}`; returns the input gradient.
    pub fn backward<F: Real>(
        &self,
        params: &ParamStore<F>,
        cache: &BackboneCache<F>,
        outputs: &MultiScaleFeatures<F>,
        mut d_levels: Vec<ScaleTimeTensor<F>>,
        grads: &mut Grads<F>,
    ) -> ScaleTimeTensor<F> {
        let mut carry: Option<ScaleTimeTensor<F>> = None;
        for i in (0..self.convs.len()).rev() {
            let mut d_out = std::mem::replace(&mut d_levels[i], ScaleTimeTensor::zeros(1, 1, 1));
            if let Some(c) = carry.take() {
                *d_out.data_mut() += c.data();
            }
            let d_act = max_pool_time_backward(&cache.activated[i], &cache.pool_right[i], &d_out);
            let d_pre = relu_backward(&cache.activated[i], &d_act);
            let x = if i == 0 { &cache.projected } else { &outputs.levels[i - 1] };
            carry = Some(self.convs[i].backward(params, x, &d_pre, grads));
        }
        let d_proj = carry.expect("at least one level");
        self.proj.backward(params, &cache.input, &d_proj, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(levels: usize, hidden: usize, input_dim: usize) -> (Backbone, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig { num_levels: levels, hidden_dim: hidden, kernel_size: 3, input_dim };
        (Backbone::new(cfg, &mut store, &mut rng).unwrap(), store)
    }

    #[test]
    fn level_lengths_halve() {
        let (bb, store) = build(5, 8, 4);
        let x = ScaleTimeTensor::<f64>::zeros(1, 256, 4);
        let (out, _) = bb.forward(&store, &x).unwrap();
        assert_eq!(out.lengths(), vec![128, 64, 32, 16, 8]);
        assert!(out.levels.iter().all(|l| l.channels() == 8));
    }

    #[test]
    fn default_width_is_256() {
        let (bb, store) = build(5, 256, 16);
        let x = ScaleTimeTensor::<f64>::zeros(1, 64, 16);
        let (out, _) = bb.forward(&store, &x).unwrap();
        assert!(out.levels.iter().all(|l| l.channels() == 256));
    }

    #[test]
    fn zero_input_zero_output() {
        let (bb, store) = build(3, 6, 5);
        let x = ScaleTimeTensor::<f64>::zeros(1, 32, 5);
        let (out, _) = bb.forward(&store, &x).unwrap();
        assert!(out.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn indivisible_length_is_shape_error() {
        let (bb, store) = build(5, 4, 2);
        let x = ScaleTimeTensor::<f64>::zeros(1, 100, 2);
        let err = bb.forward(&store, &x).unwrap_err();
        assert!(err.to_string().contains("divisible by 2^5 = 32"), "{err}");
    }
}
