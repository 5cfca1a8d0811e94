//! Cross-modal feature rectification.
//!
//! Each modality's feature map is calibrated with weights derived from both
//! modalities, in two complementary ways:
//!
//! * **channel-wise**: global average and max pooling of both inputs are
//!   concatenated into `Y`, passed through a two-layer MLP
//!   (`k·2C → C → 2C`, ReLU between) and a sigmoid, then split into one
//!   weight vector per modality;
//! * **spatial-wise**: the channel concatenation of both inputs goes through
//!   two 1×1 convolutions (`2C → C → 2`, ReLU between) and a sigmoid, then is
//!   split into one weight map per modality.
//!
//! The rectification term for a modality is the *other* modality's feature
//! scaled by the other modality's weights:
//!
//! ```text
//! rgb_out = rgb + λc · (w_x ⊙c x) + λs · (m_x ⊙s x)
//! x_out   = x   + λc · (w_rgb ⊙c rgb) + λs · (m_rgb ⊙s rgb)
//! ```
//!
//! In `Y` the pools are ordered `(avg_rgb, max_rgb, avg_x, max_x)`, and the
//! first half of every split belongs to RGB.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::join;
use crate::numerics::kernels::{self, Pointwise, PoolKind};
use crate::numerics::{Activation, Conv1x1, Linear, Param, Parameterized, Rng, Scalar, Tensor};

/// Which global pools feed the channel-weight MLP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    Both,
    AvgOnly,
    MaxOnly,
}

impl PoolMode {
    pub fn kinds(self) -> &'static [PoolKind] {
        match self {
            PoolMode::Both => &[PoolKind::Avg, PoolKind::Max],
            PoolMode::AvgOnly => &[PoolKind::Avg],
            PoolMode::MaxOnly => &[PoolKind::Max],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectifyConfig {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub pool_mode: PoolMode,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self {
            lambda_c: 0.5,
            lambda_s: 0.5,
            pool_mode: PoolMode::Both,
        }
    }
}

impl RectifyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_s", self.lambda_s)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Post-sigmoid channel weights, one vector of length `C` per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights<F = f32> {
    pub w_rgb: Tensor<F>,
    pub w_x: Tensor<F>,
}

/// Post-sigmoid spatial weight maps, one `H × W` map per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialWeights<F = f32> {
    pub m_rgb: Tensor<F>,
    pub m_x: Tensor<F>,
}

/// Channel-wise rectification terms: `(w_x ⊙ x, w_rgb ⊙ rgb)`.
pub fn channel_rectify<F: Scalar>(
    rgb: &Tensor<F>,
    x: &Tensor<F>,
    cw: &ChannelWeights<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    Ok((
        kernels::mul_channels(x, &cw.w_x)?,
        kernels::mul_channels(rgb, &cw.w_rgb)?,
    ))
}

/// Spatial-wise rectification terms: `(m_x ⊙ x, m_rgb ⊙ rgb)`.
pub fn spatial_rectify<F: Scalar>(
    rgb: &Tensor<F>,
    x: &Tensor<F>,
    sw: &SpatialWeights<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    Ok((kernels::mul_pixels(x, &sw.m_x)?, kernels::mul_pixels(rgb, &sw.m_rgb)?))
}

/// Residual combination of the rectification terms. A missing weight set
/// contributes nothing.
pub fn combine<F: Scalar>(
    rgb: &Tensor<F>,
    x: &Tensor<F>,
    cw: Option<&ChannelWeights<F>>,
    sw: Option<&SpatialWeights<F>>,
    lambda_c: f64,
    lambda_s: f64,
) -> Result<(Tensor<F>, Tensor<F>)> {
    rgb.expect_same_shape(x, "cm_frm")?;
    let mut rgb_out = rgb.clone();
    let mut x_out = x.clone();
    if let Some(cw) = cw {
        let (r, xr) = channel_rectify(rgb, x, cw)?;
        rgb_out.axpy(F::of(lambda_c), &r)?;
        x_out.axpy(F::of(lambda_c), &xr)?;
    }
    if let Some(sw) = sw {
        let (r, xr) = spatial_rectify(rgb, x, sw)?;
        rgb_out.axpy(F::of(lambda_s), &r)?;
        x_out.axpy(F::of(lambda_s), &xr)?;
    }
    Ok((rgb_out, x_out))
}

#[derive(Clone, Debug)]
struct Cache<F> {
    rgb: Tensor<F>,
    x: Tensor<F>,
    channel: Option<ChannelWeights<F>>,
    spatial: Option<SpatialWeights<F>>,
}

/// One rectification block with its learnable weights.
///
/// Parameters in checkpoint order: `mlp1.w` (`k·2C × C`), `mlp1.b`,
/// `mlp2.w` (`C × 2C`), `mlp2.b`, `sconv1.w` (`2C × C`), `sconv1.b`,
/// `sconv2.w` (`C × 2`), `sconv2.b`, where `k` is the number of pools.
#[derive(Clone, Debug)]
pub struct CmFrm<F = f32> {
    pub channels: usize,
    pub config: RectifyConfig,
    pub mlp1: Linear<F>,
    pub mlp2: Linear<F>,
    pub sconv1: Conv1x1<F>,
    pub sconv2: Conv1x1<F>,
    mlp_act: Activation<F>,
    sconv_act: Activation<F>,
    cache: Option<Cache<F>>,
}

impl<F: Scalar> CmFrm<F> {
    pub fn new(channels: usize, config: RectifyConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = channels;
        let k = config.pool_mode.kinds().len();
        Ok(Self {
            channels,
            config,
            mlp1: Linear::new(2 * k * c, c, true, rng)?,
            mlp2: Linear::new(c, 2 * c, true, rng)?,
            sconv1: Conv1x1::new(2 * c, c, rng)?,
            sconv2: Conv1x1::new(c, 2, rng)?,
            mlp_act: Activation::new(Pointwise::Relu),
            sconv_act: Activation::new(Pointwise::Relu),
            cache: None,
        })
    }

    pub fn cast<G: Scalar>(&self) -> CmFrm<G> {
        CmFrm {
            channels: self.channels,
            config: self.config,
            mlp1: self.mlp1.cast(),
            mlp2: self.mlp2.cast(),
            sconv1: self.sconv1.cast(),
            sconv2: self.sconv2.cast(),
            mlp_act: Activation::new(Pointwise::Relu),
            sconv_act: Activation::new(Pointwise::Relu),
            cache: None,
        }
    }

    fn check_inputs(&self, rgb: &Tensor<F>, x: &Tensor<F>) -> Result<()> {
        rgb.expect_same_shape(x, "cm_frm")?;
        let (_, _, c) = rgb.hwc()?;
        if c != self.channels {
            return Err(Error::InvalidShape {
                shape: rgb.shape().to_vec(),
                reason: format!("rectification block expects {} channels", self.channels),
            });
        }
        Ok(())
    }

    /// Pooled descriptor `Y` as a `1 × (k·2C)` row.
    pub fn pooled_descriptor(&self, rgb: &Tensor<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut y = Vec::with_capacity(self.mlp1.in_features());
        for src in [rgb, x] {
            for &kind in self.config.pool_mode.kinds() {
                y.extend_from_slice(kernels::global_pool(kind, src)?.data());
            }
        }
        Tensor::new(&[1, y.len()], y)
    }

    /// Channel weights from pooled statistics of both modalities.
    pub fn channel_weights(&mut self, rgb: &Tensor<F>, x: &Tensor<F>) -> Result<ChannelWeights<F>> {
        self.check_inputs(rgb, x)?;
        let y = self.pooled_descriptor(rgb, x)?;
        let h = self.mlp1.forward(&y)?;
        let h = self.mlp_act.forward(&h);
        let w = kernels::pointwise(Pointwise::Sigmoid, &self.mlp2.forward(&h)?);
        let c = self.channels;
        Ok(ChannelWeights {
            w_rgb: Tensor::new(&[c], w.data()[..c].to_vec())?,
            w_x: Tensor::new(&[c], w.data()[c..].to_vec())?,
        })
    }

    /// Spatial weight maps from the channel concatenation of both modalities.
    pub fn spatial_weights(&mut self, rgb: &Tensor<F>, x: &Tensor<F>) -> Result<SpatialWeights<F>> {
        self.check_inputs(rgb, x)?;
        let cat = kernels::concat_last(rgb, x)?;
        let h = self.sconv1.forward(&cat)?;
        let h = self.sconv_act.forward(&h);
        let f = kernels::pointwise(Pointwise::Sigmoid, &self.sconv2.forward(&h)?);
        Ok(SpatialWeights {
            m_rgb: f.channel(0)?,
            m_x: f.channel(1)?,
        })
    }

    /// Rectifies both inputs. A path whose λ is zero is not evaluated.
    pub fn forward(&mut self, rgb: &Tensor<F>, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        self.check_inputs(rgb, x)?;
        let channel = if self.config.lambda_c != 0.0 {
            Some(self.channel_weights(rgb, x)?)
        } else {
            None
        };
        let spatial = if self.config.lambda_s != 0.0 {
            Some(self.spatial_weights(rgb, x)?)
        } else {
            None
        };
        let out = combine(
            rgb,
            x,
            channel.as_ref(),
            spatial.as_ref(),
            self.config.lambda_c,
            self.config.lambda_s,
        )?;
        self.cache = Some(Cache {
            rgb: rgb.clone(),
            x: x.clone(),
            channel,
            spatial,
        });
        Ok(out)
    }

    /// Weights computed by the last forward pass.
    pub fn last_weights(&self) -> Option<(Option<&ChannelWeights<F>>, Option<&SpatialWeights<F>>)> {
        self.cache.as_ref().map(|c| (c.channel.as_ref(), c.spatial.as_ref()))
    }

    /// Gradients with respect to `(rgb, x)` given gradients of `(rgb_out, x_out)`.
    pub fn backward(&mut self, g_rgb: &Tensor<F>, g_x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let cache = self.cache.take().ok_or(Error::BackwardBeforeForward("cm_frm"))?;
        let result = self.backward_cached(&cache, g_rgb, g_x);
        self.cache = Some(cache);
        result
    }

    fn backward_cached(
        &mut self,
        cache: &Cache<F>,
        g_rgb: &Tensor<F>,
        g_x: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let (rgb, x) = (&cache.rgb, &cache.x);
        g_rgb.expect_same_shape(rgb, "cm_frm backward")?;
        g_x.expect_same_shape(x, "cm_frm backward")?;
        let lc = F::of(self.config.lambda_c);
        let ls = F::of(self.config.lambda_s);
        let mut d_rgb = g_rgb.clone();
        let mut d_x = g_x.clone();

        if let Some(cw) = &cache.channel {
            // direct terms through the weighted features
            d_rgb.axpy(lc, &kernels::mul_channels(g_x, &cw.w_rgb)?)?;
            d_x.axpy(lc, &kernels::mul_channels(g_rgb, &cw.w_x)?)?;
            // gradient of the weights themselves
            let dw_rgb = kernels::channel_dot(g_x, rgb)?.scale(lc);
            let dw_x = kernels::channel_dot(g_rgb, x)?.scale(lc);
            let (dr, dx) = self.channel_weights_backward(cw, &dw_rgb, &dw_x, rgb, x)?;
            d_rgb.add_assign(&dr)?;
            d_x.add_assign(&dx)?;
        }

        if let Some(sw) = &cache.spatial {
            d_rgb.axpy(ls, &kernels::mul_pixels(g_x, &sw.m_rgb)?)?;
            d_x.axpy(ls, &kernels::mul_pixels(g_rgb, &sw.m_x)?)?;
            let dm_rgb = kernels::pixel_dot(g_x, rgb)?.scale(ls);
            let dm_x = kernels::pixel_dot(g_rgb, x)?.scale(ls);
            let (dr, dx) = self.spatial_weights_backward(sw, &dm_rgb, &dm_x)?;
            d_rgb.add_assign(&dr)?;
            d_x.add_assign(&dx)?;
        }

        Ok((d_rgb, d_x))
    }

    fn channel_weights_backward(
        &mut self,
        cw: &ChannelWeights<F>,
        dw_rgb: &Tensor<F>,
        dw_x: &Tensor<F>,
        rgb: &Tensor<F>,
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let c = self.channels;
        // sigmoid' expressed through its output
        let mut d_pre = Vec::with_capacity(2 * c);
        for (w, g) in [(&cw.w_rgb, dw_rgb), (&cw.w_x, dw_x)] {
            d_pre.extend(w.data().iter().zip(g.data()).map(|(&s, &g)| g * s * (F::one() - s)));
        }
        let d_pre = Tensor::new(&[1, 2 * c], d_pre)?;
        let d_h = self.mlp2.backward(&d_pre)?;
        let d_h = self.mlp_act.backward(&d_h)?;
        let d_y = self.mlp1.backward(&d_h)?;

        let kinds = self.config.pool_mode.kinds();
        let mut grads = [rgb.zeros_like(), x.zeros_like()];
        let mut offset = 0;
        for (m, src) in [rgb, x].into_iter().enumerate() {
            for &kind in kinds {
                let g = Tensor::new(&[c], d_y.data()[offset..offset + c].to_vec())?;
                grads[m].add_assign(&kernels::global_pool_backward(kind, src, &g)?)?;
                offset += c;
            }
        }
        let [dr, dx] = grads;
        Ok((dr, dx))
    }

    fn spatial_weights_backward(
        &mut self,
        sw: &SpatialWeights<F>,
        dm_rgb: &Tensor<F>,
        dm_x: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let (h, w) = (sw.m_rgb.shape()[0], sw.m_rgb.shape()[1]);
        let mut d_pre = Vec::with_capacity(2 * h * w);
        for i in 0..h * w {
            for (m, g) in [(&sw.m_rgb, dm_rgb), (&sw.m_x, dm_x)] {
                let s = m[i];
                d_pre.push(g[i] * s * (F::one() - s));
            }
        }
        let d_pre = Tensor::new(&[h, w, 2], d_pre)?;
        let d_h = self.sconv2.backward(&d_pre)?;
        let d_h = self.sconv_act.backward(&d_h)?;
        let d_cat = self.sconv1.backward(&d_h)?;
        kernels::split_last(&d_cat, self.channels)
    }
}

impl<F: Scalar> Parameterized<F> for CmFrm<F> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        self.mlp1.collect_params(&join(prefix, "mlp1"), out);
        self.mlp2.collect_params(&join(prefix, "mlp2"), out);
        self.sconv1.collect_params(&join(prefix, "sconv1"), out);
        self.sconv2.collect_params(&join(prefix, "sconv2"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        self.mlp1.collect_params_mut(&join(prefix, "mlp1"), out);
        self.mlp2.collect_params_mut(&join(prefix, "mlp2"), out);
        self.sconv1.collect_params_mut(&join(prefix, "sconv1"), out);
        self.sconv2.collect_params_mut(&join(prefix, "sconv2"), out);
    }
}
