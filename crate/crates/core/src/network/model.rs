use crate::error::{Error, Result};
use crate::fusion::{average, average_backward, Ffm, FfmMode};
use crate::numerics::kernels::{self, Pointwise};
use crate::numerics::{join, Activation, Conv1x1, Param, Parameterized, Rng, Scalar, Tensor};
use crate::rectify::CmFrm;

use super::config::{NetworkConfig, SecondModality, StageSpec};

/// Patch merging: space-to-depth, 1×1 mix, GELU, 1×1 projection.
#[derive(Clone, Debug)]
pub struct StageBlock<F = f32> {
    pub stride: usize,
    pub mix: Conv1x1<F>,
    pub proj: Conv1x1<F>,
    act: Activation<F>,
}

impl<F: Scalar> StageBlock<F> {
    pub fn new(spec: &StageSpec, rng: &mut Rng) -> Result<Self> {
        let s = spec.downsample;
        Ok(Self {
            stride: s,
            mix: Conv1x1::new(s * s * spec.in_ch, spec.out_ch, rng)?,
            proj: Conv1x1::new(spec.out_ch, spec.out_ch, rng)?,
            act: Activation::new(Pointwise::Gelu),
        })
    }

    pub fn cast<G: Scalar>(&self) -> StageBlock<G> {
        StageBlock {
            stride: self.stride,
            mix: self.mix.cast(),
            proj: self.proj.cast(),
            act: Activation::new(Pointwise::Gelu),
        }
    }

    pub fn forward(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let d = kernels::space_to_depth(x, self.stride)?;
        let m = self.mix.forward(&d)?;
        let a = self.act.forward(&m);
        self.proj.forward(&a)
    }

    pub fn backward(&mut self, upstream: &Tensor<F>) -> Result<Tensor<F>> {
        let da = self.proj.backward(upstream)?;
        let dm = self.act.backward(&da)?;
        let dd = self.mix.backward(&dm)?;
        kernels::depth_to_space(&dd, self.stride)
    }
}

impl<F: Scalar> Parameterized<F> for StageBlock<F> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        self.mix.collect_params(&join(prefix, "mix"), out);
        self.proj.collect_params(&join(prefix, "proj"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        self.mix.collect_params_mut(&join(prefix, "mix"), out);
        self.proj.collect_params_mut(&join(prefix, "proj"), out);
    }
}

/// Projects every fused stage map to `D` channels, upsamples to the first
/// stage resolution, concatenates and classifies.
#[derive(Clone, Debug)]
pub struct Decoder<F = f32> {
    pub proj: Vec<Conv1x1<F>>,
    pub classifier: Conv1x1<F>,
    scales: Vec<usize>,
    out_scale: usize,
}

impl<F: Scalar> Decoder<F> {
    pub fn new(cfg: &NetworkConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.decoder_dim;
        let proj = cfg
            .stages
            .iter()
            .map(|s| Conv1x1::new(s.out_ch, d, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            proj,
            classifier: Conv1x1::new(cfg.stages.len() * d, cfg.classes, rng)?,
            scales: (0..cfg.stages.len()).map(|i| cfg.stage_scale(i)).collect(),
            out_scale: cfg.stages[0].downsample,
        })
    }

    pub fn cast<G: Scalar>(&self) -> Decoder<G> {
        Decoder {
            proj: self.proj.iter().map(Conv1x1::cast).collect(),
            classifier: self.classifier.cast(),
            scales: self.scales.clone(),
            out_scale: self.out_scale,
        }
    }

    pub fn forward(&mut self, feats: &[Tensor<F>]) -> Result<Tensor<F>> {
        if feats.len() != self.proj.len() {
            return Err(Error::InvalidArgument(format!(
                "decoder has {} stages, got {} maps",
                self.proj.len(),
                feats.len()
            )));
        }
        let mut cat: Option<Tensor<F>> = None;
        for ((f, proj), &s) in feats.iter().zip(self.proj.iter_mut()).zip(&self.scales) {
            let up = kernels::upsample_nearest(&proj.forward(f)?, s)?;
            cat = Some(match cat {
                None => up,
                Some(c) => kernels::concat_last(&c, &up)?,
            });
        }
        let logits = self.classifier.forward(&cat.expect("at least one stage"))?;
        kernels::upsample_nearest(&logits, self.out_scale)
    }

    /// Gradient for each stage map.
    pub fn backward(&mut self, upstream: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let g = kernels::upsample_nearest_backward(upstream, self.out_scale)?;
        let mut rest = self.classifier.backward(&g)?;
        let n = self.proj.len();
        let d = rest.shape()[2] / n;
        let mut parts = Vec::with_capacity(n);
        for i in (1..n).rev() {
            let (head, tail) = kernels::split_last(&rest, i * d)?;
            parts.push(tail);
            rest = head;
        }
        parts.push(rest);
        parts.reverse();
        parts
            .iter()
            .zip(self.proj.iter_mut())
            .zip(&self.scales)
            .map(|((g, proj), &s)| proj.backward(&kernels::upsample_nearest_backward(g, s)?))
            .collect()
    }
}

impl<F: Scalar> Parameterized<F> for Decoder<F> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        for (i, p) in self.proj.iter().enumerate() {
            p.collect_params(&join(prefix, &format!("proj{i}")), out);
        }
        self.classifier.collect_params(&join(prefix, "classifier"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        for (i, p) in self.proj.iter_mut().enumerate() {
            p.collect_params_mut(&join(prefix, &format!("proj{i}")), out);
        }
        self.classifier.collect_params_mut(&join(prefix, "classifier"), out);
    }
}

/// Two-stream hierarchical encoder with per-stage rectification and fusion.
///
/// Parameters are created (and enumerated) in the order: X adapter, RGB
/// stages, X stages, rectification modules, fusion modules, decoder. Parts
/// that the ablation switches disable are not constructed at all.
#[derive(Clone, Debug)]
pub struct Network<F = f32> {
    pub config: NetworkConfig,
    pub adapter: Option<Conv1x1<F>>,
    pub rgb_stages: Vec<StageBlock<F>>,
    pub x_stages: Vec<StageBlock<F>>,
    pub rectifiers: Vec<CmFrm<F>>,
    pub fusers: Vec<Ffm<F>>,
    pub decoder: Decoder<F>,
}

impl<F: Scalar> Network<F> {
    pub fn new(config: NetworkConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let ab = config.ablation;
        let two = ab.two_stream();
        let adapter = if two && config.x_channels != 3 {
            Some(Conv1x1::new(config.x_channels, 3, rng)?)
        } else {
            None
        };
        let stream = |rng: &mut Rng| -> Result<Vec<StageBlock<F>>> {
            config.stages.iter().map(|s| StageBlock::new(s, rng)).collect()
        };
        let rgb_stages = stream(rng)?;
        let x_stages = if two { stream(rng)? } else { Vec::new() };
        let rectifiers = if two && ab.use_cm_frm {
            config
                .stages
                .iter()
                .map(|s| CmFrm::new(s.out_ch, ab.rectify_config(), rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let fusers = if two && ab.ffm_mode != FfmMode::Avg {
            config
                .stages
                .iter()
                .map(|s| Ffm::new(s.out_ch, s.n_heads, rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let decoder = Decoder::new(&config, rng)?;
        Ok(Self {
            config,
            adapter,
            rgb_stages,
            x_stages,
            rectifiers,
            fusers,
            decoder,
        })
    }

    pub fn cast<G: Scalar>(&self) -> Network<G> {
        Network {
            config: self.config.clone(),
            adapter: self.adapter.as_ref().map(Conv1x1::cast),
            rgb_stages: self.rgb_stages.iter().map(StageBlock::cast).collect(),
            x_stages: self.x_stages.iter().map(StageBlock::cast).collect(),
            rectifiers: self.rectifiers.iter().map(CmFrm::cast).collect(),
            fusers: self.fusers.iter().map(Ffm::cast).collect(),
            decoder: self.decoder.cast(),
        }
    }

    pub fn two_stream(&self) -> bool {
        !self.x_stages.is_empty()
    }

    /// Copies the RGB stage weights into the X stages.
    pub fn share_streams(&mut self) {
        if self.two_stream() {
            self.x_stages = self.rgb_stages.clone();
        }
    }

    /// Logits `H × W × K`. `x` is ignored by a single-stream network.
    pub fn forward(&mut self, rgb: &Tensor<F>, x: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let (h, w, c) = rgb.hwc()?;
        if c != 3 {
            return Err(Error::InvalidShape {
                shape: rgb.shape().to_vec(),
                reason: "RGB input must have 3 channels".into(),
            });
        }
        self.config.check_input(h, w)?;
        let mode = self.config.ablation.ffm_mode;
        let mut a = rgb.clone();
        let mut b = if self.two_stream() {
            let x = x.ok_or_else(|| Error::InvalidArgument("two-stream network needs a second input".into()))?;
            let (xh, xw, xc) = x.hwc()?;
            if (xh, xw, xc) != (h, w, self.config.x_channels) {
                return Err(Error::shape(
                    "network second input",
                    x.shape(),
                    &[h, w, self.config.x_channels],
                ));
            }
            Some(match self.adapter.as_mut() {
                Some(ad) => ad.forward(x)?,
                None => x.clone(),
            })
        } else {
            None
        };
        let mut fused = Vec::with_capacity(self.rgb_stages.len());
        for i in 0..self.rgb_stages.len() {
            a = self.rgb_stages[i].forward(&a)?;
            match b.as_mut() {
                None => fused.push(a.clone()),
                Some(b) => {
                    *b = self.x_stages[i].forward(b)?;
                    if let Some(r) = self.rectifiers.get_mut(i) {
                        let (ra, rb) = r.forward(&a, b)?;
                        a = ra;
                        *b = rb;
                    }
                    fused.push(match self.fusers.get_mut(i) {
                        Some(f) => f.forward(&a, b, mode)?,
                        None => average(&a, b)?,
                    });
                }
            }
        }
        self.decoder.forward(&fused)
    }

    /// Backpropagates a logits gradient; returns the RGB input gradient and,
    /// for two streams, the X input gradient.
    pub fn backward(&mut self, upstream: &Tensor<F>) -> Result<(Tensor<F>, Option<Tensor<F>>)> {
        let d_fused = self.decoder.backward(upstream)?;
        let two = self.two_stream();
        let mut carry_a: Option<Tensor<F>> = None;
        let mut carry_b: Option<Tensor<F>> = None;
        for i in (0..self.rgb_stages.len()).rev() {
            let (mut ga, mut gb) = if !two {
                (d_fused[i].clone(), None)
            } else {
                let (ga, gb) = match self.fusers.get_mut(i) {
                    Some(f) => f.backward(&d_fused[i])?,
                    None => average_backward(&d_fused[i])?,
                };
                (ga, Some(gb))
            };
            if let Some(c) = carry_a.take() {
                ga.add_assign(&c)?;
            }
            if let (Some(gb), Some(c)) = (gb.as_mut(), carry_b.take()) {
                gb.add_assign(&c)?;
            }
            if let (Some(r), Some(g)) = (self.rectifiers.get_mut(i), gb.as_ref()) {
                let (da, db) = r.backward(&ga, g)?;
                ga = da;
                gb = Some(db);
            }
            carry_a = Some(self.rgb_stages[i].backward(&ga)?);
            if let Some(g) = gb {
                carry_b = Some(self.x_stages[i].backward(&g)?);
            }
        }
        let d_rgb = carry_a.expect("at least one stage");
        let d_x = match (carry_b, self.adapter.as_mut()) {
            (Some(g), Some(ad)) => Some(ad.backward(&g)?),
            (g, _) => g,
        };
        Ok((d_rgb, d_x))
    }
}

impl<F: Scalar> Parameterized<F> for Network<F> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        if let Some(a) = &self.adapter {
            a.collect_params(&join(prefix, "adapter"), out);
        }
        for (i, s) in self.rgb_stages.iter().enumerate() {
            s.collect_params(&join(prefix, &format!("rgb_stage{i}")), out);
        }
        for (i, s) in self.x_stages.iter().enumerate() {
            s.collect_params(&join(prefix, &format!("x_stage{i}")), out);
        }
        for (i, r) in self.rectifiers.iter().enumerate() {
            r.collect_params(&join(prefix, &format!("cm_frm{i}")), out);
        }
        for (i, f) in self.fusers.iter().enumerate() {
            f.collect_params(&join(prefix, &format!("ffm{i}")), out);
        }
        self.decoder.collect_params(&join(prefix, "decoder"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        if let Some(a) = &mut self.adapter {
            a.collect_params_mut(&join(prefix, "adapter"), out);
        }
        for (i, s) in self.rgb_stages.iter_mut().enumerate() {
            s.collect_params_mut(&join(prefix, &format!("rgb_stage{i}")), out);
        }
        for (i, s) in self.x_stages.iter_mut().enumerate() {
            s.collect_params_mut(&join(prefix, &format!("x_stage{i}")), out);
        }
        for (i, r) in self.rectifiers.iter_mut().enumerate() {
            r.collect_params_mut(&join(prefix, &format!("cm_frm{i}")), out);
        }
        for (i, f) in self.fusers.iter_mut().enumerate() {
            f.collect_params_mut(&join(prefix, &format!("ffm{i}")), out);
        }
        self.decoder.collect_params_mut(&join(prefix, "decoder"), out);
    }
}

/// The second network input for an ablation setting: the sensor input, a
/// copy of RGB, seeded noise, or nothing for a single stream.
pub fn second_input(
    modality: SecondModality,
    rgb: &Tensor<f32>,
    x: &Tensor<f32>,
    noise_seed: u64,
) -> Result<Option<Tensor<f32>>> {
    Ok(match modality {
        SecondModality::Real => Some(x.clone()),
        SecondModality::RgbCopy => Some(rgb.clone()),
        SecondModality::Noise => {
            let mut rng = Rng::new(noise_seed);
            Some(Tensor::from_fn(x.shape(), |_| rng.next_f64() as f32)?)
        }
        SecondModality::None => None,
    })
}

/// Per-pixel argmax over the class axis.
pub fn predict<F: Scalar>(logits: &Tensor<F>) -> Result<Vec<u32>> {
    let (_, _, k) = logits.hwc()?;
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect())
}
