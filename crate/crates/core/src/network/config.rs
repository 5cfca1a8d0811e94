use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FfmMode;
use crate::rectify::{PoolMode, RectifyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub downsample: usize,
    pub n_heads: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RectifyMode {
    #[default]
    Both,
    ChannelOnly,
    SpatialOnly,
}

impl RectifyMode {
    /// `(λ_C, λ_S)`.
    pub fn lambdas(self) -> (f64, f64) {
        match self {
            RectifyMode::Both => (0.5, 0.5),
            RectifyMode::ChannelOnly => (1.0, 0.0),
            RectifyMode::SpatialOnly => (0.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondModality {
    /// The sensor input as given.
    #[default]
    Real,
    /// The RGB image fed again as the second input.
    RgbCopy,
    /// Seeded uniform noise in `[0, 1)`.
    Noise,
    /// Single-stream network on RGB alone.
    None,
}

impl SecondModality {
    pub fn as_str(self) -> &'static str {
        match self {
            SecondModality::Real => "real",
            SecondModality::RgbCopy => "rgb_copy",
            SecondModality::Noise => "noise",
            SecondModality::None => "none",
        }
    }
}

impl fmt::Display for SecondModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub use_cm_frm: bool,
    pub rectify_mode: RectifyMode,
    pub pool_mode: PoolMode,
    pub ffm_mode: FfmMode,
    pub second_modality: SecondModality,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            use_cm_frm: true,
            rectify_mode: RectifyMode::Both,
            pool_mode: PoolMode::Both,
            ffm_mode: FfmMode::Full,
            second_modality: SecondModality::Real,
        }
    }
}

impl AblationConfig {
    pub fn two_stream(&self) -> bool {
        self.second_modality != SecondModality::None
    }

    pub fn rectify_config(&self) -> RectifyConfig {
        let (lambda_c, lambda_s) = self.rectify_mode.lambdas();
        RectifyConfig {
            lambda_c,
            lambda_s,
            pool_mode: self.pool_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub stages: Vec<StageSpec>,
    pub decoder_dim: usize,
    pub classes: usize,
    /// Channels of the second input; anything but 3 gets a 1×1 adapter.
    pub x_channels: usize,
    pub ablation: AblationConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::with_channels(&[32, 64, 128, 256], 64, 4)
    }
}

impl NetworkConfig {
    /// Stride-2 stages with heads (1, 2, 4, 8, ...).
    pub fn with_channels(channels: &[usize], decoder_dim: usize, classes: usize) -> Self {
        let mut stages = Vec::with_capacity(channels.len());
        let mut prev = 3;
        for (i, &c) in channels.iter().enumerate() {
            stages.push(StageSpec {
                in_ch: prev,
                out_ch: c,
                downsample: 2,
                n_heads: 1 << i,
            });
            prev = c;
        }
        Self {
            stages,
            decoder_dim,
            classes,
            x_channels: 3,
            ablation: AblationConfig::default(),
        }
    }

    /// Configuration used for the end-to-end gradient check.
    pub fn small() -> Self {
        Self::with_channels(&[8, 16, 32, 64], 16, 3)
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.downsample).product()
    }

    /// Upsampling factor from stage `i` back to stage 0 resolution.
    pub(crate) fn stage_scale(&self, i: usize) -> usize {
        self.stages[1..=i].iter().map(|s| s.downsample).product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.classes < 2 || self.decoder_dim == 0 || self.x_channels == 0 {
            return bad(format!(
                "classes = {}, decoder_dim = {}, x_channels = {}",
                self.classes, self.decoder_dim, self.x_channels
            ));
        }
        let mut prev = 3;
        for (i, s) in self.stages.iter().enumerate() {
            if s.in_ch != prev {
                return bad(format!("stage {i} expects {} channels but receives {prev}", s.in_ch));
            }
            if s.out_ch == 0 || s.n_heads == 0 || s.out_ch % s.n_heads != 0 {
                return bad(format!(
                    "stage {i}: {} heads do not divide {} channels",
                    s.n_heads, s.out_ch
                ));
            }
            if s.downsample != 2 && s.downsample != 4 {
                return bad(format!("stage {i}: downsample {} not in {{2, 4}}", s.downsample));
            }
            prev = s.out_ch;
        }
        if self.ablation.second_modality == SecondModality::RgbCopy && self.x_channels != 3 {
            return bad("rgb_copy needs x_channels = 3".into());
        }
        self.ablation.rectify_config().validate()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.total_stride();
        if !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::InvalidShape {
                shape: vec![h, w],
                reason: format!("input size must be divisible by the total stride {s}"),
            });
        }
        Ok(())
    }
}
