//! Linear polarization: Stokes parameters, DoLP and AoLP.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::image::replicate3;

/// Below this total intensity DoLP is reported as 0.
pub const S0_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chroma {
    /// One `H × W` image per angle.
    #[default]
    Mono,
    /// One `H × W × 3` image per angle.
    Tri,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarKind {
    #[default]
    Dolp,
    Aolp,
}

/// Argument order of the angle formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AolpConvention {
    /// `½·arctan(S1 / S2)`, range `(−π/4, π/4]`.
    #[default]
    Literal,
    /// `½·atan2(S2, S1)`, range `(−π/2, π/2]`.
    Physical,
}

/// Intensities behind polarizers at 0°, 45°, 90° and 135°.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarStack<F = f32> {
    pub i0: Tensor<F>,
    pub i45: Tensor<F>,
    pub i90: Tensor<F>,
    pub i135: Tensor<F>,
}

impl<F: Scalar> PolarStack<F> {
    pub fn new(i0: Tensor<F>, i45: Tensor<F>, i90: Tensor<F>, i135: Tensor<F>) -> Result<Self> {
        for other in [&i45, &i90, &i135] {
            i0.expect_same_shape(other, "polar stack")?;
        }
        if !matches!(i0.shape(), [_, _] | [_, _, 3]) {
            return Err(Error::InvalidShape {
                shape: i0.shape().to_vec(),
                reason: "polar images must be H×W or H×W×3".into(),
            });
        }
        Ok(Self { i0, i45, i90, i135 })
    }

    pub fn chroma(&self) -> Chroma {
        if self.i0.rank() == 2 {
            Chroma::Mono
        } else {
            Chroma::Tri
        }
    }

    /// `max |(i0 + i90) − (i45 + i135)|`; zero for physically consistent data.
    pub fn consistency_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.i0.numel() {
            let r = (self.i0[i] + self.i90[i]) - (self.i45[i] + self.i135[i]);
            worst = worst.max(r.as_f64().abs());
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StokesMaps<F = f32> {
    pub s0: Tensor<F>,
    pub s1: Tensor<F>,
    pub s2: Tensor<F>,
}

pub fn stokes<F: Scalar>(ps: &PolarStack<F>) -> StokesMaps<F> {
    let zip = |a: &Tensor<F>, b: &Tensor<F>, f: fn(F, F) -> F| a.zip_map(b, "stokes", f).expect("validated stack");
    StokesMaps {
        s0: zip(&ps.i0, &ps.i90, |a, b| a + b),
        s1: zip(&ps.i0, &ps.i90, |a, b| a - b),
        s2: zip(&ps.i45, &ps.i135, |a, b| a - b),
    }
}

pub fn dolp_value<F: Scalar>(s0: F, s1: F, s2: F) -> F {
    if s0 <= F::of(S0_EPS) {
        return F::zero();
    }
    let d = (s1 * s1 + s2 * s2).sqrt() / s0;
    d.max(F::zero()).min(F::one())
}

/// Angle of linear polarization in radians.
pub fn aolp_value<F: Scalar>(s1: F, s2: F, convention: AolpConvention) -> F {
    if s1 == F::zero() && s2 == F::zero() {
        return F::zero();
    }
    match convention {
        AolpConvention::Literal => {
            // atan2 folded onto (−π/2, π/2] is arctan(s1 / s2) with s2 = 0 sent to +π/2
            let mut t = s1.atan2(s2);
            let (half, pi) = (F::of(FRAC_PI_2), F::of(PI));
            if t > half {
                t -= pi;
            } else if t <= -half {
                t += pi;
            }
            t * F::of(0.5)
        }
        AolpConvention::Physical => s2.atan2(s1) * F::of(0.5),
    }
}

/// Affine map of an angle from its convention's range onto `[0, 1]`.
pub fn aolp_to_unit<F: Scalar>(a: F, convention: AolpConvention) -> F {
    match convention {
        AolpConvention::Literal => (a + F::of(FRAC_PI_4)) / F::of(FRAC_PI_2),
        AolpConvention::Physical => (a + F::of(FRAC_PI_2)) / F::of(PI),
    }
}

fn map3<F: Scalar>(sm: &StokesMaps<F>, f: impl Fn(F, F, F) -> F) -> Tensor<F> {
    let data = (0..sm.s0.numel()).map(|i| f(sm.s0[i], sm.s1[i], sm.s2[i])).collect();
    Tensor::new(sm.s0.shape(), data).expect("same shape as s0")
}

pub fn dolp<F: Scalar>(sm: &StokesMaps<F>) -> Tensor<F> {
    map3(sm, dolp_value)
}

pub fn aolp<F: Scalar>(sm: &StokesMaps<F>, convention: AolpConvention) -> Tensor<F> {
    map3(sm, |_, s1, s2| aolp_value(s1, s2, convention))
}

/// Encodes a stack as an `H × W × 3` input in `[0, 1]`.
pub fn polar_encode<F: Scalar>(
    ps: &PolarStack<F>,
    kind: PolarKind,
    chroma: Chroma,
    convention: AolpConvention,
) -> Result<Tensor<F>> {
    if ps.chroma() != chroma {
        return Err(Error::InvalidArgument(format!(
            "requested {chroma:?} encoding of a {:?} stack with shape {:?}",
            ps.chroma(),
            ps.i0.shape()
        )));
    }
    let sm = stokes(ps);
    let map = match kind {
        PolarKind::Dolp => dolp(&sm),
        PolarKind::Aolp => aolp(&sm, convention).map(|a| aolp_to_unit(a, convention)),
    };
    match chroma {
        Chroma::Mono => replicate3(&map),
        Chroma::Tri => Ok(map),
    }
}
