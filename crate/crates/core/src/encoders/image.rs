//! Single-channel modalities: thermal and depth.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

fn plane<F: Scalar>(t: &Tensor<F>) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [h, w, 1] => Ok((h, w)),
        _ => Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "expected an H×W or H×W×1 image".into(),
        }),
    }
}

/// Copies a single-channel image into three identical channels.
pub fn replicate3<F: Scalar>(t: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w) = plane(t)?;
    let data = t.data().iter().flat_map(|&v| [v, v, v]).collect();
    Tensor::new(&[h, w, 3], data)
}

pub fn thermal_encode<F: Scalar>(t: &Tensor<F>) -> Result<Tensor<F>> {
    replicate3(t)
}

/// Min-max normalized depth replicated to three channels.
pub fn depth_encode<F: Scalar>(d: &Tensor<F>) -> Result<Tensor<F>> {
    plane(d)?;
    let (lo, hi) = d
        .data()
        .iter()
        .fold((F::infinity(), F::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) || !(hi - lo).is_finite() {
        return Err(Error::InvalidArgument(format!(
            "depth range [{lo}, {hi}] cannot be normalized"
        )));
    }
    let span = hi - lo;
    replicate3(&d.map(|v| ((v - lo) / span).max(F::zero()).min(F::one())))
}
