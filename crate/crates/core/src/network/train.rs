use crate::error::{Error, Result};
use crate::numerics::{Parameterized, Tensor};

use super::loss::cross_entropy;
use super::model::Network;

/// Momentum SGD: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step<M: Parameterized<f32> + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let mut params = model.params_mut();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, p)| p.value.zeros_like()).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state has {} tensors, model has {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for ((_, p), v) in params.iter_mut().zip(&mut self.velocity) {
            for ((vi, &g), w) in v.data_mut().iter_mut().zip(p.grad.data()).zip(p.value.data_mut()) {
                *vi = self.momentum * *vi + g;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// One labelled scene. `x` is the already-substituted second input.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: Tensor<f32>,
    pub x: Option<Tensor<f32>>,
    pub labels: Vec<u32>,
}

/// Forward, loss, backward and update over a batch; returns the mean loss.
pub fn train_step(net: &mut Network<f32>, batch: &[Sample], opt: &mut Sgd, ignore_id: u32) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    net.zero_grad();
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0f32;
    for (i, s) in batch.iter().enumerate() {
        let logits = net.forward(&s.rgb, s.x.as_ref())?;
        let (loss, grad) = cross_entropy(&logits, &s.labels, ignore_id)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                location: format!("training loss of batch sample {i}"),
                value: loss as f64,
            });
        }
        total += loss;
        net.backward(&grad.scale(scale))?;
    }
    opt.step(net)?;
    Ok(total * scale)
}
