use super::{Rng, Scalar, Tensor};
use crate::error::Result;

/// A learnable tensor and its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<F = f32> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let grad = value.zeros_like();
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Ok(Self::new(Tensor::zeros(shape)?))
    }

    /// Uniform in `±sqrt(1 / fan_in)`, drawn in storage order.
    pub fn uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Self> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| F::of(rng.uniform(-bound, bound)))?;
        Ok(Self::new(t))
    }

    pub fn reset_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn cast<G: Scalar>(&self) -> Param<G> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

/// Anything owning [`Param`]s, visited in a fixed documented order.
///
/// The order is the checkpoint order and the order in which initial values
/// are drawn from the RNG.
pub trait Parameterized<F: Scalar> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>);
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>);

    fn params(&self) -> Vec<(String, &Param<F>)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut out = Vec::new();
        self.collect_params_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.reset_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.numel()).sum()
    }
}

/// Joins a name prefix and a field name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
