//! Stateful layer wrappers around the kernels.
//!
//! `forward` stores the activations its `backward` needs; `backward`
//! accumulates into each [`Param::grad`] and returns the input gradient. The
//! cache is kept after `backward`, so the backward pass can be replayed.

use super::kernels::{self, Pointwise};
use super::param::join;
use super::{Param, Parameterized, Rng, Scalar, Tensor};
use crate::error::{Error, Result};

/// `y = x W + b` for `x: N × Cin`, `W: Cin × Cout`.
pub fn linear<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    let mut y = kernels::matmul(x, w)?;
    if let Some(b) = b {
        kernels::add_row_bias(&mut y, b)?;
    }
    Ok(y)
}

/// Per-pixel linear map of an `H × W × Cin` tensor.
pub fn conv1x1<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    let (h, wd, c) = x.hwc()?;
    let flat = x.clone().reshape(&[h * wd, c])?;
    let y = linear(&flat, w, b)?;
    let cout = y.shape()[1];
    y.reshape(&[h, wd, cout])
}

#[derive(Clone, Debug)]
pub struct Activation<F = f32> {
    pub kind: Pointwise,
    input: Option<Tensor<F>>,
}

impl<F: Scalar> Activation<F> {
    pub fn new(kind: Pointwise) -> Self {
        Self { kind, input: None }
    }

    pub fn forward(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let y = kernels::pointwise(self.kind, x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&self, upstream: &Tensor<F>) -> Result<Tensor<F>> {
        let x = self.input.as_ref().ok_or(Error::BackwardBeforeForward("activation"))?;
        kernels::pointwise_backward(self.kind, x, upstream)
    }
}

#[derive(Clone, Debug)]
pub struct Linear<F = f32> {
    pub w: Param<F>,
    pub b: Option<Param<F>>,
    input: Option<Tensor<F>>,
}

impl<F: Scalar> Linear<F> {
    /// Weights uniform in `±sqrt(1/cin)`, bias zero.
    pub fn new(cin: usize, cout: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let w = Param::uniform(&[cin, cout], cin, rng)?;
        let b = if bias { Some(Param::zeros(&[cout])?) } else { None };
        Ok(Self { w, b, input: None })
    }

    pub fn from_weights(w: Tensor<F>, b: Option<Tensor<F>>) -> Result<Self> {
        let (_, cout) = w.rows_cols()?;
        if let Some(b) = &b {
            if b.shape() != [cout] {
                return Err(Error::shape("linear", w.shape(), b.shape()));
            }
        }
        Ok(Self {
            w: Param::new(w),
            b: b.map(Param::new),
            input: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let y = linear(x, &self.w.value, self.b.as_ref().map(|b| &b.value))?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, upstream: &Tensor<F>) -> Result<Tensor<F>> {
        let x = self.input.as_ref().ok_or(Error::BackwardBeforeForward("linear"))?;
        let dw = kernels::matmul_tn(x, upstream)?;
        self.w.grad.add_assign(&dw)?;
        if let Some(b) = &mut self.b {
            b.grad.add_assign(&kernels::col_sums(upstream)?)?;
        }
        kernels::matmul_nt(upstream, &self.w.value)
    }

    pub fn cast<G: Scalar>(&self) -> Linear<G> {
        Linear {
            w: self.w.cast(),
            b: self.b.as_ref().map(Param::cast),
            input: None,
        }
    }
}

impl<F: Scalar> Parameterized<F> for Linear<F> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        out.push((join(prefix, "w"), &self.w));
        if let Some(b) = &self.b {
            out.push((join(prefix, "b"), b));
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        out.push((join(prefix, "w"), &mut self.w));
        if let Some(b) = &mut self.b {
            out.push((join(prefix, "b"), b));
        }
    }
}

/// A [`Linear`] applied independently at every pixel.
#[derive(Clone, Debug)]
pub struct Conv1x1<F = f32> {
    pub lin: Linear<F>,
    hw: Option<(usize, usize)>,
}

impl<F: Scalar> Conv1x1<F> {
    pub fn new(cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            lin: Linear::new(cin, cout, true, rng)?,
            hw: None,
        })
    }

    pub fn from_linear(lin: Linear<F>) -> Self {
        Self { lin, hw: None }
    }

    pub fn forward(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (h, w, c) = x.hwc()?;
        let y = self.lin.forward(&x.clone().reshape(&[h * w, c])?)?;
        self.hw = Some((h, w));
        let cout = y.shape()[1];
        y.reshape(&[h, w, cout])
    }

    pub fn backward(&mut self, upstream: &Tensor<F>) -> Result<Tensor<F>> {
        let (h, w) = self.hw.ok_or(Error::BackwardBeforeForward("conv1x1"))?;
        let (_, _, cout) = upstream.hwc()?;
        let dx = self.lin.backward(&upstream.clone().reshape(&[h * w, cout])?)?;
        let cin = dx.shape()[1];
        dx.reshape(&[h, w, cin])
    }

    pub fn cast<G: Scalar>(&self) -> Conv1x1<G> {
        Conv1x1 {
            lin: self.lin.cast(),
            hw: None,
        }
    }
}

impl<F: Scalar> Parameterized<F> for Conv1x1<F> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        self.lin.collect_params(prefix, out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        self.lin.collect_params_mut(prefix, out);
    }
}

#[derive(Clone, Debug)]
pub struct DwConv3x3<F = f32> {
    pub w: Param<F>,
    pub b: Param<F>,
    input: Option<Tensor<F>>,
}

impl<F: Scalar> DwConv3x3<F> {
    /// Taps uniform in `±1/3` (fan-in 9 per channel), bias zero.
    pub fn new(channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            w: Param::uniform(&[3, 3, channels], 9, rng)?,
            b: Param::zeros(&[channels])?,
            input: None,
        })
    }

    pub fn from_weights(w: Tensor<F>, b: Tensor<F>) -> Self {
        Self {
            w: Param::new(w),
            b: Param::new(b),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let y = kernels::dwconv3x3(x, &self.w.value, &self.b.value)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, upstream: &Tensor<F>) -> Result<Tensor<F>> {
        let x = self.input.as_ref().ok_or(Error::BackwardBeforeForward("dwconv3x3"))?;
        let (dx, dw, db) = kernels::dwconv3x3_backward(x, &self.w.value, upstream)?;
        self.w.grad.add_assign(&dw)?;
        self.b.grad.add_assign(&db)?;
        Ok(dx)
    }

    pub fn cast<G: Scalar>(&self) -> DwConv3x3<G> {
        DwConv3x3 {
            w: self.w.cast(),
            b: self.b.cast(),
            input: None,
        }
    }
}

impl<F: Scalar> Parameterized<F> for DwConv3x3<F> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        out.push((join(prefix, "w"), &mut self.w));
        out.push((join(prefix, "b"), &mut self.b));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_input() {
        let x = Tensor::<f32>::identity(2).unwrap();
        let w = Tensor::new(&[2, 2], vec![3.0, 0.0, 0.0, 5.0]).unwrap();
        let y = linear(&x, &w, Some(&Tensor::zeros(&[2]).unwrap())).unwrap();
        assert_eq!(y.data(), &[3.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn linear_zero_weights_gives_bias_rows() {
        let x = Tensor::<f32>::from_fn(&[3, 4], |i| i as f32).unwrap();
        let w = Tensor::zeros(&[4, 2]).unwrap();
        let b = Tensor::new(&[2], vec![1.5, -2.0]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[1.5, -2.0]);
        }
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let x = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let w = Tensor::zeros(&[4, 2]).unwrap();
        let msg = linear(&x, &w, None).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn linear_scalar_chain_rule() {
        let mut lin = Linear::from_weights(
            Tensor::<f32>::full(&[1, 1], 0.7).unwrap(),
            Some(Tensor::zeros(&[1]).unwrap()),
        )
        .unwrap();
        lin.forward(&Tensor::full(&[1, 1], 2.0).unwrap()).unwrap();
        let dx = lin.backward(&Tensor::full(&[1, 1], 3.0).unwrap()).unwrap();
        assert_eq!(lin.w.grad.data(), &[6.0]);
        assert_eq!(lin.b.as_ref().unwrap().grad.data(), &[3.0]);
        assert!((dx[0] - 2.1).abs() < 1e-6);
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut rng = Rng::new(1);
        let mut lin = Linear::<f32>::new(2, 2, true, &mut rng).unwrap();
        let g = Tensor::zeros(&[1, 2]).unwrap();
        assert!(matches!(lin.backward(&g), Err(Error::BackwardBeforeForward(_))));
        let mut dw = DwConv3x3::<f32>::new(2, &mut rng).unwrap();
        assert!(dw.backward(&Tensor::zeros(&[1, 1, 2]).unwrap()).is_err());
        let act = Activation::<f32>::new(Pointwise::Relu);
        assert!(act.backward(&g).is_err());
        let mut conv = Conv1x1::<f32>::new(2, 2, &mut rng).unwrap();
        assert!(conv.backward(&Tensor::zeros(&[1, 1, 2]).unwrap()).is_err());
    }

    #[test]
    fn conv1x1_identity_kernel_and_degenerate_size() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32 * 0.5 - 3.0).unwrap();
        let id = Tensor::identity(4).unwrap();
        let y = conv1x1(&x, &id, Some(&Tensor::zeros(&[4]).unwrap())).unwrap();
        assert_eq!(y, x);

        let mut rng = Rng::new(4);
        let w = Param::<f32>::uniform(&[4, 3], 4, &mut rng).unwrap().value;
        let px = Tensor::<f32>::from_fn(&[1, 1, 4], |i| i as f32).unwrap();
        let a = conv1x1(&px, &w, None).unwrap();
        let b = linear(&px.clone().reshape(&[1, 4]).unwrap(), &w, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn replayed_backward_is_identical() {
        let mut rng = Rng::new(8);
        let mut conv = Conv1x1::<f32>::new(3, 2, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 2, 3], |i| (i as f32).sin()).unwrap();
        let g = Tensor::from_fn(&[2, 2, 2], |i| (i as f32).cos()).unwrap();
        conv.forward(&x).unwrap();
        let d1 = conv.backward(&g).unwrap();
        let g1 = conv.lin.w.grad.clone();
        conv.zero_grad();
        let d2 = conv.backward(&g).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(g1, conv.lin.w.grad);
    }
}
