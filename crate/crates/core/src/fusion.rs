//! Two-stage feature fusion.
//!
//! **Exchange stage.** Each path flattens its `H × W × C` feature to `N × C`
//! and embeds it twice: a residual vector and an interactive vector. The
//! interactive vector is cut into `n_heads` contiguous column slices. For
//! every head the slice is projected to keys `K` and values `V` and the
//! path's context matrix `G = Kᵀ V` (`C_head × C_head`) is formed; no `N × N`
//! matrix ever exists. The attended result of a path is its own interactive
//! slice times the row-softmax of the *other* path's context:
//!
//! ```text
//! U_rgb = I_rgb · softmax(G_x)      U_x = I_x · softmax(G_rgb)
//! ```
//!
//! Heads are concatenated back to `N × C`, joined with the residual vector
//! and projected by a per-path output embedding to `H × W × C`.
//!
//! **Fusion stage.** Both paths are concatenated (`2C`), reduced by a 1×1
//! convolution to `C`, passed through a depthwise 3×3 skip branch
//! `z + dw(z)`, a GELU and a final 1×1 convolution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::join;
use crate::numerics::kernels::{self, Pointwise};
use crate::numerics::{Activation, Conv1x1, DwConv3x3, Linear, Param, Parameterized, Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfmMode {
    /// Cross-attention exchange followed by the fusion stage.
    #[default]
    Full,
    /// Fusion stage on the raw inputs, no exchange.
    Stage2Only,
    /// Exchange stage where each path uses its own context.
    SelfAttn,
    /// Parameter-free elementwise mean of the two inputs.
    Avg,
}

impl FfmMode {
    pub const ALL: [FfmMode; 4] = [FfmMode::Full, FfmMode::Stage2Only, FfmMode::SelfAttn, FfmMode::Avg];

    pub fn as_str(self) -> &'static str {
        match self {
            FfmMode::Full => "full",
            FfmMode::Stage2Only => "stage2_only",
            FfmMode::SelfAttn => "self_attn",
            FfmMode::Avg => "avg",
        }
    }
}

impl fmt::Display for FfmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FfmMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FfmMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fusion mode `{s}`")))
    }
}

/// Global context matrix of one head on one path.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadContext<F = f32> {
    pub g: Tensor<F>,
}

#[derive(Clone, Debug)]
struct HeadCache<F> {
    k: Tensor<F>,
    v: Tensor<F>,
    slice: Tensor<F>,
    /// row-softmax of this path's own context
    attn: Tensor<F>,
}

#[derive(Clone, Debug)]
struct PathCache<F> {
    hw: (usize, usize),
    heads: Vec<HeadCache<F>>,
}

/// Embeddings of one path of the exchange stage.
#[derive(Clone, Debug)]
pub struct ExchangePath<F = f32> {
    pub e_res: Linear<F>,
    pub e_inter: Linear<F>,
    pub k_proj: Vec<Linear<F>>,
    pub v_proj: Vec<Linear<F>>,
    pub out_proj: Linear<F>,
    cache: Option<PathCache<F>>,
}

impl<F: Scalar> ExchangePath<F> {
    fn new(c: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        let ch = c / n_heads;
        let e_res = Linear::new(c, c, true, rng)?;
        let e_inter = Linear::new(c, c, true, rng)?;
        let mut k_proj = Vec::with_capacity(n_heads);
        let mut v_proj = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            k_proj.push(Linear::new(ch, ch, false, rng)?);
            v_proj.push(Linear::new(ch, ch, false, rng)?);
        }
        let out_proj = Linear::new(2 * c, c, true, rng)?;
        Ok(Self {
            e_res,
            e_inter,
            k_proj,
            v_proj,
            out_proj,
            cache: None,
        })
    }

    fn cast<G: Scalar>(&self) -> ExchangePath<G> {
        ExchangePath {
            e_res: self.e_res.cast(),
            e_inter: self.e_inter.cast(),
            k_proj: self.k_proj.iter().map(Linear::cast).collect(),
            v_proj: self.v_proj.iter().map(Linear::cast).collect(),
            out_proj: self.out_proj.cast(),
            cache: None,
        }
    }

    fn n_heads(&self) -> usize {
        self.k_proj.len()
    }

    /// Residual and interactive vectors (`N × C` each).
    pub fn split_vectors(&mut self, feat: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let (h, w, c) = feat.hwc()?;
        if c != self.e_res.in_features() {
            return Err(Error::shape("split_vectors", feat.shape(), self.e_res.w.value.shape()));
        }
        let flat = feat.clone().reshape(&[h * w, c])?;
        Ok((self.e_res.forward(&flat)?, self.e_inter.forward(&flat)?))
    }

    /// `G = Kᵀ V` for one head, from its `N × C_head` slice.
    pub fn head_context(&mut self, slice: &Tensor<F>, head: usize) -> Result<HeadContext<F>> {
        let k = self.k_proj[head].forward(slice)?;
        let v = self.v_proj[head].forward(slice)?;
        Ok(HeadContext {
            g: kernels::matmul_tn(&k, &v)?,
        })
    }

    /// Embeds `feat` and builds every head's context; returns the residual
    /// vector and the interactive slices.
    fn contexts(&mut self, feat: &Tensor<F>) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
        let (h, w, _) = feat.hwc()?;
        let (res, inter) = self.split_vectors(feat)?;
        let ch = inter.shape()[1] / self.n_heads();
        let mut heads = Vec::with_capacity(self.n_heads());
        let mut slices = Vec::with_capacity(self.n_heads());
        for head in 0..self.n_heads() {
            let slice = kernels::slice_cols(&inter, head * ch, ch)?;
            let k = self.k_proj[head].forward(&slice)?;
            let v = self.v_proj[head].forward(&slice)?;
            let g = kernels::matmul_tn(&k, &v)?;
            heads.push(HeadCache {
                k,
                v,
                slice: slice.clone(),
                attn: kernels::softmax_last(&g),
            });
            slices.push(slice);
        }
        self.cache = Some(PathCache { hw: (h, w), heads });
        Ok((res, slices))
    }

    fn attention(&self, head: usize) -> Option<&Tensor<F>> {
        self.cache.as_ref().map(|c| &c.heads[head].attn)
    }

    /// Output embedding of `concat(U, res)` resized to `H × W × C`.
    fn project(&mut self, u: &Tensor<F>, res: &Tensor<F>) -> Result<Tensor<F>> {
        let (h, w) = self.cache.as_ref().expect("contexts computed").hw;
        let cat = kernels::concat_last(u, res)?;
        let out = self.out_proj.forward(&cat)?;
        let c = out.shape()[1];
        out.reshape(&[h, w, c])
    }
}

impl<F: Scalar> Parameterized<F> for ExchangePath<F> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        self.e_res.collect_params(&join(prefix, "e_res"), out);
        self.e_inter.collect_params(&join(prefix, "e_inter"), out);
        for (i, (k, v)) in self.k_proj.iter().zip(&self.v_proj).enumerate() {
            k.collect_params(&join(prefix, &format!("k_proj{i}")), out);
            v.collect_params(&join(prefix, &format!("v_proj{i}")), out);
        }
        self.out_proj.collect_params(&join(prefix, "out_proj"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        self.e_res.collect_params_mut(&join(prefix, "e_res"), out);
        self.e_inter.collect_params_mut(&join(prefix, "e_inter"), out);
        for (i, (k, v)) in self.k_proj.iter_mut().zip(self.v_proj.iter_mut()).enumerate() {
            k.collect_params_mut(&join(prefix, &format!("k_proj{i}")), out);
            v.collect_params_mut(&join(prefix, &format!("v_proj{i}")), out);
        }
        self.out_proj.collect_params_mut(&join(prefix, "out_proj"), out);
    }
}

/// Mixed channel embedding with a depthwise skip branch.
#[derive(Clone, Debug)]
pub struct FuseStage<F = f32> {
    pub w1: Conv1x1<F>,
    pub dw: DwConv3x3<F>,
    pub w2: Conv1x1<F>,
    act: Activation<F>,
}

impl<F: Scalar> FuseStage<F> {
    fn new(c: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            w1: Conv1x1::new(2 * c, c, rng)?,
            dw: DwConv3x3::new(c, rng)?,
            w2: Conv1x1::new(c, c, rng)?,
            act: Activation::new(Pointwise::Gelu),
        })
    }

    fn cast<G: Scalar>(&self) -> FuseStage<G> {
        FuseStage {
            w1: self.w1.cast(),
            dw: self.dw.cast(),
            w2: self.w2.cast(),
            act: Activation::new(Pointwise::Gelu),
        }
    }

    pub fn forward(&mut self, rgb: &Tensor<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        rgb.expect_same_shape(x, "fuse")?;
        let cat = kernels::concat_last(rgb, x)?;
        let z = self.w1.forward(&cat)?;
        let mut s = self.dw.forward(&z)?;
        s.add_assign(&z)?;
        let a = self.act.forward(&s);
        self.w2.forward(&a)
    }

    pub fn backward(&mut self, upstream: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let da = self.w2.backward(upstream)?;
        let ds = self.act.backward(&da)?;
        let mut dz = self.dw.backward(&ds)?;
        dz.add_assign(&ds)?;
        let dcat = self.w1.backward(&dz)?;
        let c = dcat.shape()[2] / 2;
        kernels::split_last(&dcat, c)
    }
}

impl<F: Scalar> Parameterized<F> for FuseStage<F> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        self.w1.collect_params(&join(prefix, "w1"), out);
        self.dw.collect_params(&join(prefix, "dw"), out);
        self.w2.collect_params(&join(prefix, "w2"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        self.w1.collect_params_mut(&join(prefix, "w1"), out);
        self.dw.collect_params_mut(&join(prefix, "dw"), out);
        self.w2.collect_params_mut(&join(prefix, "w2"), out);
    }
}

/// Fusion block for one stage.
///
/// Parameters in checkpoint order: the RGB path (`e_res`, `e_inter`,
/// `k_proj{h}`/`v_proj{h}` per head, `out_proj`), the X path in the same
/// layout, then the fusion stage (`w1`, `dw`, `w2`).
#[derive(Clone, Debug)]
pub struct Ffm<F = f32> {
    pub channels: usize,
    pub n_heads: usize,
    pub rgb: ExchangePath<F>,
    pub x: ExchangePath<F>,
    pub fuse: FuseStage<F>,
    last_mode: Option<FfmMode>,
}

impl<F: Scalar> Ffm<F> {
    pub fn new(channels: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 || !channels.is_multiple_of(n_heads) {
            return Err(Error::InvalidArgument(format!(
                "{n_heads} heads do not divide {channels} channels"
            )));
        }
        Ok(Self {
            channels,
            n_heads,
            rgb: ExchangePath::new(channels, n_heads, rng)?,
            x: ExchangePath::new(channels, n_heads, rng)?,
            fuse: FuseStage::new(channels, rng)?,
            last_mode: None,
        })
    }

    pub fn cast<G: Scalar>(&self) -> Ffm<G> {
        Ffm {
            channels: self.channels,
            n_heads: self.n_heads,
            rgb: self.rgb.cast(),
            x: self.x.cast(),
            fuse: self.fuse.cast(),
            last_mode: None,
        }
    }

    /// Makes the X path an exact copy of the RGB path.
    pub fn share_paths(&mut self) {
        self.x = self.rgb.clone();
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.n_heads
    }

    fn check(&self, rgb: &Tensor<F>, x: &Tensor<F>) -> Result<()> {
        rgb.expect_same_shape(x, "ffm")?;
        let (_, _, c) = rgb.hwc()?;
        if c != self.channels {
            return Err(Error::InvalidShape {
                shape: rgb.shape().to_vec(),
                reason: format!("fusion block expects {} channels", self.channels),
            });
        }
        Ok(())
    }

    /// Exchange stage. With `exchange = false` each path attends with its
    /// own context.
    pub fn cross_exchange(&mut self, rgb: &Tensor<F>, x: &Tensor<F>, exchange: bool) -> Result<(Tensor<F>, Tensor<F>)> {
        self.check(rgb, x)?;
        let (res_rgb, slices_rgb) = self.rgb.contexts(rgb)?;
        let (res_x, slices_x) = self.x.contexts(x)?;
        let n = res_rgb.shape()[0];
        let ch = self.head_dim();
        let mut u_rgb = Tensor::zeros(&[n, self.channels])?;
        let mut u_x = Tensor::zeros(&[n, self.channels])?;
        for head in 0..self.n_heads {
            let (a_rgb, a_x) = (
                self.rgb.attention(head).expect("cached"),
                self.x.attention(head).expect("cached"),
            );
            let (for_rgb, for_x) = if exchange { (a_x, a_rgb) } else { (a_rgb, a_x) };
            kernels::add_into_cols(&mut u_rgb, head * ch, &kernels::matmul(&slices_rgb[head], for_rgb)?)?;
            kernels::add_into_cols(&mut u_x, head * ch, &kernels::matmul(&slices_x[head], for_x)?)?;
        }
        let out_rgb = self.rgb.project(&u_rgb, &res_rgb)?;
        let out_x = self.x.project(&u_x, &res_x)?;
        Ok((out_rgb, out_x))
    }

    /// Row-softmax of a path's context for `head` from the last exchange.
    pub fn last_attention(&self, rgb_path: bool, head: usize) -> Option<&Tensor<F>> {
        if rgb_path {
            self.rgb.attention(head)
        } else {
            self.x.attention(head)
        }
    }

    pub fn fuse(&mut self, rgb_ex: &Tensor<F>, x_ex: &Tensor<F>) -> Result<Tensor<F>> {
        self.fuse.forward(rgb_ex, x_ex)
    }

    pub fn forward(&mut self, rgb: &Tensor<F>, x: &Tensor<F>, mode: FfmMode) -> Result<Tensor<F>> {
        self.check(rgb, x)?;
        let out = match mode {
            FfmMode::Full | FfmMode::SelfAttn => {
                let (a, b) = self.cross_exchange(rgb, x, mode == FfmMode::Full)?;
                self.fuse(&a, &b)?
            }
            FfmMode::Stage2Only => self.fuse(rgb, x)?,
            FfmMode::Avg => average(rgb, x)?,
        };
        self.last_mode = Some(mode);
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let mode = self.last_mode.ok_or(Error::BackwardBeforeForward("ffm"))?;
        match mode {
            FfmMode::Avg => average_backward(upstream),
            FfmMode::Stage2Only => self.fuse.backward(upstream),
            FfmMode::Full | FfmMode::SelfAttn => {
                let (g_rgb, g_x) = self.fuse.backward(upstream)?;
                self.exchange_backward(&g_rgb, &g_x, mode == FfmMode::Full)
            }
        }
    }

    fn exchange_backward(
        &mut self,
        g_rgb: &Tensor<F>,
        g_x: &Tensor<F>,
        exchange: bool,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let ch = self.head_dim();
        let c = self.channels;
        let mut rgb_cache = self
            .rgb
            .cache
            .take()
            .ok_or(Error::BackwardBeforeForward("ffm exchange"))?;
        let mut x_cache = self
            .x
            .cache
            .take()
            .ok_or(Error::BackwardBeforeForward("ffm exchange"))?;

        // output embedding → (dU, dRes)
        let mut d_u = Vec::with_capacity(2);
        let mut d_res = Vec::with_capacity(2);
        for (path, g) in [(&mut self.rgb, g_rgb), (&mut self.x, g_x)] {
            let (h, w, _) = g.hwc()?;
            let d_cat = path.out_proj.backward(&g.clone().reshape(&[h * w, c])?)?;
            let (du, dr) = kernels::split_last(&d_cat, c)?;
            d_u.push(du);
            d_res.push(dr);
        }
        let n = d_u[0].shape()[0];

        // U_p = I_p · A_q: gradients to the slices and to the attention maps
        let mut d_inter = [Tensor::zeros(&[n, c])?, Tensor::zeros(&[n, c])?];
        let mut d_attn: [Vec<Tensor<F>>; 2] = [Vec::new(), Vec::new()];
        for head in 0..self.n_heads {
            let caches = [&rgb_cache.heads[head], &x_cache.heads[head]];
            let mut d_a = [caches[0].attn.zeros_like(), caches[1].attn.zeros_like()];
            for p in 0..2 {
                let q = if exchange { 1 - p } else { p };
                let du = kernels::slice_cols(&d_u[p], head * ch, ch)?;
                let d_slice = kernels::matmul_nt(&du, &caches[q].attn)?;
                kernels::add_into_cols(&mut d_inter[p], head * ch, &d_slice)?;
                d_a[q].add_assign(&kernels::matmul_tn(&caches[p].slice, &du)?)?;
            }
            let [a0, a1] = d_a;
            d_attn[0].push(a0);
            d_attn[1].push(a1);
        }

        // softmax, G = KᵀV, K/V projections
        let mut grads = Vec::with_capacity(2);
        for (p, (path, cache)) in [(&mut self.rgb, &mut rgb_cache), (&mut self.x, &mut x_cache)]
            .into_iter()
            .enumerate()
        {
            for head in 0..self.n_heads {
                let hc = &cache.heads[head];
                let d_g = kernels::softmax_last_backward(&hc.attn, &d_attn[p][head])?;
                let d_k = kernels::matmul_nt(&hc.v, &d_g)?;
                let d_v = kernels::matmul(&hc.k, &d_g)?;
                let mut d_slice = path.k_proj[head].backward(&d_k)?;
                d_slice.add_assign(&path.v_proj[head].backward(&d_v)?)?;
                kernels::add_into_cols(&mut d_inter[p], head * ch, &d_slice)?;
            }
            let mut d_flat = path.e_inter.backward(&d_inter[p])?;
            d_flat.add_assign(&path.e_res.backward(&d_res[p])?)?;
            let (h, w) = cache.hw;
            grads.push(d_flat.reshape(&[h, w, c])?);
        }

        self.rgb.cache = Some(rgb_cache);
        self.x.cache = Some(x_cache);
        let d_x = grads.pop().expect("two paths");
        let d_rgb = grads.pop().expect("two paths");
        Ok((d_rgb, d_x))
    }
}

impl<F: Scalar> Parameterized<F> for Ffm<F> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        self.rgb.collect_params(&join(prefix, "rgb"), out);
        self.x.collect_params(&join(prefix, "x"), out);
        self.fuse.collect_params(&join(prefix, "fuse"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        self.rgb.collect_params_mut(&join(prefix, "rgb"), out);
        self.x.collect_params_mut(&join(prefix, "x"), out);
        self.fuse.collect_params_mut(&join(prefix, "fuse"), out);
    }
}

/// `(a + b) / 2`, exact on equal inputs.
pub fn average<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let half = F::of(0.5);
    a.zip_map(b, "average", |u, v| (u + v) * half)
}

pub fn average_backward<F: Scalar>(upstream: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
    let g = upstream.scale(F::of(0.5));
    Ok((g.clone(), g))
}
