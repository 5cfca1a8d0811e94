//! Finite-difference checks over every differentiable operation.
//!
//! Each check evaluates a random linear projection of the operation's
//! outputs, so every output direction contributes to the probed scalar.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::{self, Ffm, FfmMode};
use crate::network::{cross_entropy, Decoder, Network, NetworkConfig, StageBlock, StageSpec, DEFAULT_IGNORE};
use crate::numerics::gradcheck::{grad_check, projection, CheckOptions, Coordinate};
use crate::numerics::kernels::{self, Pointwise, PoolKind};
use crate::numerics::{Conv1x1, DwConv3x3, Linear, Param, Parameterized, Rng, Scalar, Tensor};
use crate::rectify::{CmFrm, PoolMode, RectifyConfig};

pub const MODULE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

/// Every operation that owns parameters. The suite must cover all of them.
pub const PARAM_OPS: &[&str] = &[
    "linear",
    "conv1x1",
    "dwconv3x3",
    "cm_frm",
    "ffm",
    "stage_block",
    "decoder",
    "network",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Kernel,
    Module,
    EndToEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub name: String,
    pub scope: Scope,
    /// Parameter-bearing operation this check exercises, if any.
    pub covers: Option<String>,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub worst: Option<Coordinate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub command: String,
    pub seed: u64,
    pub entries: Vec<CheckEntry>,
    /// Entries of [`PARAM_OPS`] without a check.
    pub uncovered: Vec<String>,
    pub all_pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// A parameter-free operation.
pub struct Stateless;

impl<F: Scalar> Parameterized<F> for Stateless {
    fn collect_params<'a>(&'a self, _: &str, _: &mut Vec<(String, &'a Param<F>)>) {}
    fn collect_params_mut<'a>(&'a mut self, _: &str, _: &mut Vec<(String, &'a mut Param<F>)>) {}
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Probe budget per tensor for the end-to-end check.
    pub end_to_end_probes: Option<usize>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            end_to_end_probes: Some(64),
        }
    }
}

fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0) as f32).expect("valid shape")
}

/// Values bounded away from zero so a kink at 0 is never straddled.
fn rand_off_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| {
        let v = rng.uniform(0.1, 1.0) as f32;
        if rng.next_u64() & 1 == 0 {
            v
        } else {
            -v
        }
    })
    .expect("valid shape")
}

/// Checks `Σ_k ⟨P_k, out_k⟩` for outputs `out = fwd(inputs)`.
///
/// `back` receives the projections and returns the input gradients.
#[allow(clippy::too_many_arguments)]
pub fn check_projected<M, S>(
    name: &str,
    scope: Scope,
    covers: Option<&str>,
    tolerance: f64,
    model: &mut M,
    shadow: &mut S,
    inputs: &[Tensor<f32>],
    fwd32: impl Fn(&mut M, &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>>,
    back32: impl Fn(&mut M, &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>>,
    fwd64: impl Fn(&mut S, &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>,
    opts: &CheckOptions,
) -> Result<CheckEntry>
where
    M: Parameterized<f32> + ?Sized,
    S: Parameterized<f64> + ?Sized,
{
    let shapes: Vec<Vec<usize>> = fwd32(model, inputs)?.iter().map(|t| t.shape().to_vec()).collect();
    let seed = opts.seed ^ 0x5EED;
    let p32: Vec<Tensor<f32>> = shapes
        .iter()
        .enumerate()
        .map(|(k, s)| projection(s, seed + k as u64))
        .collect::<Result<_>>()?;
    let p64: Vec<Tensor<f64>> = p32.iter().map(Tensor::cast).collect();
    let report = grad_check(
        model,
        shadow,
        inputs,
        |m, xs| {
            fwd32(m, xs)?;
            back32(m, &p32)
        },
        |s, xs| {
            let outs = fwd64(s, xs)?;
            let mut total = 0.0;
            for (o, p) in outs.iter().zip(&p64) {
                total += o.dot(p)?;
            }
            Ok(total)
        },
        opts,
    )?;
    Ok(entry(name, scope, covers, tolerance, report))
}

fn entry(name: &str, scope: Scope, covers: Option<&str>, tolerance: f64, r: crate::numerics::GradReport) -> CheckEntry {
    CheckEntry {
        name: name.to_string(),
        scope,
        covers: covers.map(str::to_string),
        checked: r.checked,
        pass: r.passes(tolerance),
        max_rel_err: r.max_rel_err,
        tolerance,
        worst: r.worst,
    }
}

fn kernel_checks(rng: &mut Rng, opts: &CheckOptions, out: &mut Vec<CheckEntry>) -> Result<()> {
    let stateless = |name: &str,
                     x: Tensor<f32>,
                     f32_: &dyn Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
                     b32: &dyn Fn(&Tensor<f32>, &Tensor<f32>) -> Result<Tensor<f32>>,
                     f64_: &dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>|
     -> Result<CheckEntry> {
        let x0 = x.clone();
        check_projected(
            name,
            Scope::Kernel,
            None,
            MODULE_TOL,
            &mut Stateless,
            &mut Stateless,
            &[x],
            |_, xs| Ok(vec![f32_(&xs[0])?]),
            |_, ps| Ok(vec![b32(&x0, &ps[0])?]),
            |_, xs| Ok(vec![f64_(&xs[0])?]),
            opts,
        )
    };

    for kind in [Pointwise::Sigmoid, Pointwise::Relu, Pointwise::Gelu] {
        let x = if kind == Pointwise::Relu {
            rand_off_zero(&[3, 4], rng)
        } else {
            rand_t(&[3, 4], rng).scale(2.0)
        };
        out.push(stateless(
            &format!("pointwise.{}", format!("{kind:?}").to_lowercase()),
            x,
            &|x| Ok(kernels::pointwise(kind, x)),
            &|x, g| kernels::pointwise_backward(kind, x, g),
            &|x| Ok(kernels::pointwise(kind, x)),
        )?);
    }

    out.push(stateless(
        "softmax_last",
        rand_t(&[3, 4], rng).scale(2.0),
        &|x| Ok(kernels::softmax_last(x)),
        &|x, g| kernels::softmax_last_backward(&kernels::softmax_last(x), g),
        &|x| Ok(kernels::softmax_last(x)),
    )?);

    for kind in [PoolKind::Avg, PoolKind::Max] {
        out.push(stateless(
            &format!("global_pool.{}", format!("{kind:?}").to_lowercase()),
            rand_t(&[3, 3, 2], rng),
            &|x| kernels::global_pool(kind, x),
            &|x, g| kernels::global_pool_backward(kind, x, g),
            &|x| kernels::global_pool(kind, x),
        )?);
    }

    out.push(stateless(
        "space_to_depth",
        rand_t(&[4, 4, 2], rng),
        &|x| kernels::space_to_depth(x, 2),
        &|_, g| kernels::depth_to_space(g, 2),
        &|x| kernels::space_to_depth(x, 2),
    )?);

    out.push(stateless(
        "upsample_nearest",
        rand_t(&[2, 2, 3], rng),
        &|x| kernels::upsample_nearest(x, 2),
        &|_, g| kernels::upsample_nearest_backward(g, 2),
        &|x| kernels::upsample_nearest(x, 2),
    )?);

    // scalar objective: checked without a projection
    let labels = [0u32, 2, 1, DEFAULT_IGNORE];
    let logits = rand_t(&[2, 2, 3], rng).scale(2.0);
    let r = grad_check(
        &mut Stateless,
        &mut Stateless,
        &[logits],
        |_, xs| Ok(vec![cross_entropy(&xs[0], &labels, DEFAULT_IGNORE)?.1]),
        |_, xs| Ok(cross_entropy(&xs[0], &labels, DEFAULT_IGNORE)?.0),
        opts,
    )?;
    out.push(entry("cross_entropy", Scope::Kernel, None, MODULE_TOL, r));
    Ok(())
}

fn layer_checks(rng: &mut Rng, opts: &CheckOptions, out: &mut Vec<CheckEntry>) -> Result<()> {
    let mut lin = Linear::<f32>::new(4, 2, true, rng)?;
    let mut sh = lin.cast::<f64>();
    out.push(check_projected(
        "linear",
        Scope::Module,
        Some("linear"),
        MODULE_TOL,
        &mut lin,
        &mut sh,
        &[rand_t(&[3, 4], rng)],
        |m, xs| Ok(vec![m.forward(&xs[0])?]),
        |m, ps| Ok(vec![m.backward(&ps[0])?]),
        |m, xs| Ok(vec![m.forward(&xs[0])?]),
        opts,
    )?);

    let mut conv = Conv1x1::<f32>::new(2, 3, rng)?;
    let mut sh = conv.cast::<f64>();
    out.push(check_projected(
        "conv1x1",
        Scope::Module,
        Some("conv1x1"),
        MODULE_TOL,
        &mut conv,
        &mut sh,
        &[rand_t(&[3, 3, 2], rng)],
        |m, xs| Ok(vec![m.forward(&xs[0])?]),
        |m, ps| Ok(vec![m.backward(&ps[0])?]),
        |m, xs| Ok(vec![m.forward(&xs[0])?]),
        opts,
    )?);

    let mut dw = DwConv3x3::<f32>::new(2, rng)?;
    let mut sh = dw.cast::<f64>();
    out.push(check_projected(
        "dwconv3x3",
        Scope::Module,
        Some("dwconv3x3"),
        MODULE_TOL,
        &mut dw,
        &mut sh,
        &[rand_t(&[4, 4, 2], rng)],
        |m, xs| Ok(vec![m.forward(&xs[0])?]),
        |m, ps| Ok(vec![m.backward(&ps[0])?]),
        |m, xs| Ok(vec![m.forward(&xs[0])?]),
        opts,
    )?);

    let spec = StageSpec {
        in_ch: 3,
        out_ch: 4,
        downsample: 2,
        n_heads: 1,
    };
    let mut stage = StageBlock::<f32>::new(&spec, rng)?;
    let mut sh = stage.cast::<f64>();
    out.push(check_projected(
        "stage_block",
        Scope::Module,
        Some("stage_block"),
        MODULE_TOL,
        &mut stage,
        &mut sh,
        &[rand_t(&[4, 4, 3], rng)],
        |m, xs| Ok(vec![m.forward(&xs[0])?]),
        |m, ps| Ok(vec![m.backward(&ps[0])?]),
        |m, xs| Ok(vec![m.forward(&xs[0])?]),
        opts,
    )?);

    let cfg = NetworkConfig::with_channels(&[2, 4, 4], 3, 3);
    let mut dec = Decoder::<f32>::new(&cfg, rng)?;
    let mut sh = dec.cast::<f64>();
    let feats = vec![
        rand_t(&[4, 4, 2], rng),
        rand_t(&[2, 2, 4], rng),
        rand_t(&[1, 1, 4], rng),
    ];
    out.push(check_projected(
        "decoder",
        Scope::Module,
        Some("decoder"),
        MODULE_TOL,
        &mut dec,
        &mut sh,
        &feats,
        |m, xs| Ok(vec![m.forward(xs)?]),
        |m, ps| m.backward(&ps[0]),
        |m, xs| Ok(vec![m.forward(xs)?]),
        opts,
    )?);
    Ok(())
}

fn rectify_checks(rng: &mut Rng, opts: &CheckOptions, out: &mut Vec<CheckEntry>) -> Result<()> {
    let variants = [
        ("cm_frm", RectifyConfig::default()),
        (
            "cm_frm.channel_only",
            RectifyConfig {
                lambda_c: 1.0,
                lambda_s: 0.0,
                ..Default::default()
            },
        ),
        (
            "cm_frm.spatial_only",
            RectifyConfig {
                lambda_c: 0.0,
                lambda_s: 1.0,
                ..Default::default()
            },
        ),
        (
            "cm_frm.avg_only",
            RectifyConfig {
                pool_mode: PoolMode::AvgOnly,
                ..Default::default()
            },
        ),
        (
            "cm_frm.max_only",
            RectifyConfig {
                pool_mode: PoolMode::MaxOnly,
                ..Default::default()
            },
        ),
    ];
    for (name, config) in variants {
        let mut m = CmFrm::<f32>::new(4, config, rng)?;
        let mut sh = m.cast::<f64>();
        let inputs = [rand_t(&[4, 4, 4], rng), rand_t(&[4, 4, 4], rng)];
        out.push(check_projected(
            name,
            Scope::Module,
            Some("cm_frm"),
            MODULE_TOL,
            &mut m,
            &mut sh,
            &inputs,
            |m, xs| {
                let (a, b) = m.forward(&xs[0], &xs[1])?;
                Ok(vec![a, b])
            },
            |m, ps| {
                let (a, b) = m.backward(&ps[0], &ps[1])?;
                Ok(vec![a, b])
            },
            |m, xs| {
                let (a, b) = m.forward(&xs[0], &xs[1])?;
                Ok(vec![a, b])
            },
            opts,
        )?);
    }
    Ok(())
}

fn fusion_checks(rng: &mut Rng, opts: &CheckOptions, out: &mut Vec<CheckEntry>) -> Result<()> {
    for mode in FfmMode::ALL {
        let inputs = [rand_t(&[2, 2, 4], rng), rand_t(&[2, 2, 4], rng)];
        let name = format!("ffm.{mode}");
        let e = if mode == FfmMode::Avg {
            check_projected(
                &name,
                Scope::Module,
                None,
                MODULE_TOL,
                &mut Stateless,
                &mut Stateless,
                &inputs,
                |_, xs| Ok(vec![fusion::average(&xs[0], &xs[1])?]),
                |_, ps| {
                    let (a, b) = fusion::average_backward(&ps[0])?;
                    Ok(vec![a, b])
                },
                |_, xs| Ok(vec![fusion::average(&xs[0], &xs[1])?]),
                opts,
            )?
        } else {
            let mut m = Ffm::<f32>::new(4, 2, rng)?;
            let mut sh = m.cast::<f64>();
            check_projected(
                &name,
                Scope::Module,
                Some("ffm"),
                MODULE_TOL,
                &mut m,
                &mut sh,
                &inputs,
                |m, xs| Ok(vec![m.forward(&xs[0], &xs[1], mode)?]),
                |m, ps| {
                    let (a, b) = m.backward(&ps[0])?;
                    Ok(vec![a, b])
                },
                |m, xs| Ok(vec![m.forward(&xs[0], &xs[1], mode)?]),
                opts,
            )?
        };
        out.push(e);
    }
    Ok(())
}

/// Full forward plus cross-entropy of the small configuration at 16×16.
pub fn end_to_end_check(seed: u64, probes: Option<usize>) -> Result<CheckEntry> {
    let mut rng = Rng::new(seed).split(7);
    let cfg = NetworkConfig::small();
    let mut net = Network::<f32>::new(cfg.clone(), &mut rng)?;
    let mut sh = net.cast::<f64>();
    let rgb = rand_t(&[16, 16, 3], &mut rng);
    let x = rand_t(&[16, 16, 3], &mut rng);
    let labels: Vec<u32> = (0..256).map(|_| rng.below(cfg.classes) as u32).collect();
    let opts = CheckOptions {
        max_probes_per_tensor: probes,
        seed,
        ..Default::default()
    };
    let r = grad_check(
        &mut net,
        &mut sh,
        &[rgb, x],
        |m, xs| {
            let logits = m.forward(&xs[0], Some(&xs[1]))?;
            let (_, g) = cross_entropy(&logits, &labels, DEFAULT_IGNORE)?;
            let (da, db) = m.backward(&g)?;
            Ok(vec![da, db.expect("two streams")])
        },
        |m, xs| {
            let logits = m.forward(&xs[0], Some(&xs[1]))?;
            Ok(cross_entropy(&logits, &labels, DEFAULT_IGNORE)?.0)
        },
        &opts,
    )?;
    Ok(entry("network", Scope::EndToEnd, Some("network"), END_TO_END_TOL, r))
}

pub fn run_suite(opts: &SuiteOptions) -> Result<GradcheckReport> {
    let rng = Rng::new(opts.seed);
    let check = CheckOptions {
        seed: opts.seed,
        ..Default::default()
    };
    let mut entries = Vec::new();
    kernel_checks(&mut rng.split(1), &check, &mut entries)?;
    layer_checks(&mut rng.split(2), &check, &mut entries)?;
    rectify_checks(&mut rng.split(3), &check, &mut entries)?;
    fusion_checks(&mut rng.split(4), &check, &mut entries)?;
    entries.push(end_to_end_check(opts.seed, opts.end_to_end_probes)?);

    let uncovered: Vec<String> = PARAM_OPS
        .iter()
        .filter(|op| !entries.iter().any(|e| e.covers.as_deref() == Some(**op)))
        .map(|s| s.to_string())
        .collect();
    let all_pass = uncovered.is_empty() && entries.iter().all(|e| e.pass);
    Ok(GradcheckReport {
        command: "gradcheck".into(),
        seed: opts.seed,
        entries,
        uncovered,
        all_pass,
        wall_time_s: None,
    })
}
