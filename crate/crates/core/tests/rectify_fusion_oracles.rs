mod common;

use cmx_core::fusion::{Ffm, FfmMode};
use cmx_core::numerics::flops;
use cmx_core::rectify::{CmFrm, PoolMode, RectifyConfig};
use cmx_core::{Rng, Tensor};
use proptest::prelude::*;

use common::*;

/// Reference rectification, written directly from the block's definition.
fn cm_frm_oracle(m: &CmFrm<f32>, rgb: &Tensor<f32>, x: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let (h, w, c) = rgb.hwc().unwrap();
    let n = h * w;
    let (r, xx) = (to64(rgb), to64(x));
    let cfg = m.config;

    let mut y = Vec::new();
    for src in [&r, &xx] {
        if cfg.pool_mode != PoolMode::MaxOnly {
            y.extend(channel_mean(src, c));
        }
        if cfg.pool_mode != PoolMode::AvgOnly {
            y.extend(channel_max(src, c));
        }
    }
    let b1 = to64(&m.mlp1.b.as_ref().unwrap().value);
    let hid: Vec<f64> = common::linear(&y, 1, y.len(), &to64(&m.mlp1.w.value), c, Some(&b1))
        .into_iter()
        .map(relu)
        .collect();
    let b2 = to64(&m.mlp2.b.as_ref().unwrap().value);
    let cw: Vec<f64> = common::linear(&hid, 1, c, &to64(&m.mlp2.w.value), 2 * c, Some(&b2))
        .into_iter()
        .map(sigmoid)
        .collect();
    let (w_rgb, w_x) = cw.split_at(c);

    let mut cat = Vec::with_capacity(n * 2 * c);
    for p in 0..n {
        cat.extend_from_slice(&r[p * c..(p + 1) * c]);
        cat.extend_from_slice(&xx[p * c..(p + 1) * c]);
    }
    let s1 = &m.sconv1.lin;
    let s2 = &m.sconv2.lin;
    let sh: Vec<f64> = common::linear(
        &cat,
        n,
        2 * c,
        &to64(&s1.w.value),
        c,
        Some(&to64(&s1.b.as_ref().unwrap().value)),
    )
    .into_iter()
    .map(relu)
    .collect();
    let sm: Vec<f64> = common::linear(
        &sh,
        n,
        c,
        &to64(&s2.w.value),
        2,
        Some(&to64(&s2.b.as_ref().unwrap().value)),
    )
    .into_iter()
    .map(sigmoid)
    .collect();

    let mut out_rgb = r.clone();
    let mut out_x = xx.clone();
    for p in 0..n {
        for ch in 0..c {
            let i = p * c + ch;
            out_rgb[i] += cfg.lambda_c * w_x[ch] * xx[i] + cfg.lambda_s * sm[p * 2 + 1] * xx[i];
            out_x[i] += cfg.lambda_c * w_rgb[ch] * r[i] + cfg.lambda_s * sm[p * 2] * r[i];
        }
    }
    (out_rgb, out_x)
}

#[test]
fn cm_frm_matches_oracle_for_every_variant() {
    let mut rng = Rng::new(11);
    for (lc, ls) in [(0.5, 0.5), (1.0, 0.0), (0.0, 1.0), (0.3, 0.9)] {
        for pool_mode in [PoolMode::Both, PoolMode::AvgOnly, PoolMode::MaxOnly] {
            let cfg = RectifyConfig {
                lambda_c: lc,
                lambda_s: ls,
                pool_mode,
            };
            let mut m = CmFrm::<f32>::new(6, cfg, &mut rng).unwrap();
            let rgb = rand_tensor(&mut rng, &[3, 4, 6], 1.0);
            let x = rand_tensor(&mut rng, &[3, 4, 6], 1.0);
            let (a, b) = m.forward(&rgb, &x).unwrap();
            let (wa, wb) = cm_frm_oracle(&m, &rgb, &x);
            assert!(max_abs_diff(&to64(&a), &wa) < 1e-5, "{cfg:?}");
            assert!(max_abs_diff(&to64(&b), &wb) < 1e-5, "{cfg:?}");
        }
    }
}

#[test]
fn cross_exchange_2x2x4_two_heads_matches_f64_oracle() {
    let mut rng = Rng::new(21);
    for trial in 0..20 {
        let mut f = Ffm::<f32>::new(4, 2, &mut rng).unwrap();
        let rgb = rand_tensor(&mut rng, &[2, 2, 4], 1.0);
        let x = rand_tensor(&mut rng, &[2, 2, 4], 1.0);
        for exchange in [true, false] {
            let (a, b) = f.cross_exchange(&rgb, &x, exchange).unwrap();
            assert_eq!(a.shape(), &[2, 2, 4]);
            let (wa, wb) = cross_exchange_oracle(&f, &rgb, &x, exchange);
            let err = max_abs_diff(&to64(&a), &wa).max(max_abs_diff(&to64(&b), &wb));
            assert!(err <= 1e-5, "trial {trial} exchange {exchange}: {err:e}");
        }
    }
}

#[test]
fn cross_exchange_larger_shapes_match_oracle() {
    let mut rng = Rng::new(22);
    for (h, w, c, heads) in [(3, 5, 8, 4), (4, 4, 6, 3), (1, 7, 5, 1)] {
        let mut f = Ffm::<f32>::new(c, heads, &mut rng).unwrap();
        let rgb = rand_tensor(&mut rng, &[h, w, c], 1.0);
        let x = rand_tensor(&mut rng, &[h, w, c], 1.0);
        let (a, b) = f.cross_exchange(&rgb, &x, true).unwrap();
        let (wa, wb) = cross_exchange_oracle(&f, &rgb, &x, true);
        assert!(max_abs_diff(&to64(&a), &wa) < 1e-5);
        assert!(max_abs_diff(&to64(&b), &wb) < 1e-5);
    }
}

#[test]
fn fuse_stage_matches_oracle() {
    let mut rng = Rng::new(23);
    let (h, w, c) = (3, 4, 4);
    let mut f = Ffm::<f32>::new(c, 2, &mut rng).unwrap();
    let rgb = rand_tensor(&mut rng, &[h, w, c], 1.0);
    let x = rand_tensor(&mut rng, &[h, w, c], 1.0);
    let got = f.forward(&rgb, &x, FfmMode::Stage2Only).unwrap();

    let n = h * w;
    let (r, xx) = (to64(&rgb), to64(&x));
    let cat: Vec<f64> = (0..n)
        .flat_map(|p| {
            r[p * c..(p + 1) * c]
                .iter()
                .chain(&xx[p * c..(p + 1) * c])
                .copied()
                .collect::<Vec<_>>()
        })
        .collect();
    let w1 = &f.fuse.w1.lin;
    let z = common::linear(
        &cat,
        n,
        2 * c,
        &to64(&w1.w.value),
        c,
        Some(&to64(&w1.b.as_ref().unwrap().value)),
    );
    let d = dwconv3x3(&z, h, w, c, &to64(&f.fuse.dw.w.value), &to64(&f.fuse.dw.b.value));
    let a: Vec<f64> = z.iter().zip(&d).map(|(z, d)| gelu(z + d)).collect();
    let w2 = &f.fuse.w2.lin;
    let want = common::linear(
        &a,
        n,
        c,
        &to64(&w2.w.value),
        c,
        Some(&to64(&w2.b.as_ref().unwrap().value)),
    );
    assert!(max_abs_diff(&to64(&got), &want) < 1e-5);
}

#[test]
fn cross_exchange_flops_scale_linearly_in_pixels() {
    let mut rng = Rng::new(31);
    for (c, heads) in [(4, 2), (16, 4), (32, 8)] {
        let mut f = Ffm::<f32>::new(c, heads, &mut rng).unwrap();
        let count = |f: &mut Ffm<f32>, h: usize, w: usize, rng: &mut Rng| {
            let rgb = rand_tensor(rng, &[h, w, c], 1.0);
            let x = rand_tensor(rng, &[h, w, c], 1.0);
            flops::measure(|| f.cross_exchange(&rgb, &x, true).unwrap()).1
        };
        for (h, w) in [(8, 8), (16, 16), (32, 32)] {
            let n1 = count(&mut f, h, w, &mut rng);
            let n2 = count(&mut f, h, 2 * w, &mut rng);
            let ratio = n2 as f64 / n1 as f64;
            assert!((ratio - 2.0).abs() <= 0.1, "C={c} N={}: ratio {ratio}", h * w);
        }
    }
}

fn finite_tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor<f32>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1e3f32..1e3, n).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_lambda_rectification_is_identity(
        rgb in finite_tensor(&[3, 2, 4]),
        x in finite_tensor(&[3, 2, 4]),
        seed in any::<u64>(),
        pool in prop::sample::select(vec![PoolMode::Both, PoolMode::AvgOnly, PoolMode::MaxOnly]),
    ) {
        let cfg = RectifyConfig { lambda_c: 0.0, lambda_s: 0.0, pool_mode: pool };
        let mut m = CmFrm::<f32>::new(4, cfg, &mut Rng::new(seed)).unwrap();
        let (a, b) = m.forward(&rgb, &x).unwrap();
        prop_assert_eq!(a, rgb);
        prop_assert_eq!(b, x);
    }

    #[test]
    fn avg_of_equal_inputs_is_identity(a in finite_tensor(&[2, 3, 4]), seed in any::<u64>()) {
        let mut f = Ffm::<f32>::new(4, 2, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(f.forward(&a, &a, FfmMode::Avg).unwrap(), a);
    }

    #[test]
    fn exchange_attention_rows_are_distributions(seed in any::<u64>(), scale in 0.1f64..5.0) {
        let mut rng = Rng::new(seed);
        let mut f = Ffm::<f32>::new(6, 3, &mut rng).unwrap();
        let rgb = rand_tensor(&mut rng, &[2, 3, 6], scale);
        let x = rand_tensor(&mut rng, &[2, 3, 6], scale);
        f.cross_exchange(&rgb, &x, true).unwrap();
        for path in [true, false] {
            for hd in 0..3 {
                let s = f.last_attention(path, hd).unwrap();
                for row in s.data().chunks(2) {
                    prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}
