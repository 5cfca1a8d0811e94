mod common;

use cmx_core::numerics::kernels::{self, Pointwise, PoolKind};
use cmx_core::numerics::{conv1x1, linear, DwConv3x3, Linear};
use cmx_core::{Rng, Tensor};
use proptest::prelude::*;

use common::*;

const TOL: f64 = 1e-5;

#[test]
fn linear_matches_loop() {
    let mut rng = Rng::new(1);
    for (n, cin, cout) in [(1, 1, 1), (5, 7, 3), (13, 16, 9), (4, 33, 17)] {
        let x = rand_tensor(&mut rng, &[n, cin], 1.0);
        let w = rand_tensor(&mut rng, &[cin, cout], 0.5);
        let b = rand_tensor(&mut rng, &[cout], 0.5);
        let got = linear(&x, &w, Some(&b)).unwrap();
        let want = common::linear(&to64(&x), n, cin, &to64(&w), cout, Some(&to64(&b)));
        assert!(max_abs_diff(&to64(&got), &want) < TOL, "{n}×{cin}×{cout}");
        let nobias = linear(&x, &w, None).unwrap();
        let want = common::linear(&to64(&x), n, cin, &to64(&w), cout, None);
        assert!(max_abs_diff(&to64(&nobias), &want) < TOL);
    }
}

#[test]
fn conv1x1_matches_loop() {
    let mut rng = Rng::new(2);
    let (h, w, cin, cout) = (3, 5, 6, 4);
    let x = rand_tensor(&mut rng, &[h, w, cin], 1.0);
    let k = rand_tensor(&mut rng, &[cin, cout], 0.5);
    let b = rand_tensor(&mut rng, &[cout], 0.5);
    let got = conv1x1(&x, &k, Some(&b)).unwrap();
    assert_eq!(got.shape(), &[h, w, cout]);
    let want = common::linear(&to64(&x), h * w, cin, &to64(&k), cout, Some(&to64(&b)));
    assert!(max_abs_diff(&to64(&got), &want) < TOL);
}

#[test]
fn dwconv3x3_matches_loop() {
    let mut rng = Rng::new(3);
    for (h, w, c) in [(1, 1, 1), (2, 3, 2), (5, 4, 3), (8, 8, 5)] {
        let x = rand_tensor(&mut rng, &[h, w, c], 1.0);
        let k = rand_tensor(&mut rng, &[3, 3, c], 0.5);
        let b = rand_tensor(&mut rng, &[c], 0.5);
        let got = kernels::dwconv3x3(&x, &k, &b).unwrap();
        let want = common::dwconv3x3(&to64(&x), h, w, c, &to64(&k), &to64(&b));
        assert!(max_abs_diff(&to64(&got), &want) < TOL, "{h}×{w}×{c}");
        let mut layer = DwConv3x3::from_weights(k, b);
        assert_eq!(layer.forward(&x).unwrap(), got);
    }
}

#[test]
fn global_pools_match_loop() {
    let mut rng = Rng::new(4);
    let (h, w, c) = (4, 3, 5);
    let x = rand_tensor(&mut rng, &[h, w, c], 2.0);
    let avg = kernels::global_pool(PoolKind::Avg, &x).unwrap();
    let max = kernels::global_pool(PoolKind::Max, &x).unwrap();
    assert!(max_abs_diff(&to64(&avg), &channel_mean(&to64(&x), c)) < TOL);
    assert_eq!(to64(&max), channel_max(&to64(&x), c));
}

#[test]
fn pointwise_and_softmax_match_formulas() {
    let mut rng = Rng::new(5);
    let x = rand_tensor(&mut rng, &[6, 7], 4.0);
    let xs = to64(&x);
    for (kind, f) in [
        (Pointwise::Sigmoid, sigmoid as fn(f64) -> f64),
        (Pointwise::Relu, relu),
        (Pointwise::Gelu, gelu),
    ] {
        let got = to64(&kernels::pointwise(kind, &x));
        let want: Vec<f64> = xs.iter().map(|&v| f(v)).collect();
        assert!(max_abs_diff(&got, &want) < TOL, "{kind:?}");
    }
    let got = to64(&kernels::softmax_last(&x));
    assert!(max_abs_diff(&got, &softmax_rows(&xs, 7)) < TOL);
}

#[test]
fn space_to_depth_and_upsample_match_index_formulas() {
    let (h, w, c, s) = (4, 6, 3, 2);
    let x = Tensor::<f32>::from_fn(&[h, w, c], |i| i as f32).unwrap();
    let d = kernels::space_to_depth(&x, s).unwrap();
    assert_eq!(d.shape(), &[h / s, w / s, s * s * c]);
    for i in 0..h / s {
        for j in 0..w / s {
            for dy in 0..s {
                for dx in 0..s {
                    for ch in 0..c {
                        let got = d.data()[(i * (w / s) + j) * s * s * c + (dy * s + dx) * c + ch];
                        let want = x.data()[((i * s + dy) * w + j * s + dx) * c + ch];
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }
    assert_eq!(kernels::depth_to_space(&d, s).unwrap(), x);

    let u = kernels::upsample_nearest(&x, 3).unwrap();
    for i in 0..h * 3 {
        for j in 0..w * 3 {
            for ch in 0..c {
                assert_eq!(
                    u.data()[(i * w * 3 + j) * c + ch],
                    x.data()[((i / 3) * w + j / 3) * c + ch]
                );
            }
        }
    }
}

#[test]
fn linear_layer_backward_matches_loops() {
    let mut rng = Rng::new(6);
    let (n, cin, cout) = (5, 4, 3);
    let mut lin = Linear::<f32>::new(cin, cout, true, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[n, cin], 1.0);
    let g = rand_tensor(&mut rng, &[n, cout], 1.0);
    lin.forward(&x).unwrap();
    let dx = lin.backward(&g).unwrap();
    let (xs, gs, ws) = (to64(&x), to64(&g), to64(&lin.w.value));
    let mut want_dx = vec![0.0; n * cin];
    let mut want_dw = vec![0.0; cin * cout];
    let mut want_db = vec![0.0; cout];
    for i in 0..n {
        for o in 0..cout {
            want_db[o] += gs[i * cout + o];
            for k in 0..cin {
                want_dx[i * cin + k] += gs[i * cout + o] * ws[k * cout + o];
                want_dw[k * cout + o] += xs[i * cin + k] * gs[i * cout + o];
            }
        }
    }
    assert!(max_abs_diff(&to64(&dx), &want_dx) < TOL);
    assert!(max_abs_diff(&to64(&lin.w.grad), &want_dw) < TOL);
    assert!(max_abs_diff(&to64(&lin.b.as_ref().unwrap().grad), &want_db) < TOL);
}

/// Matrix products accumulate each output in index order, like the naive loop.
fn naive_f32(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn transpose(a: &[f32], r: usize, c: usize) -> Vec<f32> {
    let mut t = vec![0.0; a.len()];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_variants_are_bitwise_naive(m in 1usize..9, k in 1usize..11, n in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = rand_tensor(&mut rng, &[m, k], 1.0);
        let b = rand_tensor(&mut rng, &[k, n], 1.0);
        let want = naive_f32(a.data(), b.data(), m, k, n);
        prop_assert_eq!(kernels::matmul(&a, &b).unwrap().into_data(), want.clone());

        let at = Tensor::new(&[k, m], transpose(a.data(), m, k)).unwrap();
        prop_assert_eq!(kernels::matmul_tn(&at, &b).unwrap().into_data(), want.clone());

        let bt = Tensor::new(&[n, k], transpose(b.data(), k, n)).unwrap();
        prop_assert_eq!(kernels::matmul_nt(&a, &bt).unwrap().into_data(), want.clone());
    }

    #[test]
    fn softmax_rows_are_distributions(r in 1usize..5, c in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = rand_tensor(&mut rng, &[r, c], 30.0);
        let y = kernels::softmax_last(&x);
        for row in y.data().chunks(c) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn space_to_depth_round_trips(hs in 1usize..4, ws in 1usize..4, c in 1usize..4, s in 1usize..4) {
        let x = Tensor::<f32>::from_fn(&[hs * s, ws * s, c], |i| i as f32).unwrap();
        let d = kernels::space_to_depth(&x, s).unwrap();
        prop_assert_eq!(kernels::depth_to_space(&d, s).unwrap(), x);
    }
}
