//! Plain f64 loop implementations used as independent references.
#![allow(dead_code)]

use cmx_core::fusion::{ExchangePath, Ffm};
use cmx_core::numerics::Linear;
use cmx_core::{Rng, Tensor};

pub fn rand_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-scale, scale)).collect()
}

pub fn rand_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    let v: Vec<f32> = rand_vec(rng, n, scale).into_iter().map(|x| x as f32).collect();
    Tensor::new(shape, v).unwrap()
}

pub fn to64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `x (n×cin) · w (cin×cout) + b`.
pub fn linear(x: &[f64], n: usize, cin: usize, w: &[f64], cout: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut y = vec![0.0; n * cout];
    for i in 0..n {
        for o in 0..cout {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for k in 0..cin {
                acc += x[i * cin + k] * w[k * cout + o];
            }
            y[i * cout + o] = acc;
        }
    }
    y
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

/// Softmax of each row of an `r × c` matrix.
pub fn softmax_rows(x: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Depthwise 3×3, zero padded, `w` laid out `3 × 3 × C`.
pub fn dwconv3x3(x: &[f64], h: usize, w: usize, c: usize, k: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; h * w * c];
    for i in 0..h as isize {
        for j in 0..w as isize {
            for ch in 0..c {
                let mut acc = b[ch];
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (ii, jj) = (i + dy, j + dx);
                        if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                            continue;
                        }
                        let tap = ((dy + 1) * 3 + dx + 1) as usize;
                        acc += k[tap * c + ch] * x[(ii as usize * w + jj as usize) * c + ch];
                    }
                }
                y[(i as usize * w + j as usize) * c + ch] = acc;
            }
        }
    }
    y
}

pub fn channel_mean(x: &[f64], c: usize) -> Vec<f64> {
    let n = x.len() / c;
    (0..c)
        .map(|ch| (0..n).map(|p| x[p * c + ch]).sum::<f64>() / n as f64)
        .collect()
}

pub fn channel_max(x: &[f64], c: usize) -> Vec<f64> {
    let n = x.len() / c;
    (0..c)
        .map(|ch| (0..n).map(|p| x[p * c + ch]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Reference exchange stage evaluated in f64 from the module's weights.
pub fn cross_exchange_oracle(f: &Ffm<f32>, rgb: &Tensor<f32>, x: &Tensor<f32>, exchange: bool) -> (Vec<f64>, Vec<f64>) {
    let (_, _, c) = rgb.hwc().unwrap();
    let heads = f.n_heads;
    let ch = c / heads;
    let n = rgb.numel() / c;

    struct Embedded {
        res: Vec<f64>,
        inter: Vec<f64>,
        attn: Vec<Vec<f64>>,
    }
    let embed = |path: &ExchangePath<f32>, t: &Tensor<f32>| {
        let flat = to64(t);
        let lin = |l: &Linear<f32>, v: &[f64], rows: usize| {
            let cin = l.in_features();
            let b = l.b.as_ref().map(|b| to64(&b.value));
            linear(v, rows, cin, &to64(&l.w.value), l.out_features(), b.as_deref())
        };
        let res = lin(&path.e_res, &flat, n);
        let inter = lin(&path.e_inter, &flat, n);
        let attn = (0..heads)
            .map(|hd| {
                let slice: Vec<f64> = (0..n)
                    .flat_map(|p| inter[p * c + hd * ch..p * c + (hd + 1) * ch].to_vec())
                    .collect();
                let k = lin(&path.k_proj[hd], &slice, n);
                let v = lin(&path.v_proj[hd], &slice, n);
                let mut g = vec![0.0; ch * ch];
                for a in 0..ch {
                    for b in 0..ch {
                        g[a * ch + b] = (0..n).map(|p| k[p * ch + a] * v[p * ch + b]).sum();
                    }
                }
                softmax_rows(&g, ch)
            })
            .collect();
        Embedded { res, inter, attn }
    };
    let er = embed(&f.rgb, rgb);
    let ex = embed(&f.x, x);

    let attend = |me: &Embedded, ctx: &Embedded, path: &ExchangePath<f32>| {
        let mut cat = vec![0.0; n * 2 * c];
        for p in 0..n {
            for hd in 0..heads {
                let s = &ctx.attn[hd];
                for j in 0..ch {
                    let mut acc = 0.0;
                    for i in 0..ch {
                        acc += me.inter[p * c + hd * ch + i] * s[i * ch + j];
                    }
                    cat[p * 2 * c + hd * ch + j] = acc;
                }
            }
            cat[p * 2 * c + c..(p + 1) * 2 * c].copy_from_slice(&me.res[p * c..(p + 1) * c]);
        }
        let o = &path.out_proj;
        linear(
            &cat,
            n,
            2 * c,
            &to64(&o.w.value),
            c,
            Some(&to64(&o.b.as_ref().unwrap().value)),
        )
    };
    if exchange {
        (attend(&er, &ex, &f.rgb), attend(&ex, &er, &f.x))
    } else {
        (attend(&er, &er, &f.rgb), attend(&ex, &ex, &f.x))
    }
}
