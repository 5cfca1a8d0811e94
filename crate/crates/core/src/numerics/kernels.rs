//! Forward kernels and their hand-written backward counterparts.
//!
//! Every reduction accumulates sequentially in storage order so results are
//! bit reproducible.

use serde::{Deserialize, Serialize};

use super::{flops, Scalar, Tensor};
use crate::error::{Error, Result};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pointwise {
    Sigmoid,
    Relu,
    /// tanh approximation `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
    Gelu,
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl Pointwise {
    #[inline]
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Pointwise::Sigmoid => sigmoid(x),
            Pointwise::Relu => x.max(F::zero()),
            Pointwise::Gelu => {
                let k = F::of(GELU_K);
                let a = F::of(GELU_A);
                let u = k * (x + a * x * x * x);
                F::of(0.5) * x * (F::one() + u.tanh())
            }
        }
    }

    /// Derivative with respect to the input, evaluated at input `x`.
    #[inline]
    pub fn derivative<F: Scalar>(self, x: F) -> F {
        match self {
            Pointwise::Sigmoid => {
                let s = sigmoid(x);
                s * (F::one() - s)
            }
            Pointwise::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Pointwise::Gelu => {
                let k = F::of(GELU_K);
                let a = F::of(GELU_A);
                let half = F::of(0.5);
                let t = (k * (x + a * x * x * x)).tanh();
                half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::of(3.0) * a * x * x)
            }
        }
    }
}

pub fn pointwise<F: Scalar>(kind: Pointwise, x: &Tensor<F>) -> Tensor<F> {
    flops::add(x.numel());
    x.map(|v| kind.apply(v))
}

/// Input gradient of [`pointwise`] given the forward input `x`.
pub fn pointwise_backward<F: Scalar>(kind: Pointwise, x: &Tensor<F>, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    flops::add(2 * x.numel());
    x.zip_map(upstream, "pointwise_backward", |v, g| kind.derivative(v) * g)
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_last<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let n = *x.shape().last().expect("rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let m = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut s = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    flops::add(4 * x.numel());
    out
}

/// Input gradient of [`softmax_last`] from its output `y`.
pub fn softmax_last_backward<F: Scalar>(y: &Tensor<F>, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    y.expect_same_shape(upstream, "softmax_backward")?;
    let n = *y.shape().last().expect("rank >= 1");
    let mut out = y.zeros_like();
    for ((o, yr), gr) in out
        .data_mut()
        .chunks_mut(n)
        .zip(y.data().chunks(n))
        .zip(upstream.data().chunks(n))
    {
        let dot = yr.iter().zip(gr).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
        for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    flops::add(4 * y.numel());
    Ok(out)
}

/// `row[j] += Σ_t c[t]·rows[t][j]`, added term by term from left to right so
/// the result is bitwise equal to four separate updates.
#[inline]
fn axpy4<F: Scalar>(row: &mut [F], c: [F; 4], rows: [&[F]; 4]) {
    let [r0, r1, r2, r3] = rows;
    for ((((o, &x0), &x1), &x2), &x3) in row.iter_mut().zip(r0).zip(r1).zip(r2).zip(r3) {
        *o = *o + c[0] * x0 + c[1] * x1 + c[2] * x2 + c[3] * x3;
    }
}

#[inline]
fn axpy1<F: Scalar>(row: &mut [F], c: F, x: &[F]) {
    for (o, &v) in row.iter_mut().zip(x) {
        *o += c * v;
    }
}

/// `a (m×k) · b (k×n)`. Each output accumulates over `k` in order.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.rows_cols()?;
    let (k2, n) = b.rows_cols()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![F::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    let brow = |p: usize| &bd[p * n..(p + 1) * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &ad[i * k..(i + 1) * k];
        let mut p = 0;
        while p + 4 <= k {
            axpy4(
                row,
                [arow[p], arow[p + 1], arow[p + 2], arow[p + 3]],
                [brow(p), brow(p + 1), brow(p + 2), brow(p + 3)],
            );
            p += 4;
        }
        for p in p..k {
            axpy1(row, arow[p], brow(p));
        }
    }
    flops::add(2 * m * k * n);
    Tensor::new(&[m, n], out)
}

/// `aᵀ (k×m)ᵀ · b (m×n)` without materializing the transpose. Each output
/// accumulates over `m` in order.
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.rows_cols()?;
    let (m2, n) = b.rows_cols()?;
    if m != m2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![F::zero(); k * n];
    let (ad, bd) = (a.data(), b.data());
    let brow = |r: usize| &bd[r * n..(r + 1) * n];
    let mut r = 0;
    while r + 4 <= m {
        for p in 0..k {
            let c = [
                ad[r * k + p],
                ad[(r + 1) * k + p],
                ad[(r + 2) * k + p],
                ad[(r + 3) * k + p],
            ];
            axpy4(
                &mut out[p * n..(p + 1) * n],
                c,
                [brow(r), brow(r + 1), brow(r + 2), brow(r + 3)],
            );
        }
        r += 4;
    }
    for r in r..m {
        for p in 0..k {
            axpy1(&mut out[p * n..(p + 1) * n], ad[r * k + p], brow(r));
        }
    }
    flops::add(2 * m * k * n);
    Tensor::new(&[k, n], out)
}

/// `a (m×k) · bᵀ` where `b` is `n×k`. Accumulates over `k` in order, like
/// [`matmul`].
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (_, k) = a.rows_cols()?;
    let (n, k2) = b.rows_cols()?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let bd = b.data();
    let mut bt = vec![F::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = bd[j * k + p];
        }
    }
    matmul(a, &Tensor::new(&[k, n], bt)?)
}

/// Adds a bias row to every row of an `N × C` matrix in place.
pub fn add_row_bias<F: Scalar>(x: &mut Tensor<F>, bias: &Tensor<F>) -> Result<()> {
    let c = *x.shape().last().expect("rank >= 1");
    if bias.shape() != [c] {
        return Err(Error::shape("add_row_bias", x.shape(), bias.shape()));
    }
    for row in x.data_mut().chunks_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    flops::add(x.numel());
    Ok(())
}

/// Column sums of an `N × C` matrix (sequential over rows).
pub fn col_sums<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let c = *x.shape().last().expect("rank >= 1");
    let mut out = vec![F::zero(); c];
    for row in x.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    flops::add(x.numel());
    Tensor::new(&[c], out)
}

/// Depthwise 3×3 convolution with one pixel of zero padding.
/// `w` is `3 × 3 × C`, tap `(dy, dx)` reads input pixel `(h + dy - 1, w + dx - 1)`.
pub fn dwconv3x3<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, wd, c) = x.hwc()?;
    if w.shape() != [3, 3, c] || b.shape() != [c] {
        return Err(Error::shape("dwconv3x3", x.shape(), w.shape()));
    }
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![F::zero(); h * wd * c];
    for i in 0..h {
        for j in 0..wd {
            let o = &mut out[(i * wd + j) * c..(i * wd + j + 1) * c];
            o.copy_from_slice(b.data());
            for dy in 0..3 {
                let ii = i as isize + dy as isize - 1;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let jj = j as isize + dx as isize - 1;
                    if jj < 0 || jj >= wd as isize {
                        continue;
                    }
                    let src = (ii as usize * wd + jj as usize) * c;
                    let tap = (dy * 3 + dx) * c;
                    for ch in 0..c {
                        o[ch] += wdat[tap + ch] * xd[src + ch];
                    }
                }
            }
        }
    }
    flops::add(18 * h * wd * c);
    Tensor::new(&[h, wd, c], out)
}

/// Gradients of [`dwconv3x3`]: `(d_input, d_weight, d_bias)`.
pub fn dwconv3x3_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (h, wd, c) = x.hwc()?;
    x.expect_same_shape(upstream, "dwconv3x3_backward")?;
    let (xd, wdat, gd) = (x.data(), w.data(), upstream.data());
    let mut dx = vec![F::zero(); h * wd * c];
    let mut dw = vec![F::zero(); 9 * c];
    let mut db = vec![F::zero(); c];
    for i in 0..h {
        for j in 0..wd {
            let g = &gd[(i * wd + j) * c..(i * wd + j + 1) * c];
            for ch in 0..c {
                db[ch] += g[ch];
            }
            for dy in 0..3 {
                let ii = i as isize + dy as isize - 1;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dxx in 0..3 {
                    let jj = j as isize + dxx as isize - 1;
                    if jj < 0 || jj >= wd as isize {
                        continue;
                    }
                    let src = (ii as usize * wd + jj as usize) * c;
                    let tap = (dy * 3 + dxx) * c;
                    for ch in 0..c {
                        dx[src + ch] += wdat[tap + ch] * g[ch];
                        dw[tap + ch] += xd[src + ch] * g[ch];
                    }
                }
            }
        }
    }
    flops::add(36 * h * wd * c);
    Ok((
        Tensor::new(&[h, wd, c], dx)?,
        Tensor::new(&[3, 3, c], dw)?,
        Tensor::new(&[c], db)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

/// Per-channel reduction over all spatial positions of an `H × W × C` tensor.
pub fn global_pool<F: Scalar>(kind: PoolKind, x: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w, c) = x.hwc()?;
    let init = match kind {
        PoolKind::Avg => F::zero(),
        PoolKind::Max => F::neg_infinity(),
    };
    let mut out = vec![init; c];
    for px in x.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            match kind {
                PoolKind::Avg => *o += v,
                PoolKind::Max => *o = o.max(v),
            }
        }
    }
    if kind == PoolKind::Avg {
        let n = F::of((h * w) as f64);
        out.iter_mut().for_each(|o| *o /= n);
    }
    flops::add(x.numel());
    Tensor::new(&[c], out)
}

/// Input gradient of [`global_pool`]. Max routes to the first maximal position.
pub fn global_pool_backward<F: Scalar>(kind: PoolKind, x: &Tensor<F>, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w, c) = x.hwc()?;
    if upstream.shape() != [c] {
        return Err(Error::shape("global_pool_backward", x.shape(), upstream.shape()));
    }
    let g = upstream.data();
    let mut dx = x.zeros_like();
    match kind {
        PoolKind::Avg => {
            let n = F::of((h * w) as f64);
            for px in dx.data_mut().chunks_mut(c) {
                for (d, &gv) in px.iter_mut().zip(g) {
                    *d = gv / n;
                }
            }
        }
        PoolKind::Max => {
            let xd = x.data();
            for ch in 0..c {
                let mut best = 0;
                for p in 1..h * w {
                    if xd[p * c + ch] > xd[best * c + ch] {
                        best = p;
                    }
                }
                dx.data_mut()[best * c + ch] = g[ch];
            }
        }
    }
    flops::add(x.numel());
    Ok(dx)
}

/// Concatenates along the last axis; leading axes must agree.
pub fn concat_last<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let ra = a.rank();
    if ra != b.rank() || a.shape()[..ra - 1] != b.shape()[..ra - 1] {
        return Err(Error::shape("concat", a.shape(), b.shape()));
    }
    let (ca, cb) = (a.shape()[ra - 1], b.shape()[ra - 1]);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for (ra_, rb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        data.extend_from_slice(ra_);
        data.extend_from_slice(rb);
    }
    let mut shape = a.shape().to_vec();
    shape[ra - 1] = ca + cb;
    Tensor::new(&shape, data)
}

/// Splits the last axis at `at`; inverse of [`concat_last`].
pub fn split_last<F: Scalar>(x: &Tensor<F>, at: usize) -> Result<(Tensor<F>, Tensor<F>)> {
    let r = x.rank();
    let c = x.shape()[r - 1];
    if at == 0 || at >= c {
        return Err(Error::InvalidArgument(format!("split at {at} of {c}")));
    }
    let mut a = Vec::with_capacity(x.numel() / c * at);
    let mut b = Vec::with_capacity(x.numel() / c * (c - at));
    for row in x.data().chunks(c) {
        a.extend_from_slice(&row[..at]);
        b.extend_from_slice(&row[at..]);
    }
    let mut sa = x.shape().to_vec();
    let mut sb = x.shape().to_vec();
    sa[r - 1] = at;
    sb[r - 1] = c - at;
    Ok((Tensor::new(&sa, a)?, Tensor::new(&sb, b)?))
}

/// Columns `[start, start + len)` of an `N × C` matrix.
pub fn slice_cols<F: Scalar>(x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
    let (n, c) = x.rows_cols()?;
    if start + len > c || len == 0 {
        return Err(Error::InvalidArgument(format!(
            "columns {start}..{} of {c}",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(n * len);
    for row in x.data().chunks(c) {
        out.extend_from_slice(&row[start..start + len]);
    }
    Tensor::new(&[n, len], out)
}

/// Adds `src` (`N × len`) into columns starting at `start` of `dst` (`N × C`).
pub fn add_into_cols<F: Scalar>(dst: &mut Tensor<F>, start: usize, src: &Tensor<F>) -> Result<()> {
    let (n, c) = dst.rows_cols()?;
    let (n2, len) = src.rows_cols()?;
    if n != n2 || start + len > c {
        return Err(Error::shape("add_into_cols", dst.shape(), src.shape()));
    }
    for (drow, srow) in dst.data_mut().chunks_mut(c).zip(src.data().chunks(len)) {
        for (d, &s) in drow[start..start + len].iter_mut().zip(srow) {
            *d += s;
        }
    }
    Ok(())
}

/// Rearranges non-overlapping `s × s` patches into channels:
/// `(H, W, C) -> (H/s, W/s, s·s·C)`, channel index `(dy·s + dx)·C + c`.
pub fn space_to_depth<F: Scalar>(x: &Tensor<F>, s: usize) -> Result<Tensor<F>> {
    let (h, w, c) = x.hwc()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("spatial size not divisible by {s}"),
        });
    }
    let (ho, wo) = (h / s, w / s);
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..ho {
        for j in 0..wo {
            for dy in 0..s {
                for dx in 0..s {
                    let src = ((i * s + dy) * w + (j * s + dx)) * c;
                    out.extend_from_slice(&xd[src..src + c]);
                }
            }
        }
    }
    Tensor::new(&[ho, wo, s * s * c], out)
}

/// Inverse of [`space_to_depth`]; also its backward.
pub fn depth_to_space<F: Scalar>(x: &Tensor<F>, s: usize) -> Result<Tensor<F>> {
    let (ho, wo, cc) = x.hwc()?;
    if s == 0 || cc % (s * s) != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("channels not divisible by {}", s * s),
        });
    }
    let c = cc / (s * s);
    let (h, w) = (ho * s, wo * s);
    let xd = x.data();
    let mut out = vec![F::zero(); x.numel()];
    for i in 0..ho {
        for j in 0..wo {
            let base = (i * wo + j) * cc;
            for dy in 0..s {
                for dx in 0..s {
                    let dst = ((i * s + dy) * w + (j * s + dx)) * c;
                    let src = base + (dy * s + dx) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<F: Scalar>(x: &Tensor<F>, s: usize) -> Result<Tensor<F>> {
    let (h, w, c) = x.hwc()?;
    if s == 1 {
        return Ok(x.clone());
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(x.numel() * s * s);
    for i in 0..h * s {
        for j in 0..w * s {
            let src = ((i / s) * w + j / s) * c;
            out.extend_from_slice(&xd[src..src + c]);
        }
    }
    Tensor::new(&[h * s, w * s, c], out)
}

/// Backward of [`upsample_nearest`]: sums each `s × s` block.
pub fn upsample_nearest_backward<F: Scalar>(g: &Tensor<F>, s: usize) -> Result<Tensor<F>> {
    let (hs, ws, c) = g.hwc()?;
    if s == 1 {
        return Ok(g.clone());
    }
    if hs % s != 0 || ws % s != 0 {
        return Err(Error::InvalidShape {
            shape: g.shape().to_vec(),
            reason: format!("not divisible by {s}"),
        });
    }
    let (h, w) = (hs / s, ws / s);
    let gd = g.data();
    let mut out = vec![F::zero(); h * w * c];
    for i in 0..hs {
        for j in 0..ws {
            let dst = ((i / s) * w + j / s) * c;
            let src = (i * ws + j) * c;
            for ch in 0..c {
                out[dst + ch] += gd[src + ch];
            }
        }
    }
    flops::add(g.numel());
    Tensor::new(&[h, w, c], out)
}

/// Scales channel `c` of every pixel by `v[c]`.
pub fn mul_channels<F: Scalar>(x: &Tensor<F>, v: &Tensor<F>) -> Result<Tensor<F>> {
    let (_, _, c) = x.hwc()?;
    if v.shape() != [c] {
        return Err(Error::shape("mul_channels", x.shape(), v.shape()));
    }
    let mut out = x.clone();
    for px in out.data_mut().chunks_mut(c) {
        for (o, &s) in px.iter_mut().zip(v.data()) {
            *o *= s;
        }
    }
    flops::add(x.numel());
    Ok(out)
}

/// Scales every channel of pixel `(h, w)` by `m[h, w]`.
pub fn mul_pixels<F: Scalar>(x: &Tensor<F>, m: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w, c) = x.hwc()?;
    if m.shape() != [h, w] {
        return Err(Error::shape("mul_pixels", x.shape(), m.shape()));
    }
    let mut out = x.clone();
    for (px, &s) in out.data_mut().chunks_mut(c).zip(m.data()) {
        px.iter_mut().for_each(|o| *o *= s);
    }
    flops::add(x.numel());
    Ok(out)
}

/// `Σ_{h,w} a[h,w,c] · b[h,w,c]` per channel.
pub fn channel_dot<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (_, _, c) = a.hwc()?;
    a.expect_same_shape(b, "channel_dot")?;
    let mut out = vec![F::zero(); c];
    for (pa, pb) in a.data().chunks(c).zip(b.data().chunks(c)) {
        for ((o, &x), &y) in out.iter_mut().zip(pa).zip(pb) {
            *o += x * y;
        }
    }
    flops::add(2 * a.numel());
    Tensor::new(&[c], out)
}

/// `Σ_c a[h,w,c] · b[h,w,c]` per pixel.
pub fn pixel_dot<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w, c) = a.hwc()?;
    a.expect_same_shape(b, "pixel_dot")?;
    let data = a
        .data()
        .chunks(c)
        .zip(b.data().chunks(c))
        .map(|(pa, pb)| pa.iter().zip(pb).fold(F::zero(), |acc, (&x, &y)| acc + x * y))
        .collect();
    flops::add(2 * a.numel());
    Tensor::new(&[h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let y = pointwise(Pointwise::Sigmoid, &Tensor::<f32>::zeros(&[2, 3]).unwrap());
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = pointwise(Pointwise::Relu, &t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gelu_matches_f64_reference() {
        let reference = {
            let x = 1.0f64;
            let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
            0.5 * x * (1.0 + u.tanh())
        };
        let y = Pointwise::Gelu.apply(1.0f32) as f64;
        assert!((y - reference).abs() < 1e-6, "{y} vs {reference}");
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let g = pointwise_backward(
            Pointwise::Sigmoid,
            &Tensor::<f32>::zeros(&[2, 2]).unwrap(),
            &Tensor::full(&[2, 2], 1.0).unwrap(),
        )
        .unwrap();
        assert!(g.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_last(&Tensor::<f32>::zeros(&[4]).unwrap());
        assert!(u.data().iter().all(|&v| v == 0.25));

        let big = softmax_last(&t(&[2], &[1000.0, 1000.0]));
        assert_eq!(big.data(), &[0.5, 0.5]);

        let y = softmax_last(&t(&[3], &[1.0, 2.0, 3.0]));
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in y.data().iter().zip(&e) {
            assert!((*a as f64 - b / s).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()).unwrap();
        let b = Tensor::<f64>::from_fn(&[4, 2], |i| (i as f64 * 0.91).cos()).unwrap();
        let ab = matmul(&a, &b).unwrap();
        // aᵀᵀ·b through matmul_tn on the explicit transpose
        let at = Tensor::from_fn(&[4, 3], |i| a[(i % 3) * 4 + i / 3]).unwrap();
        let ab2 = matmul_tn(&at, &b).unwrap();
        let bt = Tensor::from_fn(&[2, 4], |i| b[(i % 4) * 2 + i / 4]).unwrap();
        let ab3 = matmul_nt(&a, &bt).unwrap();
        assert!(ab.max_abs_diff(&ab2).unwrap() < 1e-12);
        assert!(ab.max_abs_diff(&ab3).unwrap() < 1e-12);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn dwconv_counts_taps_under_zero_padding() {
        let x = Tensor::<f32>::full(&[5, 5, 1], 1.0).unwrap();
        let w = Tensor::full(&[3, 3, 1], 1.0).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = dwconv3x3(&x, &w, &b).unwrap();
        assert_eq!(y[2 * 5 + 2], 9.0);
        assert_eq!(y[0], 4.0);
        assert_eq!(y[24], 4.0);
        assert_eq!(y[2], 6.0);
    }

    #[test]
    fn dwconv_identity_stencil() {
        let x = Tensor::<f32>::from_fn(&[3, 4, 2], |i| i as f32 - 7.0).unwrap();
        let mut w = Tensor::zeros(&[3, 3, 2]).unwrap();
        w[4 * 2] = 1.0;
        w[4 * 2 + 1] = 1.0;
        let y = dwconv3x3(&x, &w, &Tensor::zeros(&[2]).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn pool_cases() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_pool(PoolKind::Avg, &x).unwrap().data(), &[2.5]);
        assert_eq!(global_pool(PoolKind::Max, &x).unwrap().data(), &[4.0]);
        let c = Tensor::<f32>::full(&[3, 2, 2], 1.5).unwrap();
        assert_eq!(global_pool(PoolKind::Avg, &c).unwrap().data(), &[1.5, 1.5]);
        assert_eq!(global_pool(PoolKind::Max, &c).unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn space_depth_round_trip() {
        let x = Tensor::<f32>::from_fn(&[4, 6, 3], |i| i as f32).unwrap();
        let y = space_to_depth(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 12]);
        assert_eq!(depth_to_space(&y, 2).unwrap(), x);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2], |i| (i as f64).sin()).unwrap();
        let g = Tensor::<f64>::from_fn(&[4, 6, 2], |i| (i as f64 * 0.3).cos()).unwrap();
        let lhs = upsample_nearest(&x, 2).unwrap().dot(&g).unwrap();
        let rhs = x.dot(&upsample_nearest_backward(&g, 2).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::<f32>::from_fn(&[2, 2, 3], |i| i as f32).unwrap();
        let b = Tensor::<f32>::from_fn(&[2, 2, 1], |i| -(i as f32)).unwrap();
        let c = concat_last(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2, 4]);
        let (a2, b2) = split_last(&c, 3).unwrap();
        assert_eq!((a2, b2), (a, b));
    }
}
