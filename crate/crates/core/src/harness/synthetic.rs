//! Tile-mosaic scenes where part of the class signal lives only in X.
//!
//! A scene is a `GRID × GRID` mosaic of equal tiles, each with a random
//! class. X encodes the class everywhere as a constant intensity band
//! `(class + 1) / (K + 1)` plus noise. RGB shows the class colour plus
//! noise, except in exactly `round(ambiguity · GRID²)` tiles where it is
//! replaced by a per-pixel texture of palette colours drawn from a random
//! stream that never sees the labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const GRID: usize = 4;
const RGB_NOISE: f64 = 0.05;
const X_NOISE: f64 = 0.03;

const BASE_PALETTE: [[f32; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.1, 0.2, 0.9],
    [0.9, 0.9, 0.1],
    [0.9, 0.1, 0.9],
    [0.1, 0.9, 0.9],
    [0.5, 0.5, 0.5],
    [0.95, 0.6, 0.2],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub rgb: Tensor<f32>,
    pub x: Tensor<f32>,
    pub labels: Vec<u32>,
    /// Per pixel: does RGB carry texture instead of the class colour?
    pub ambiguous: Vec<bool>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOptions {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub ambiguity: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 4,
            ambiguity: 0.5,
        }
    }
}

/// Class colours; the first eight are fixed, later ones are seeded.
pub fn palette(classes: usize) -> Vec<[f32; 3]> {
    let mut rng = Rng::new(0xC01_0125);
    (0..classes)
        .map(|k| {
            BASE_PALETTE
                .get(k)
                .copied()
                .unwrap_or_else(|| [rng.next_f64() as f32, rng.next_f64() as f32, rng.next_f64() as f32])
        })
        .collect()
}

/// Nearest palette colour of every pixel.
pub fn color_lookup(rgb: &Tensor<f32>, classes: usize) -> Result<Vec<u32>> {
    rgb.hwc()?;
    let pal = palette(classes);
    Ok(rgb
        .data()
        .chunks(3)
        .map(|px| {
            let d = |c: &[f32; 3]| (0..3).map(|i| (px[i] - c[i]).powi(2)).sum::<f32>();
            let mut best = 0;
            for k in 1..classes {
                if d(&pal[k]) < d(&pal[best]) {
                    best = k;
                }
            }
            best as u32
        })
        .collect())
}

pub fn gen_scene(opts: &SyntheticOptions, seed: u64) -> Result<SyntheticScene> {
    let SyntheticOptions {
        height: h,
        width: w,
        classes: k,
        ambiguity,
    } = *opts;
    if !(0.0..=1.0).contains(&ambiguity) {
        return Err(Error::InvalidArgument(format!("ambiguity {ambiguity} outside [0, 1]")));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("{k} classes")));
    }
    if h == 0 || w == 0 || h % (4 * GRID) != 0 || w % (4 * GRID) != 0 {
        return Err(Error::InvalidArgument(format!(
            "scene size {h}×{w} must be a positive multiple of {}",
            4 * GRID
        )));
    }
    let root = Rng::new(seed);
    let (mut layout, mut pick, mut color_noise, mut texture, mut x_noise) = (
        root.split(0),
        root.split(1),
        root.split(2),
        root.split(3),
        root.split(4),
    );

    let tiles = GRID * GRID;
    let tile_class: Vec<u32> = (0..tiles).map(|_| layout.below(k) as u32).collect();
    let mut order: Vec<usize> = (0..tiles).collect();
    pick.shuffle(&mut order);
    let n_amb = (ambiguity * tiles as f64).round() as usize;
    let mut tile_amb = vec![false; tiles];
    for &t in &order[..n_amb] {
        tile_amb[t] = true;
    }

    let pal = palette(k);
    let (th, tw) = (h / GRID, w / GRID);
    let mut rgb = Vec::with_capacity(h * w * 3);
    let mut x = Vec::with_capacity(h * w * 3);
    let mut labels = Vec::with_capacity(h * w);
    let mut ambiguous = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let tile = (i / th) * GRID + j / tw;
            let class = tile_class[tile];
            let base = if tile_amb[tile] {
                pal[texture.below(k)]
            } else {
                pal[class as usize]
            };
            for c in base {
                rgb.push((c as f64 + color_noise.uniform(-RGB_NOISE, RGB_NOISE)) as f32);
            }
            let band = (class as f64 + 1.0) / (k as f64 + 1.0) + x_noise.uniform(-X_NOISE, X_NOISE);
            x.extend_from_slice(&[band as f32; 3]);
            labels.push(class);
            ambiguous.push(tile_amb[tile]);
        }
    }
    Ok(SyntheticScene {
        rgb: Tensor::new(&[h, w, 3], rgb)?,
        x: Tensor::new(&[h, w, 3], x)?,
        labels,
        ambiguous,
        seed,
    })
}

/// `n` scenes; scene `i` is generated from an independent stream of `seed`.
pub fn gen_synthetic(n: usize, opts: &SyntheticOptions, seed: u64) -> Result<Vec<SyntheticScene>> {
    let root = Rng::new(seed);
    (0..n).map(|i| gen_scene(opts, root.split(i as u64).seed())).collect()
}
