use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::{
    metrics, predict, second_input, train_step, Metrics, Network, NetworkConfig, Sample, Sgd, DEFAULT_IGNORE,
};
use crate::numerics::Rng;

use super::synthetic::{gen_synthetic, SyntheticOptions, SyntheticScene};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub data: SyntheticOptions,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 1,
            lr: 0.02,
            momentum: 0.9,
            train_scenes: 8,
            eval_scenes: 8,
            data: SyntheticOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub command: String,
    pub seed: u64,
    pub options: TrainOptions,
    pub config: NetworkConfig,
    pub num_params: usize,
    /// Train pixel accuracy of the freshly initialized model.
    pub initial_train_pixel_acc: f64,
    /// Mean training loss of each epoch.
    pub losses: Vec<f32>,
    pub train: Metrics,
    pub eval: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// Turns scenes into samples, substituting the second input as configured.
pub fn to_samples(scenes: &[SyntheticScene], cfg: &NetworkConfig, noise: &Rng) -> Result<Vec<Sample>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(Sample {
                rgb: s.rgb.clone(),
                x: second_input(cfg.ablation.second_modality, &s.rgb, &s.x, noise.split(i as u64).seed())?,
                labels: s.labels.clone(),
            })
        })
        .collect()
}

pub fn evaluate(net: &mut Network<f32>, samples: &[Sample]) -> Result<Metrics> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for s in samples {
        pred.extend(predict(&net.forward(&s.rgb, s.x.as_ref())?)?);
        gt.extend_from_slice(&s.labels);
    }
    metrics(&pred, &gt, net.config.classes, DEFAULT_IGNORE)
}

/// Trains `cfg` on generated scenes and evaluates on held-out ones.
///
/// All randomness (data, initialization, noise inputs, batch order) is
/// derived from `seed`.
pub fn train_toy(cfg: &NetworkConfig, opts: &TrainOptions, seed: u64) -> Result<(Network<f32>, TrainReport)> {
    let root = Rng::new(seed);
    let data = SyntheticOptions {
        classes: cfg.classes,
        ..opts.data
    };
    let train_scenes = gen_synthetic(opts.train_scenes, &data, root.split(1).seed())?;
    let eval_scenes = gen_synthetic(opts.eval_scenes, &data, root.split(2).seed())?;
    let mut net = Network::<f32>::new(cfg.clone(), &mut root.split(3))?;
    let train = to_samples(&train_scenes, cfg, &root.split(4))?;
    let eval = to_samples(&eval_scenes, cfg, &root.split(5))?;
    let mut order_rng = root.split(6);

    let initial_train_pixel_acc = evaluate(&mut net, &train)?.pixel_acc;
    let mut opt = Sgd::new(opts.lr, opts.momentum);
    let mut losses = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = opts.batch_size.max(1);
    for _ in 0..opts.epochs {
        order_rng.shuffle(&mut order);
        let mut sum = 0.0f32;
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            let b: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            sum += train_step(&mut net, &b, &mut opt, DEFAULT_IGNORE)?;
            steps += 1;
        }
        losses.push(sum / steps.max(1) as f32);
    }
    let train_metrics = evaluate(&mut net, &train)?;
    let eval_metrics = evaluate(&mut net, &eval)?;
    let report = TrainReport {
        command: "train-toy".into(),
        seed,
        options: *opts,
        config: cfg.clone(),
        num_params: crate::numerics::Parameterized::num_params(&net),
        initial_train_pixel_acc,
        losses,
        train: train_metrics,
        eval: eval_metrics,
        wall_time_s: None,
    };
    Ok((net, report))
}
