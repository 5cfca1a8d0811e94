//! Ablation suites: each row is a network configuration trained with
//! [`train_toy`] under the same seed and options.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FfmMode;
use crate::network::{AblationConfig, NetworkConfig, RectifyMode, SecondModality};
use crate::rectify::PoolMode;

use super::trainer::{train_toy, TrainOptions};

pub const NOTE: &str = "Desk-scale reproduction of the ablation configurations only. \
Numbers come from tiny synthetic scenes and say nothing about the ordering of published results.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Rectification and fusion on/off.
    Table7,
    /// Rectification and fusion variants.
    Table8,
    /// Second-modality substitutes.
    Table9,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table7" => Ok(Suite::Table7),
            "table8" => Ok(Suite::Table8),
            "table9" => Ok(Suite::Table9),
            _ => Err(Error::InvalidArgument(format!("unknown suite `{s}`"))),
        }
    }
}

impl Suite {
    pub fn rows(self) -> Vec<(&'static str, AblationConfig)> {
        let full = AblationConfig::default();
        let with = |f: &dyn Fn(&mut AblationConfig)| {
            let mut c = full;
            f(&mut c);
            c
        };
        match self {
            Suite::Table7 => vec![
                (
                    "No & Avg",
                    with(&|c| {
                        c.use_cm_frm = false;
                        c.ffm_mode = FfmMode::Avg;
                    }),
                ),
                ("CM-FRM & Avg", with(&|c| c.ffm_mode = FfmMode::Avg)),
                ("No & FFM", with(&|c| c.use_cm_frm = false)),
                ("CM-FRM & FFM", full),
            ],
            Suite::Table8 => vec![
                ("channel_only", with(&|c| c.rectify_mode = RectifyMode::ChannelOnly)),
                ("spatial_only", with(&|c| c.rectify_mode = RectifyMode::SpatialOnly)),
                ("avg_only", with(&|c| c.pool_mode = PoolMode::AvgOnly)),
                ("max_only", with(&|c| c.pool_mode = PoolMode::MaxOnly)),
                ("stage2_only", with(&|c| c.ffm_mode = FfmMode::Stage2Only)),
                ("self_attn", with(&|c| c.ffm_mode = FfmMode::SelfAttn)),
            ],
            Suite::Table9 => [
                SecondModality::None,
                SecondModality::RgbCopy,
                SecondModality::Noise,
                SecondModality::Real,
            ]
            .into_iter()
            .map(|m| (m.as_str(), with(&|c| c.second_modality = m)))
            .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ablation: AblationConfig,
    pub num_params: usize,
    pub losses: Vec<f32>,
    pub final_loss: f32,
    pub finite: bool,
    pub train_pixel_acc: f64,
    pub eval_miou: f64,
    pub eval_pixel_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub command: String,
    pub suite: Suite,
    pub note: String,
    pub seed: u64,
    pub options: TrainOptions,
    pub rows: Vec<AblationRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl AblationReport {
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# {:?} (seed {}, {} epochs)",
            self.suite, self.seed, self.options.epochs
        );
        let _ = writeln!(s, "# {}", self.note);
        let _ = writeln!(
            s,
            "{:<14} {:>9} {:>11} {:>10} {:>9} {:>9}",
            "config", "params", "final_loss", "train_acc", "eval_miou", "eval_acc"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>9} {:>11.5} {:>10.4} {:>9.4} {:>9.4}",
                r.name, r.num_params, r.final_loss, r.train_pixel_acc, r.eval_miou, r.eval_pixel_acc
            );
        }
        s
    }
}

/// Worker cap from `CMX_THREADS`, defaulting to the available cores.
pub fn thread_cap() -> usize {
    std::env::var("CMX_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn run_row(
    base: &NetworkConfig,
    name: &str,
    ab: AblationConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<AblationRow> {
    let cfg = NetworkConfig {
        ablation: ab,
        ..base.clone()
    };
    let (_, rep) = train_toy(&cfg, opts, seed)?;
    let final_loss = rep.losses.last().copied().unwrap_or(f32::NAN);
    Ok(AblationRow {
        name: name.to_string(),
        ablation: ab,
        num_params: rep.num_params,
        finite: rep.losses.iter().all(|l| l.is_finite()),
        losses: rep.losses,
        final_loss,
        train_pixel_acc: rep.train.pixel_acc,
        eval_miou: rep.eval.miou,
        eval_pixel_acc: rep.eval.pixel_acc,
    })
}

/// Runs every row of `suite`; rows are spread over at most `threads`
/// workers and reported in suite order.
pub fn run_ablation(
    suite: Suite,
    base: &NetworkConfig,
    opts: &TrainOptions,
    seed: u64,
    threads: usize,
) -> Result<AblationReport> {
    let rows = suite.rows();
    let workers = threads.clamp(1, rows.len());
    let mut results: Vec<Option<Result<AblationRow>>> = (0..rows.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let rows = &rows;
                scope.spawn(move || {
                    rows.iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, (name, ab))| (i, run_row(base, name, *ab, opts, seed)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("ablation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let rows = results
        .into_iter()
        .map(|r| r.expect("every row assigned"))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        command: "ablate".into(),
        suite,
        note: NOTE.into(),
        seed,
        options: *opts,
        rows,
        wall_time_s: None,
    })
}
