use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cmx_core::encoders::{
    depth_encode, parse_events_csv, polar_encode, thermal_encode, voxelize, AolpConvention, Chroma, EventStream,
    PolarKind, PolarStack,
};
use cmx_core::harness::{run_ablation, run_suite, thread_cap, train_toy, Suite, SuiteOptions, TrainOptions};
use cmx_core::network::{
    load_checkpoint, metrics, predict, save_checkpoint, second_input, NetworkConfig, SecondModality, DEFAULT_IGNORE,
};
use cmx_core::numerics::cmxt;
use cmx_core::Tensor;

#[derive(Parser, Debug)]
#[command(name = "cmx", version, about = "Cross-modal rectification and fusion toolkit")]
struct Cli {
    /// Root seed; each command has its own default.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with optional `network` and `train` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path (report JSON, or the tensor for `encode` and `infer`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Add wall-clock time to reports; timed reports are not reproducible.
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode raw sensor data into a 3-channel (or B-channel) CMXT tensor.
    Encode {
        #[arg(value_enum)]
        source: Source,
        /// Input files: four CMXT images (0°, 45°, 90°, 135°) for `polar`,
        /// one CSV for `events`, one CMXT image otherwise.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = KindArg::Dolp)]
        kind: KindArg,
        /// Defaults to the chroma of the input stack.
        #[arg(long, value_enum)]
        chroma: Option<ChromaArg>,
        #[arg(long, value_enum, default_value_t = ConventionArg::Literal)]
        convention: ConventionArg,
        #[arg(long, default_value_t = 3)]
        bins: usize,
        #[arg(long, default_value_t = 6)]
        upscale: usize,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Time window start; defaults to the first event.
        #[arg(long, requires = "t1")]
        t0: Option<f64>,
        /// Time window end; defaults to the last event.
        #[arg(long, requires = "t0")]
        t1: Option<f64>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Probe every end-to-end parameter instead of a sample.
        #[arg(long)]
        full: bool,
    },
    /// Train the toy network on synthetic scenes.
    TrainToy {
        #[arg(long)]
        epochs: Option<usize>,
        /// Directory to store the trained weights in.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every configuration of an ablation suite.
    Ablate {
        #[arg(value_enum)]
        suite: SuiteArg,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict class ids with a saved checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        /// Second modality; required when the model uses the real sensor.
        #[arg(long)]
        x: Option<PathBuf>,
    },
    /// mIoU and pixel accuracy of a prediction map.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = DEFAULT_IGNORE)]
        ignore: u32,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    Polar,
    Events,
    Thermal,
    Depth,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Dolp,
    Aolp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ChromaArg {
    Mono,
    Tri,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConventionArg {
    Literal,
    Physical,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    Table7,
    Table8,
    Table9,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    network: NetworkConfig,
    train: TrainOptions,
}

#[derive(Serialize)]
struct MetricsReport {
    command: &'static str,
    classes: usize,
    ignore_id: u32,
    #[serde(flatten)]
    metrics: cmx_core::network::Metrics,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes the report to `--out`, or to stdout without it.
fn emit<T: Serialize>(cli: &Cli, report: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    match &cli.out {
        Some(p) => std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn elapsed(cli: &Cli, start: Instant) -> Option<f64> {
    cli.timing.then(|| start.elapsed().as_secs_f64())
}

/// Returns whether every check passed.
fn run(cli: &Cli) -> Result<bool> {
    let start = Instant::now();
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.cmd {
        Command::Encode {
            source,
            inputs,
            kind,
            chroma,
            convention,
            bins,
            upscale,
            height,
            width,
            t0,
            t1,
        } => {
            let Some(out) = &cli.out else {
                bail!("encode needs --out");
            };
            let one = || -> Result<Tensor<f32>> {
                if inputs.len() != 1 {
                    bail!("expected one input file, got {}", inputs.len());
                }
                Ok(cmxt::load(&inputs[0])?)
            };
            let t = match source {
                Source::Polar => {
                    let [a, b, c, d] = inputs.as_slice() else {
                        bail!("polar needs four images (0°, 45°, 90°, 135°), got {}", inputs.len());
                    };
                    let ps = PolarStack::new(cmxt::load(a)?, cmxt::load(b)?, cmxt::load(c)?, cmxt::load(d)?)?;
                    let chroma = match chroma {
                        Some(ChromaArg::Mono) => Chroma::Mono,
                        Some(ChromaArg::Tri) => Chroma::Tri,
                        None => ps.chroma(),
                    };
                    let kind = match kind {
                        KindArg::Dolp => PolarKind::Dolp,
                        KindArg::Aolp => PolarKind::Aolp,
                    };
                    let convention = match convention {
                        ConventionArg::Literal => AolpConvention::Literal,
                        ConventionArg::Physical => AolpConvention::Physical,
                    };
                    polar_encode(&ps, kind, chroma, convention)?
                }
                Source::Events => {
                    let [path] = inputs.as_slice() else {
                        bail!("events needs one CSV file, got {}", inputs.len());
                    };
                    let (Some(h), Some(w)) = (height, width) else {
                        bail!("events needs --height and --width");
                    };
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    let events = parse_events_csv(&text, &path.display().to_string())?;
                    let window = t0.zip(*t1);
                    let grid = voxelize(&EventStream::new(events, *h, *w, window)?, *bins, *upscale)?;
                    eprintln!(
                        "events: {} retained, {} outside the sensor, {} outside the window",
                        grid.retained, grid.rejected_spatial, grid.rejected_time
                    );
                    grid.to_tensor()
                }
                Source::Thermal => thermal_encode(&one()?)?,
                Source::Depth => depth_encode(&one()?)?,
            };
            let bytes = cmxt::encode(&t);
            std::fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            println!("shape {:?} sha256 {}", t.shape(), sha256_hex(&bytes));
            Ok(true)
        }
        Command::Gradcheck { full } => {
            let mut opts = SuiteOptions {
                seed: cli.seed.unwrap_or(SuiteOptions::default().seed),
                ..Default::default()
            };
            if *full {
                opts.end_to_end_probes = None;
            }
            let mut report = run_suite(&opts)?;
            for e in &report.entries {
                eprintln!(
                    "{} {:<28} checked {:>6} max_rel_err {:.3e} (tol {:.0e})",
                    if e.pass { "ok  " } else { "FAIL" },
                    e.name,
                    e.checked,
                    e.max_rel_err,
                    e.tolerance
                );
                if !e.pass {
                    if let Some(w) = &e.worst {
                        eprintln!(
                            "     worst at {}[{}]: analytic {:.9e} numeric {:.9e}",
                            w.tensor, w.index, w.analytic, w.numeric
                        );
                    }
                }
            }
            for op in &report.uncovered {
                eprintln!("FAIL no gradient check covers `{op}`");
            }
            report.wall_time_s = elapsed(cli, start);
            emit(cli, &report)?;
            Ok(report.all_pass)
        }
        Command::TrainToy { epochs, checkpoint } => {
            let mut opts = cfg.train;
            if let Some(e) = epochs {
                opts.epochs = *e;
            }
            let (net, mut report) = train_toy(&cfg.network, &opts, cli.seed.unwrap_or(7))?;
            eprintln!(
                "train pixel acc {:.4} (initial {:.4}), eval pixel acc {:.4}, eval mIoU {:.4}",
                report.train.pixel_acc, report.initial_train_pixel_acc, report.eval.pixel_acc, report.eval.miou
            );
            if let Some(dir) = checkpoint {
                save_checkpoint(dir, &net)?;
            }
            report.wall_time_s = elapsed(cli, start);
            emit(cli, &report)?;
            Ok(true)
        }
        Command::Ablate { suite, epochs } => {
            let suite = match suite {
                SuiteArg::Table7 => Suite::Table7,
                SuiteArg::Table8 => Suite::Table8,
                SuiteArg::Table9 => Suite::Table9,
            };
            let mut opts = cfg.train;
            if let Some(e) = epochs {
                opts.epochs = *e;
            }
            let mut report = run_ablation(suite, &cfg.network, &opts, cli.seed.unwrap_or(7), thread_cap())?;
            eprint!("{}", report.render_table());
            report.wall_time_s = elapsed(cli, start);
            emit(cli, &report)?;
            Ok(report.rows.iter().all(|r| r.finite))
        }
        Command::Infer { checkpoint, rgb, x } => {
            let Some(out) = &cli.out else {
                bail!("infer needs --out");
            };
            let mut net = load_checkpoint(checkpoint)?;
            let rgb = cmxt::load(rgb)?;
            let modality = net.config.ablation.second_modality;
            let x = match (x, modality) {
                (Some(p), _) => cmxt::load(p)?,
                (None, SecondModality::Real) => bail!("this model needs --x"),
                (None, _) => rgb.clone(),
            };
            let x = second_input(modality, &rgb, &x, cli.seed.unwrap_or(0))?;
            let logits = net.forward(&rgb, x.as_ref())?;
            let (h, w, _) = logits.hwc()?;
            let pred = predict(&logits)?;
            let t = Tensor::new(&[h, w], pred.iter().map(|&p| p as f32).collect())?;
            let bytes = cmxt::encode(&t);
            std::fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            println!("shape {:?} sha256 {}", t.shape(), sha256_hex(&bytes));
            Ok(true)
        }
        Command::Metrics {
            pred,
            gt,
            classes,
            ignore,
        } => {
            let ids = |p: &Path| -> Result<Vec<u32>> {
                let t = cmxt::load(p)?;
                t.data()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32 {
                            Ok(v as u32)
                        } else {
                            bail!("{}: {v} is not a class id", p.display())
                        }
                    })
                    .collect()
            };
            let m = metrics(&ids(pred)?, &ids(gt)?, *classes, *ignore)?;
            eprintln!("mIoU {:.4} pixel acc {:.4}", m.miou, m.pixel_acc);
            emit(
                cli,
                &MetricsReport {
                    command: "metrics",
                    classes: *classes,
                    ignore_id: *ignore,
                    metrics: m,
                },
            )?;
            Ok(true)
        }
    }
}
