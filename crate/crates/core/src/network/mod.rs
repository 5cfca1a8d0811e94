//! Toy two-stream segmentation network with ablation switches.
//!
//! Both streams run the same stack of stride-2 patch-merging stages. After
//! every stage the pair is rectified, the rectified features go on to the
//! next stage and are fused into one map per stage. The decoder projects
//! the fused maps to a common width, upsamples them to the first stage
//! resolution and classifies every pixel.

mod checkpoint;
mod config;
mod loss;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, ParamEntry, MANIFEST, PARAMS};
pub use config::{AblationConfig, NetworkConfig, RectifyMode, SecondModality, StageSpec};
pub use loss::{cross_entropy, metrics, Metrics, DEFAULT_IGNORE};
pub use model::{predict, second_input, Decoder, Network, StageBlock};
pub use train::{train_step, Sample, Sgd};
