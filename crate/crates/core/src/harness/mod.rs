//! Synthetic data, the gradient suite, the toy trainer and the ablation
//! runner behind the `cmx` command line.

pub mod ablate;
pub mod gradsuite;
pub mod synthetic;
pub mod trainer;

pub use ablate::{run_ablation, thread_cap, AblationReport, AblationRow, Suite};
pub use gradsuite::{run_suite, GradcheckReport, SuiteOptions};
pub use synthetic::{gen_scene, gen_synthetic, SyntheticOptions, SyntheticScene};
pub use trainer::{evaluate, to_samples, train_toy, TrainOptions, TrainReport};
