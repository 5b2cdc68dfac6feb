//! Conditional diffusion imputation and forecasting for multichannel time
//! series, with structured state-space layers inside every residual block.

pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod fft;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod ssm;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{Dataset, Scaler, Split, SynthKind, SynthSpec};
pub use diffusion::{ConditioningBundle, DiffusionConfig, DiffusionMode, DiffusionSchedule, Parametrization};
pub use error::{Error, Result};
pub use masking::{MaskPair, Scenario};
pub use metrics::EvalReport;
pub use model::{ModelConfig, SssdModel};
pub use optim::{AdamConfig, AdamState};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::SeededRng;
pub use tensor::Tensor;
