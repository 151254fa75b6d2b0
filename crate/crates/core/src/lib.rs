//! Dynamic batch adaptation for small MLPs on MNIST.
//!
//! The [`dba`] module holds the selection algorithm itself. Everything else
//! is the supporting engine: dense matrices ([`tensor`]), seeded random
//! streams ([`rng`]), IDX loading and subsampling ([`data`]), the 784-64-10
//! network with per-sample gradients ([`mlp`]), optimizers and the plateau
//! schedule ([`optim`]), run configuration ([`config`]) and the training
//! harness ([`harness`]).

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod dba;
mod error;
pub mod harness;
pub mod mlp;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use config::{preset, preset_names, ConfigFile, OptimizerKind, RunConfig};
pub use data::{Dataset, SubsetMode, SubsetSpec};
pub use dba::{
    dba_step, BatchSizeController, DbaConfig, GradMetricKind, MarginLossKind, MetricState, SelectionOutcome,
    Strategy,
};
pub use error::{Error, Result};
pub use harness::{aggregate, run_training, EpochRecord, MnistSource, RunData, RunSummary};
pub use mlp::{Architecture, MlpGrads, MlpParams, PerSampleGrads};
pub use rng::{Purpose, RngState};
pub use tensor::{Ema, Matrix};
