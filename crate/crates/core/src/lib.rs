//! Multi-environment training with a shared feature extractor and
//! per-environment classifier heads pulled toward a common value by a
//! variance penalty in parameter space.
//!
//! The crate covers the whole pipeline: synthetic benchmarks with
//! controllable spurious correlations ([`datagen`]), strategies that split a
//! dataset into training environments ([`partitioning`]), the model and its
//! gradients ([`model`], [`regularizers`]), AdaDelta training with early
//! stopping ([`optimizer`]), and evaluation, ensembles and sweeps ([`eval`]).
//! [`cli`] drives experiments from TOML config files.

pub mod cli;
pub mod data;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod model;
pub mod optimizer;
pub mod partitioning;
pub mod regularizers;

pub use data::{read_dataset, write_dataset, Dataset, Example, Label, Meta};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{forward, grad_model, init_params, loss_bce, Batch, HeadSelector, Labels, ModelParams};
pub use optimizer::{merge_heads, train, MergeMode, Objective, RunReport, TrainConfig};
pub use partitioning::{EnvironmentPartition, PartitionStrategy};
pub use regularizers::{RelDenominator, VarianceMode};
