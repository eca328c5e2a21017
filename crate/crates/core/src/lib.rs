//! Fixed-point weight quantization, bit error injection and bit error
//! robust training for small fully connected networks.
//!
//! The pieces fit together as follows: [`fixedpoint`] maps float weights to
//! `m`-bit codes, [`biterror`] flips bits of those codes, [`smallnet`] is
//! the classifier, [`trainer`] trains it with optional clipping and random
//! bit error training, and [`evalharness`] measures clean and robust test
//! error.

pub mod biterror;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evalharness;
pub mod fixedpoint;
pub mod report;
pub mod rng;
pub mod selftest;
pub mod smallnet;
pub mod trainer;

pub use biterror::{ChipField, InjectionReport, ProfiledMap};
pub use dataset::{Dataset, DatasetBundle};
pub use error::{Error, Result};
pub use evalharness::{ProfiledResult, RobustnessReport, RteEntry};
pub use fixedpoint::{
    Granularity, GroupRange, IntegerRepr, QuantParams, QuantScheme, QuantizedTensor, RangeMode, Rounding,
};
pub use smallnet::{Architecture, LossSpec, Model};
pub use trainer::{TrainConfig, TrainOutcome, TrainedModel};

pub use ndarray;
