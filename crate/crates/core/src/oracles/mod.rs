//! Numerical ground truth for the benchmark operators and dataset assembly.

pub mod dataset;
pub mod interp;
pub mod ode;
pub mod truth;

pub use dataset::{build_dataset, DatasetSpec, Experiment, OperatorDataset, QuerySpec};
pub use interp::{Bilinear, Interp1d, Interpolation};
pub use ode::Dopri5;
