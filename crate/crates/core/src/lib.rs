//! Set aggregation networks: a tape-based autodiff engine, permutation
//! invariant set aggregators, classifier pipelines built on them, numerical
//! checks of their approximation properties and the data tooling around it.

pub mod aggregation;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod pipeline;
pub mod tensor;
pub mod theory;

pub use aggregation::{Activation, AggregatorKind, FeatureSet, PositionalMode, SanLayer};
pub use autodiff::{Graph, NodeId, Primitive};
pub use data::{LabeledDataset, MetricsRecord, Sample, Split};
pub use error::{Error, Result};
pub use pipeline::{evaluate, train, Model, ModelSpec, TrainConfig};
pub use tensor::Tensor;
