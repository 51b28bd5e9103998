//! Extractor -> aggregator -> head classifiers and their training loop.
//!
//! ```
//! use san_core::data::{gen_synthetic_sets, SyntheticTask};
//! use san_core::pipeline::AdamConfig;
//! use san_core::{evaluate, train, Activation, AggregatorKind, Model, ModelSpec, TrainConfig};
//!
//! # fn main() -> san_core::Result<()> {
//! let data = gen_synthetic_sets(&SyntheticTask::two_blobs(0.5, (5, 20)), 100, 1)?;
//! let san = AggregatorKind::San { outputs: 16, activation: Activation::Relu };
//! let mut model = Model::new(ModelSpec::set_classifier(2, vec![8], san, vec![], 2), 0)?;
//! let config = TrainConfig {
//!     optimizer: AdamConfig { lr: 1e-2, ..Default::default() },
//!     batch_size: 16,
//!     epochs: 5,
//!     seed: 0,
//!     validation_fraction: 0.2,
//! };
//! let metrics = train(&mut model, &data, &config)?;
//! assert_eq!(metrics.len(), 10);
//! assert!(evaluate(&model, &data)?.accuracy > 0.9);
//! # Ok(())
//! # }
//! ```

mod model;
mod optim;
mod train;

pub use model::{image_to_set, Extractor, Head, InputKind, Model, ModelSpec};
pub use optim::{Adam, AdamConfig};
pub use train::{argmax, cross_entropy, evaluate, train, Evaluation, TrainConfig};
