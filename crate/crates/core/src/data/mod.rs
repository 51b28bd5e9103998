//! Dataset ingestion, synthetic generators, resizing and CSV output.

mod dataset;
mod idx;
mod metrics;
mod resize;
mod synthetic;

pub use dataset::{LabeledDataset, Sample};
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, write_idx};
pub use metrics::{write_collisions_csv, write_metrics_csv, write_profile_csv, MetricsRecord, Split};
pub use resize::{resize_dataset, resize_dataset_random, resize_image, ResizeMethod};
pub use synthetic::{gen_synthetic_sets, SyntheticTask};
