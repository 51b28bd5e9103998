//! Set-to-vector aggregators.
//!
//! Every aggregator here has two routes: a plain evaluation over a
//! [`FeatureSet`] and a graph builder that records the same computation on a
//! [`crate::Graph`] so it can be trained. The permutation-invariant ones
//! (SAN, max/avg/sum pooling) accept any cardinality; flatten and conv-1x1
//! are the order-sensitive baselines and need a fixed cardinality.

mod feature_set;
mod pooling;
mod positional;
mod san;
mod smooth_max;

use serde::{Deserialize, Serialize};

pub use feature_set::FeatureSet;
pub use pooling::{conv1x1, conv1x1_node, fixed_cardinality, flatten, flatten_node, pool, pool_node, PoolKind};
pub use positional::{attach_positions, position_columns, PositionalMode};
pub(crate) use san::glorot_uniform;
pub use san::{san_aggregate_node, Activation, SanLayer};
pub use smooth_max::{power_max_approx, SmoothMaxMode};

/// Which aggregator sits between the feature extractor and the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregatorKind {
    San { outputs: usize, activation: Activation },
    MaxPool,
    AvgPool,
    SumPool,
    Flatten,
    Conv1x1,
}

impl AggregatorKind {
    /// Flatten and conv-1x1 tie the head width to the set cardinality.
    pub fn accepts_variable_cardinality(&self) -> bool {
        !matches!(self, AggregatorKind::Flatten | AggregatorKind::Conv1x1)
    }

    /// Length of the aggregated vector for sets of `cardinality` rows of
    /// `feature_dim` columns.
    pub fn output_dim(&self, feature_dim: usize, cardinality: usize) -> usize {
        match self {
            AggregatorKind::San { outputs, .. } => *outputs,
            AggregatorKind::MaxPool | AggregatorKind::AvgPool | AggregatorKind::SumPool => feature_dim,
            AggregatorKind::Flatten => cardinality * feature_dim,
            AggregatorKind::Conv1x1 => cardinality,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::San { .. } => "san",
            AggregatorKind::MaxPool => "max",
            AggregatorKind::AvgPool => "avg",
            AggregatorKind::SumPool => "sum",
            AggregatorKind::Flatten => "flatten",
            AggregatorKind::Conv1x1 => "conv1x1",
        }
    }
}
