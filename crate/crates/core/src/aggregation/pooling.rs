//! Parameter-free pooling plus the order-sensitive flatten / conv-1x1 baselines.

use serde::{Deserialize, Serialize};

use super::FeatureSet;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
    Sum,
}

/// Coordinatewise max / mean / sum over the rows of `set`.
pub fn pool(set: &FeatureSet, kind: PoolKind) -> Vec<f64> {
    let mut rows = set.rows();
    let mut acc = rows.next().expect("feature sets are non-empty").to_vec();
    for row in rows {
        for (a, &v) in acc.iter_mut().zip(row) {
            match kind {
                PoolKind::Max => *a = a.max(v),
                PoolKind::Avg | PoolKind::Sum => *a += v,
            }
        }
    }
    if kind == PoolKind::Avg {
        let n = set.cardinality() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    acc
}

/// Graph version of [`pool`] on a `[n, K]` node. Max pooling routes the
/// gradient to the first maximizing row.
pub fn pool_node(g: &mut Graph, set: NodeId, kind: PoolKind) -> Result<NodeId> {
    match kind {
        PoolKind::Max => g.reduce_max(set, 0),
        PoolKind::Sum => g.reduce_sum(set, 0),
        PoolKind::Avg => {
            let n = g.value(set).shape()[0] as f64;
            let s = g.reduce_sum(set, 0)?;
            g.scale(s, 1.0 / n)
        }
    }
}

/// Row-order concatenation of all elements, length `n * K`.
pub fn flatten(set: &FeatureSet) -> Vec<f64> {
    set.data().to_vec()
}

pub fn flatten_node(g: &mut Graph, set: NodeId) -> Result<NodeId> {
    let n = g.value(set).numel();
    g.reshape(set, vec![n])
}

/// One-channel 1x1 convolution: entry `i` is `w . x_i + b0`.
pub fn conv1x1(set: &FeatureSet, weights: &[f64], bias: f64) -> Result<Vec<f64>> {
    if weights.len() != set.dim() {
        return Err(Error::Dimension {
            op: "conv1x1",
            left: vec![set.cardinality(), set.dim()],
            right: vec![weights.len()],
        });
    }
    Ok(set
        .rows()
        .map(|row| row.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() + bias)
        .collect())
}

/// Graph version of [`conv1x1`] with `[K, 1]` weights and a `[1]` bias.
pub fn conv1x1_node(g: &mut Graph, set: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
    let n = g.value(set).shape()[0];
    let proj = g.matmul(set, weights)?;
    let shifted = g.add(proj, bias)?;
    g.reshape(shifted, vec![n])
}

/// Checks that every set in a batch has the same cardinality and returns it.
///
/// Flatten and conv-1x1 need this; the error names the first offending sample.
pub fn fixed_cardinality<'a, I>(sets: I) -> Result<usize>
where
    I: IntoIterator<Item = &'a FeatureSet>,
{
    let mut expected = None;
    for (i, set) in sets.into_iter().enumerate() {
        match expected {
            None => expected = Some(set.cardinality()),
            Some(n) if n != set.cardinality() => {
                return Err(Error::contract(format!(
                    "sample {i} has cardinality {}, expected {n} for an order-sensitive aggregator",
                    set.cardinality()
                )))
            }
            Some(_) => {}
        }
    }
    expected.ok_or_else(|| Error::contract("empty batch"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> FeatureSet {
        FeatureSet::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap()
    }

    #[test]
    fn pools() {
        assert_eq!(pool(&set(), PoolKind::Max), vec![3.0, 5.0]);
        assert_eq!(pool(&set(), PoolKind::Avg), vec![2.0, 3.5]);
        assert_eq!(pool(&set(), PoolKind::Sum), vec![4.0, 7.0]);
    }

    #[test]
    fn pool_nodes_match() {
        for kind in [PoolKind::Max, PoolKind::Avg, PoolKind::Sum] {
            let mut g = Graph::new();
            let x = g.constant(set().to_tensor());
            let p = pool_node(&mut g, x, kind).unwrap();
            assert_eq!(g.value(p).data(), pool(&set(), kind).as_slice());
        }
    }

    #[test]
    fn flatten_and_conv() {
        let s = FeatureSet::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(flatten(&s), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(conv1x1(&s, &[1.0, 1.0], 0.0).unwrap(), vec![3.0, 7.0]);
        assert!(conv1x1(&s, &[1.0], 0.0).is_err());
    }

    #[test]
    fn conv_node_matches() {
        let s = FeatureSet::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(s.to_tensor());
        let w = g.param(crate::Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap());
        let b = g.param(crate::Tensor::scalar(2.0).unwrap());
        let c = conv1x1_node(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(c).data(), conv1x1(&s, &[0.5, -1.0], 2.0).unwrap().as_slice());
    }

    #[test]
    fn variable_cardinality_is_a_contract_error() {
        let a = FeatureSet::from_scalars(&[0.0; 4]).unwrap();
        let b = FeatureSet::from_scalars(&[0.0; 9]).unwrap();
        assert_eq!(fixed_cardinality([&a, &a]).unwrap(), 4);
        let err = fixed_cardinality([&a, &b]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(err.to_string().contains("sample 1"));
    }
}
